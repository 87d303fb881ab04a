"""The three-part network (preliminary selector, ultimate selector, value generator) and checkpoints."""

from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from .config import TrainConfig
from .encoding import Batch, PretrainedEncoder, ToyTransformerEncoder
from .ontology import Ontology
from .selector import ClassificationHead, PreliminaryHead, SpanHead
from .tokenization import PAD, PretrainedTokenizerAdapter, WordTokenizer

CHECKPOINT_FORMAT = "dssdst-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def build_encoder(config: TrainConfig, vocab_size: int):
    if config.encoder == "toy":
        return ToyTransformerEncoder(
            vocab_size,
            hidden_size=config.hidden_size,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            max_len=config.max_len,
            dropout=config.dropout,
            position=config.position_embedding,
        )
    return PretrainedEncoder.from_pretrained(config.encoder, vocab_size)


def build_tokenizer(config: TrainConfig, texts=()):
    if config.encoder == "toy":
        return WordTokenizer.build(texts)
    return PretrainedTokenizerAdapter.from_pretrained(config.encoder)


class DSSDSTModel(nn.Module):
    """Separate encoders for each part; the generator may share the ultimate selector's encoder."""

    def __init__(self, ontology: Ontology, tokenizer, config: TrainConfig, encoder_factory=None):
        super().__init__()
        self.ontology = ontology
        self.tokenizer = tokenizer
        self.config = config
        factory = encoder_factory or (lambda: build_encoder(config, tokenizer.vocab_size))
        self.pre_encoder = factory()
        d = self.pre_encoder.hidden_size
        self.pre_head = PreliminaryHead(d, config.dropout)
        self.ult_encoder = factory()
        self.ult_span = SpanHead(d)
        self.ult_cls = ClassificationHead(ontology, d, config.dropout)
        self.gen_encoder = None if config.share_generator_encoder else factory()
        self.gen_span = SpanHead(d)
        self.gen_cls = ClassificationHead(ontology, d, config.dropout)

    @property
    def pad_id(self) -> int:
        return self.tokenizer.special_id(PAD)

    def _encode(self, encoder, batch: Batch):
        return encoder(batch.tokens, batch.segments, batch.attention_mask)

    def preliminary(self, batch: Batch):
        """(B, J, 2) selection distribution ``[p_sel, p_fail]``."""
        O = self._encode(self.pre_encoder, batch)
        return self.pre_head(O, batch.slot_pos, batch.dialogue_mask)

    def ultimate(self, batch: Batch):
        O = self._encode(self.ult_encoder, batch)
        start, end = self.ult_span(O, batch.slot_pos, batch.span_mask)
        return start, end, self.ult_cls(O, batch.slot_pos, batch.dialogue_mask)

    def generator(self, batch: Batch):
        O = self._encode(self.gen_encoder or self.ult_encoder, batch)
        start, end = self.gen_span(O, batch.slot_pos, batch.span_mask)
        return start, end, self.gen_cls(O, batch.slot_pos, batch.dialogue_mask)

    def preliminary_parameters(self):
        return list(self.pre_encoder.parameters()) + list(self.pre_head.parameters())

    def ult_gen_parameters(self):
        params = list(self.ult_encoder.parameters()) + list(self.ult_span.parameters()) + list(self.ult_cls.parameters())
        if self.gen_encoder is not None:
            params += list(self.gen_encoder.parameters())
        return params + list(self.gen_span.parameters()) + list(self.gen_cls.parameters())


def save_checkpoint(model: DSSDSTModel, path, extra: dict | None = None) -> None:
    tok = model.tokenizer
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "ontology": model.ontology.to_dict(),
        "ontology_fingerprint": model.ontology.fingerprint(),
        "vocab": tok.vocab if isinstance(tok, WordTokenizer) else None,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, map_location="cpu") -> DSSDSTModel:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = TrainConfig.from_dict(payload["config"])
    ontology = Ontology.from_mapping(payload["ontology"])
    if ontology.fingerprint() != payload["ontology_fingerprint"]:
        raise CheckpointError(f"{path}: ontology fingerprint does not match its stored ontology")
    if payload["vocab"] is not None:
        tokenizer = WordTokenizer(payload["vocab"])
    else:
        tokenizer = PretrainedTokenizerAdapter.from_pretrained(config.encoder)
    model = DSSDSTModel(ontology, tokenizer, config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    model.checkpoint_extra = payload.get("extra", {})
    return model
