"""Input assembly ([CLS] D_t ... B_{t-1}) and the pluggable contextual encoders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import math

import torch
from torch import nn

from .ontology import DialogueTurn, Ontology
from .tokenization import CLS, SLOT, VALUE_SEP, Token, turn_tokens

DIALOGUE_SEGMENT = 1
STATE_SEGMENT = 0


class InputTooLongError(ValueError):
    pass


@dataclass
class EncodedInput:
    """One assembled encoder input.

    Layout: ``[CLS] D_t D_{t-1} ... D_{t-k+1} B_{t-1}``.  Position 0 is
    ``[CLS]``, the dialogue region is ``[1, dialogue_end)`` and the state
    region ``[dialogue_end, N)``.
    """

    tokens: list[int]
    segments: list[int]
    slot_pos: list[int]
    dialogue_end: int
    pieces: list[Token]
    # untruncated position of every kept token
    origin: list[int]
    # history index (0 = current turn) of each dialogue token, -1 elsewhere
    turn_of: list[int]
    texts: list[dict] = field(default_factory=list)
    cls_pos: int = 0

    def __len__(self):
        return len(self.tokens)

    @property
    def N(self) -> int:
        return len(self.tokens)

    @property
    def dialogue_region(self) -> range:
        return range(1, self.dialogue_end)

    @property
    def state_region(self) -> range:
        return range(self.dialogue_end, self.N)

    @property
    def text_mask(self) -> list[bool]:
        """Positions holding dialogue text (eligible for word dropout)."""
        return [i in self.dialogue_region and p.source is not None for i, p in enumerate(self.pieces)]

    def map_position(self, original: int) -> int | None:
        if original == 0:
            return 0
        try:
            return self.origin.index(original)
        except ValueError:
            return None

    def map_span(self, span: tuple[int, int] | None) -> tuple[int, int] | None:
        """Translate an untruncated (start, end) span; ``None`` if it was cut."""
        if span is None:
            return None
        if span == (0, 0):
            return span
        a = self.map_position(span[0])
        b = self.map_position(span[1] - 1)
        if a is None or b is None or b >= self.dialogue_end:
            return None
        return (a, b + 1)

    def span_text(self, start: int, end: int) -> str:
        """Surface text of positions ``[start, end)``; subword pieces are joined via offsets."""
        if start <= 0 or end <= start:
            return ""
        chunks = []
        cur = None
        for i in range(start, min(end, self.dialogue_end)):
            p = self.pieces[i]
            if p.source is None:
                cur = None
                continue
            key = (self.turn_of[i], p.source)
            if cur is not None and cur[0] == key:
                cur[2] = p.end
            else:
                cur = [key, p.start, p.end]
                chunks.append(cur)
        return " ".join(self.texts[h][src][a:b] for (h, src), a, b in chunks)


def _slot_block(tokenizer, slot_name: str, value: str) -> list[Token]:
    return (
        [tokenizer.special(SLOT)]
        + tokenizer.tokenize(slot_name.replace("-", " "))
        + [tokenizer.special(VALUE_SEP)]
        + tokenizer.tokenize(value)
    )


def assemble_generator_input(
    history: Sequence[DialogueTurn],
    prev_state: dict,
    ontology: Ontology,
    tokenizer,
    max_len: int = 256,
) -> EncodedInput:
    """Assemble ``[CLS] D_t ... D_{t-k+1} B_{t-1}`` for ``history`` ordered oldest -> newest.

    Truncation removes tokens from the left of the oldest turn first and
    reaches the current turn last; slot blocks are never truncated.
    """
    if not history:
        raise ValueError("history must contain at least the current turn")
    missing = [s.name for s in ontology if s.name not in prev_state]
    if missing:
        raise ValueError(f"prev_state lacks slots: {', '.join(missing[:5])}")

    turns = list(reversed(history))
    dial = [turn_tokens(tokenizer, t.system_response, t.user_utterance) for t in turns]
    state = []
    slot_offsets = []
    for slot in ontology:
        slot_offsets.append(len(state))
        state.extend(_slot_block(tokenizer, slot.name, prev_state[slot.name]))

    budget = max_len - 1 - len(state)
    if budget < 1:
        raise InputTooLongError(
            f"{len(state) + 2} tokens needed for [CLS], one dialogue token and the state, max_len={max_len}"
        )
    # (history index, original position) for each dialogue token
    start = 1
    kept = []
    for h, toks in enumerate(dial):
        kept.append([(h, start + i, tok) for i, tok in enumerate(toks)])
        start += len(toks)
    excess = sum(len(x) for x in kept) - budget
    for h in reversed(range(len(kept))):
        if excess <= 0:
            break
        cut = min(excess, len(kept[h]))
        kept[h] = kept[h][cut:]
        excess -= cut

    pieces = [tokenizer.special(CLS)]
    origin = [0]
    turn_of = [-1]
    for group in kept:
        for h, pos, tok in group:
            pieces.append(tok)
            origin.append(pos)
            turn_of.append(h)
    dialogue_end = len(pieces)
    pieces.extend(state)
    origin.extend(range(start, start + len(state)))
    turn_of.extend([-1] * len(state))

    return EncodedInput(
        tokens=tokenizer.convert_tokens_to_ids(pieces),
        segments=[DIALOGUE_SEGMENT] * dialogue_end + [STATE_SEGMENT] * len(state),
        slot_pos=[dialogue_end + off for off in slot_offsets],
        dialogue_end=dialogue_end,
        pieces=pieces,
        origin=origin,
        turn_of=turn_of,
        texts=[{"system": t.system_response, "user": t.user_utterance} for t in turns],
    )


def assemble_selector_input(turn: DialogueTurn, prev_state: dict, ontology: Ontology, tokenizer, max_len: int = 256) -> EncodedInput:
    """``[CLS] R_t ; U_t [SEP] B_{t-1}`` -- the current turn only."""
    return assemble_generator_input([turn], prev_state, ontology, tokenizer, max_len)


# --------------------------------------------------------------------------
# encoders


class Encoder(nn.Module):
    """Contextual encoder: ``(tokens, segments, attention_mask) -> (B, N, d)``."""

    hidden_size: int
    vocab_size: int

    def forward(self, tokens, segments, attention_mask):  # pragma: no cover - interface
        raise NotImplementedError


class ToyTransformerEncoder(Encoder):
    """Small post-LN transformer trained from scratch.

    Token, position and segment embeddings are summed before the stack.  A
    final layer norm with gain ``d ** -0.25`` keeps dot products between
    output rows near unit scale at initialisation, so slot attention does
    not start saturated.

    ``position="sinusoidal"`` (the default) uses a fixed sine/cosine table
    instead of learned positions; on small corpora the learned table
    overfits to the absolute offsets seen in training.
    """

    def __init__(
        self,
        vocab_size: int,
        hidden_size: int = 64,
        num_layers: int = 2,
        num_heads: int = 4,
        max_len: int = 256,
        dropout: float = 0.1,
        ff_size: int | None = None,
        position: str = "sinusoidal",
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.config = dict(
            vocab_size=vocab_size,
            hidden_size=hidden_size,
            num_layers=num_layers,
            num_heads=num_heads,
            max_len=max_len,
            dropout=dropout,
            ff_size=ff_size,
            position=position,
        )
        if position not in ("learned", "sinusoidal"):
            raise ValueError(f"unknown position embedding {position!r}")
        self.tok_emb = nn.Embedding(vocab_size, hidden_size, padding_idx=0)
        if position == "sinusoidal":
            pos = torch.arange(max_len)[:, None]
            freq = torch.exp(torch.arange(0, hidden_size, 2) * (-math.log(10000.0) / hidden_size))
            table = torch.zeros(max_len, hidden_size)
            table[:, 0::2] = torch.sin(pos * freq)
            table[:, 1::2] = torch.cos(pos * freq)
            self.pos_emb = nn.Embedding.from_pretrained(table * hidden_size**-0.5, freeze=True)
        else:
            self.pos_emb = nn.Embedding(max_len, hidden_size)
            nn.init.normal_(self.pos_emb.weight, std=0.02)
        self.seg_emb = nn.Embedding(2, hidden_size)
        self.norm = nn.LayerNorm(hidden_size)
        self.drop = nn.Dropout(dropout)
        layer = nn.TransformerEncoderLayer(
            hidden_size,
            num_heads,
            dim_feedforward=ff_size or 4 * hidden_size,
            dropout=dropout,
            activation="gelu",
            batch_first=True,
        )
        self.layers = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
        self.out_norm = nn.LayerNorm(hidden_size)
        nn.init.constant_(self.out_norm.weight, hidden_size**-0.25)
        nn.init.normal_(self.tok_emb.weight, std=hidden_size**-0.5)
        nn.init.normal_(self.seg_emb.weight, std=0.02)

    def forward(self, tokens, segments, attention_mask):
        n = tokens.shape[1]
        pos = torch.arange(n, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None] + self.seg_emb(segments)
        x = self.drop(self.norm(x))
        return self.out_norm(self.layers(x, src_key_padding_mask=~attention_mask))


class PretrainedEncoder(Encoder):
    """Adapter for a Hugging Face encoder (e.g. ``albert-large-v2``, d = 1024)."""

    def __init__(self, model, vocab_size: int | None = None):
        super().__init__()
        if vocab_size is not None and model.get_input_embeddings().num_embeddings != vocab_size:
            model.resize_token_embeddings(vocab_size)
        self.model = model
        self.hidden_size = model.config.hidden_size
        self.vocab_size = model.get_input_embeddings().num_embeddings

    @classmethod
    def from_pretrained(cls, name: str, vocab_size: int | None = None) -> "PretrainedEncoder":
        from transformers import AutoModel

        return cls(AutoModel.from_pretrained(name), vocab_size)

    def forward(self, tokens, segments, attention_mask):
        out = self.model(input_ids=tokens, token_type_ids=segments, attention_mask=attention_mask.long())
        return out.last_hidden_state


class Batch(NamedTuple):
    tokens: torch.Tensor  # (B, N) long
    segments: torch.Tensor  # (B, N) long
    attention_mask: torch.Tensor  # (B, N) bool
    dialogue_mask: torch.Tensor  # (B, N) bool, dialogue region without [CLS]
    span_mask: torch.Tensor  # (B, N) bool, [CLS] + dialogue region
    text_mask: torch.Tensor  # (B, N) bool, dialogue text tokens
    slot_pos: torch.Tensor  # (B, J) long


def collate(inputs: Sequence[EncodedInput], pad_id: int = 0, device=None) -> Batch:
    n = max(len(x) for x in inputs)
    b = len(inputs)
    tokens = torch.full((b, n), pad_id, dtype=torch.long)
    segments = torch.zeros((b, n), dtype=torch.long)
    attn = torch.zeros((b, n), dtype=torch.bool)
    dial = torch.zeros((b, n), dtype=torch.bool)
    span = torch.zeros((b, n), dtype=torch.bool)
    text = torch.zeros((b, n), dtype=torch.bool)
    for i, x in enumerate(inputs):
        tokens[i, : len(x)] = torch.tensor(x.tokens)
        segments[i, : len(x)] = torch.tensor(x.segments)
        attn[i, : len(x)] = True
        dial[i, 1 : x.dialogue_end] = True
        span[i, : x.dialogue_end] = True
        text[i, : len(x)] = torch.tensor(x.text_mask)
    slot_pos = torch.tensor([x.slot_pos for x in inputs], dtype=torch.long)
    out = Batch(tokens, segments, attn, dial, span, text, slot_pos)
    if device is not None:
        out = Batch(*(t.to(device) for t in out))
    return out


@dataclass
class EncoderOutput:
    O: torch.Tensor  # (N, d)
    h_cls: torch.Tensor
    h_slot: torch.Tensor  # (J, d)
    H_dialogue: torch.Tensor
    H_state: torch.Tensor


def encode(encoder: Encoder, enc_input: EncodedInput) -> EncoderOutput:
    """Run ``encoder`` on one input and split the output into its regions."""
    bad = [t for t in enc_input.tokens if t < 0 or t >= encoder.vocab_size]
    if bad:
        raise ValueError(f"token ids outside the vocabulary: {sorted(set(bad))[:5]}")
    batch = collate([enc_input])
    param = next(encoder.parameters(), None)
    if param is not None:
        batch = Batch(*(t.to(param.device) for t in batch))
    O = encoder(batch.tokens, batch.segments, batch.attention_mask)[0]
    return EncoderOutput(
        O=O,
        h_cls=O[enc_input.cls_pos],
        h_slot=O[enc_input.slot_pos],
        H_dialogue=O[1 : enc_input.dialogue_end],
        H_state=O[enc_input.dialogue_end :],
    )
