"""Two-phase training: the preliminary selector first, then the ultimate selector and generator."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .config import TrainConfig
from .encoding import EncodedInput, assemble_generator_input, collate
from .generator import track_dialogues
from .losses import loss_classification, loss_extractive, loss_span_boundary, loss_generator, loss_preliminary
from .metrics import joint_accuracy, selector_f1
from .model import DSSDSTModel, save_checkpoint
from .ontology import Dialogue, ExampleReport, TurnExample, derive_turn_examples
from .tokenization import UNK

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


def word_dropout(tokens, eligible, p: float, unk_id: int, generator: torch.Generator | None = None):
    """Replace each ``eligible`` token by ``unk_id`` with probability ``p``."""
    if p <= 0.0:
        return tokens
    draw = torch.rand(tokens.shape, generator=generator) < p
    return torch.where(draw.to(tokens.device) & eligible, torch.full_like(tokens, unk_id), tokens)


@dataclass
class Instance:
    """Encoder inputs and padded per-slot targets for one :class:`TurnExample`."""

    example: TurnExample
    sel: EncodedInput
    gen: EncodedInput
    labels: list[int]
    sel_span: list[tuple[int, int]]
    sel_span_ok: list[bool]
    gen_span: list[tuple[int, int]]
    gen_span_ok: list[bool]
    cand: list[int]


def prepare_instances(examples: Sequence[TurnExample], model: DSSDSTModel) -> list[Instance]:
    cfg = model.config
    out = []
    for ex in examples:
        sel = assemble_generator_input(ex.history[-cfg.selector_history :], ex.prev_state, model.ontology, model.tokenizer, cfg.max_len)
        gen = assemble_generator_input(ex.history[-cfg.k :], ex.prev_state, model.ontology, model.tokenizer, cfg.max_len)
        sel_span, sel_ok, gen_span, gen_ok = [], [], [], []
        for j in range(model.ontology.J):
            a = sel.map_span(ex.span_target[j]) if not ex.unreachable[j] else None
            b = gen.map_span(ex.gen_span_target[j]) if not ex.gen_unreachable[j] else None
            sel_span.append(a or (0, 0))
            sel_ok.append(a is not None)
            gen_span.append(b or (0, 0))
            gen_ok.append(b is not None)
        cand = [-1 if c is None else c for c in ex.candidate_target]
        out.append(Instance(ex, sel, gen, list(ex.update_label), sel_span, sel_ok, gen_span, gen_ok, cand))
    return out


@dataclass
class TensorBatch:
    sel: object
    gen: object
    labels: torch.Tensor
    sel_span: torch.Tensor
    sel_span_ok: torch.Tensor
    gen_span: torch.Tensor
    gen_span_ok: torch.Tensor
    cand: torch.Tensor
    instances: list


def make_batch(instances: Sequence[Instance], pad_id: int, device=None) -> TensorBatch:
    def t(rows, dtype):
        return torch.tensor(rows, dtype=dtype, device=device)

    return TensorBatch(
        sel=collate([x.sel for x in instances], pad_id, device),
        gen=collate([x.gen for x in instances], pad_id, device),
        labels=t([x.labels for x in instances], torch.long),
        sel_span=t([x.sel_span for x in instances], torch.long),
        sel_span_ok=t([x.sel_span_ok for x in instances], torch.bool),
        gen_span=t([x.gen_span for x in instances], torch.long),
        gen_span_ok=t([x.gen_span_ok for x in instances], torch.bool),
        cand=t([x.cand for x in instances], torch.long),
        instances=list(instances),
    )


def _with_tokens(batch, tokens):
    return batch._replace(tokens=tokens)


def _schedule(optimizer, total_steps: int, warmup_proportion: float):
    warmup = max(1, int(round(warmup_proportion * total_steps)))

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def clip_gradients(parameters, max_norm: float) -> float:
    """Global-norm clipping; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


@dataclass
class TrainResult:
    model: DSSDSTModel
    log: list[dict] = field(default_factory=list)
    best_preliminary: float | None = None
    best_joint: float | None = None


class Trainer:
    """Runs both training phases on a :class:`DSSDSTModel`.

    ``log_fn`` receives one dict per optimisation step and per epoch; with
    ``out_dir`` set, records also go to ``train_log.jsonl`` and checkpoints
    to ``last.pt``/``best.pt``.
    """

    def __init__(self, model: DSSDSTModel, config: TrainConfig | None = None, out_dir=None, log_fn: Callable[[dict], None] | None = None):
        self.model = model
        self.config = config or model.config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_fn = log_fn
        self.records: list[dict] = []
        self.device = next(model.parameters()).device
        self.gen = torch.Generator().manual_seed(self.config.seed)
        self.unk_id = model.tokenizer.special_id(UNK)
        self._log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_file = open(self.out_dir / "train_log.jsonl", "w", encoding="utf-8")

    # -- plumbing --------------------------------------------------------

    def log(self, record: dict) -> None:
        self.records.append(record)
        if self.log_fn is not None:
            self.log_fn(record)
        if self._log_file is not None:
            self._log_file.write(json.dumps(record, sort_keys=True) + "\n")
            self._log_file.flush()

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def _batches(self, instances, shuffle=True):
        order = list(range(len(instances)))
        if shuffle:
            order = torch.randperm(len(instances), generator=self.gen).tolist()
        bs = self.config.batch_size
        for lo in range(0, len(order), bs):
            yield make_batch([instances[i] for i in order[lo : lo + bs]], self.model.pad_id, self.device)

    def _dropped(self, batch):
        p = self.config.word_dropout
        return _with_tokens(batch, word_dropout(batch.tokens, batch.text_mask, p, self.unk_id, self.gen))

    def _check(self, loss, batch: TensorBatch, phase: str, step: int):
        if torch.isfinite(loss):
            return
        offending = [{"dialogue_id": x.example.dialogue_id, "turn_index": x.example.turn_index} for x in batch.instances]
        msg = f"non-finite loss in {phase} at step {step}"
        if self.out_dir is not None:
            path = self.out_dir / f"nonfinite_{phase}_{step}.json"
            path.write_text(json.dumps({"loss": loss.item(), "batch": offending}, indent=2), encoding="utf-8")
            msg += f"; batch dumped to {path}"
        else:
            msg += f"; batch: {offending}"
        raise NonFiniteLossError(msg)

    def _optimizer(self, params, lr, epochs, n_instances):
        opt = torch.optim.AdamW(params, lr=lr, weight_decay=self.config.weight_decay)
        steps = max(1, epochs * math.ceil(n_instances / self.config.batch_size))
        return opt, _schedule(opt, steps, self.config.warmup_proportion)

    def _save(self, name: str, extra=None):
        if self.out_dir is not None:
            save_checkpoint(self.model, self.out_dir / name, extra)

    # -- phase 1 ---------------------------------------------------------

    def preliminary_scores(self, instances) -> list[list[float]]:
        model = self.model
        model.eval()
        out = []
        with torch.no_grad():
            for batch in self._batches(instances, shuffle=False):
                probs = model.preliminary(batch.sel)
                out.extend((probs[..., 0] - probs[..., 1]).tolist())
        return out

    def evaluate_preliminary(self, instances) -> float:
        """Update-class F1 of the preliminary decisions against gold labels."""
        scores = self.preliminary_scores(instances)
        pred = [[int(s > 0) for s in row] for row in scores]
        gold = [x.labels for x in instances]
        return selector_f1(pred, gold)["update"][2]

    def train_preliminary(self, instances, val_instances=None) -> float | None:
        cfg, model = self.config, self.model
        if not cfg.use_preliminary or cfg.epochs_preliminary <= 0:
            return None
        params = model.preliminary_parameters()
        opt, sched = self._optimizer(params, cfg.lr_preliminary, cfg.epochs_preliminary, len(instances))
        best, best_state, step = -1.0, None, 0
        for epoch in range(cfg.epochs_preliminary):
            model.train()
            for batch in self._batches(instances):
                probs = model.preliminary(self._dropped(batch.sel))
                loss = loss_preliminary(probs[..., 0], batch.labels)
                self._check(loss, batch, "preliminary", step)
                opt.zero_grad()
                loss.backward()
                norm = clip_gradients(params, cfg.grad_clip)
                opt.step()
                sched.step()
                self.log({"phase": "preliminary", "step": step, "loss": loss.item(), "grad_norm": norm})
                step += 1
            metric = self.evaluate_preliminary(val_instances) if val_instances else None
            self.log({"phase": "preliminary", "epoch": epoch, "val_update_f1": metric})
            if metric is None or metric > best:
                best = metric if metric is not None else best
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items() if k.startswith("pre_")}
        if best_state is not None:
            model.load_state_dict(best_state, strict=False)
        return best if val_instances else None

    # -- phase 2 ---------------------------------------------------------

    def _ult_gen_loss(self, batch: TensorBatch):
        cfg, model = self.config, self.model
        labels = batch.labels.bool()
        categorical = model.ult_cls.class_mask[:, 1]  # (J,) true for categorical slots
        if cfg.use_preliminary:
            if cfg.unfreeze_preliminary:
                probs = model.preliminary(self._dropped(batch.sel))
                loss_pre = loss_preliminary(probs[..., 0], batch.labels)
                probs = probs.detach()
            else:
                with torch.no_grad():
                    probs = model.preliminary(batch.sel)
                loss_pre = None
            U1 = probs[..., 0] > probs[..., 1]
        else:
            U1 = torch.ones_like(labels)
            loss_pre = None

        total = 0.0
        parts = {}
        if cfg.use_ultimate:
            train_slots = U1 | labels
            null = torch.zeros_like(batch.sel_span)
            ext_target = torch.where(labels[..., None], batch.sel_span, null)
            ext_mask = train_slots & (batch.sel_span_ok | ~labels)
            cls_target = torch.where(labels, batch.cand, torch.zeros_like(batch.cand))
            cls_mask = train_slots & categorical[None] & ((batch.cand >= 0) | ~labels)
            start, end, alpha_c = model.ultimate(self._dropped(batch.sel))
            parts["ult_ext"] = loss_extractive(start, end, ext_target, ext_mask)
            if cfg.span_marginal_weight > 0:
                parts["ult_ext"] = parts["ult_ext"] + cfg.span_marginal_weight * loss_span_boundary(start, end, ext_target, ext_mask)
            parts["ult_cls"] = loss_classification(alpha_c, cls_target, cls_mask)
            total = total + parts["ult_ext"] + parts["ult_cls"]
        start, end, alpha_c = model.generator(self._dropped(batch.gen))
        parts["gen"] = loss_generator(
            start,
            end,
            alpha_c,
            batch.gen_span,
            labels & batch.gen_span_ok,
            batch.cand,
            labels & categorical[None] & (batch.cand >= 0),
        )
        if cfg.span_marginal_weight > 0:
            parts["gen"] = parts["gen"] + cfg.span_marginal_weight * loss_span_boundary(
                start, end, batch.gen_span, labels & batch.gen_span_ok
            )
        total = total + parts["gen"]
        if loss_pre is not None:
            parts["pre"] = loss_pre
            total = total + loss_pre
        return total, parts

    def train_ult_gen(self, instances, val_dialogues=None, train_dialogues=None) -> float | None:
        cfg, model = self.config, self.model
        params = model.ult_gen_parameters()
        if cfg.unfreeze_preliminary:
            params = params + model.preliminary_parameters()
        opt, sched = self._optimizer(params, cfg.lr_ultimate_generator, cfg.epochs_ult_gen, len(instances))
        best, step = -1.0, 0
        best_state = None
        sampler = random.Random(cfg.seed)
        for epoch in range(cfg.epochs_ult_gen):
            if cfg.scheduled_sampling > 0 and train_dialogues is not None and epoch > 0:
                instances = self._resample(train_dialogues, instances, sampler)
            model.train()
            if not cfg.unfreeze_preliminary:
                model.pre_encoder.eval()
                model.pre_head.eval()
            for batch in self._batches(instances):
                loss, parts = self._ult_gen_loss(batch)
                self._check(loss, batch, "ult_gen", step)
                opt.zero_grad()
                loss.backward()
                norm = clip_gradients(params, cfg.grad_clip)
                opt.step()
                sched.step()
                rec = {"phase": "ult_gen", "step": step, "loss": loss.item(), "grad_norm": norm}
                rec.update({k: v.item() for k, v in parts.items()})
                self.log(rec)
                step += 1
            metric = None
            if val_dialogues:
                results = track_dialogues(val_dialogues, model)
                metric = joint_accuracy(
                    [r.state for rs in results for r in rs],
                    [d.full_state(t, model.ontology) for d in val_dialogues for t in range(len(d))],
                )
            self.log({"phase": "ult_gen", "epoch": epoch, "val_joint_acc": metric})
            self._save("last.pt", {"phase": "ult_gen", "epoch": epoch, "val_joint_acc": metric})
            if metric is None or metric > best:
                best = metric if metric is not None else best
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                self._save("best.pt", {"phase": "ult_gen", "epoch": epoch, "val_joint_acc": metric})
        if best_state is not None:
            model.load_state_dict(best_state)
        return best if val_dialogues else None

    def _resample(self, dialogues, instances, sampler):
        """Swap the gold previous state for the model's own prediction with probability ``scheduled_sampling``."""
        model = self.model
        results = track_dialogues(dialogues, model)
        examples = []
        for dial, res in zip(dialogues, results):
            gold_prev = [model.ontology.empty_state()] + [dial.full_state(t, model.ontology) for t in range(len(dial) - 1)]
            pred_prev = [model.ontology.empty_state()] + [r.state for r in res[:-1]]
            prev = [p if sampler.random() < self.config.scheduled_sampling else g for p, g in zip(pred_prev, gold_prev)]
            examples.extend(derive_turn_examples(dial, model.ontology, self.config.k, model.tokenizer, prev_states=prev))
        return prepare_instances(examples, model)

    def fit(self, train_dialogues: Sequence[Dialogue], val_dialogues: Sequence[Dialogue] | None = None) -> TrainResult:
        model, cfg = self.model, self.config
        report = ExampleReport()
        examples = [ex for d in train_dialogues for ex in derive_turn_examples(d, model.ontology, cfg.k, model.tokenizer, report)]
        self.log({"phase": "data", **report.__dict__})
        instances = prepare_instances(examples, model)
        val_instances = None
        if val_dialogues:
            val_examples = [ex for d in val_dialogues for ex in derive_turn_examples(d, model.ontology, cfg.k, model.tokenizer)]
            val_instances = prepare_instances(val_examples, model)
        try:
            best_pre = self.train_preliminary(instances, val_instances)
            best_joint = self.train_ult_gen(instances, val_dialogues, train_dialogues)
        finally:
            self.close()
        model.eval()
        return TrainResult(model, self.records, best_pre, best_joint)


def train(
    train_dialogues: Sequence[Dialogue],
    ontology,
    config: TrainConfig,
    val_dialogues: Sequence[Dialogue] | None = None,
    out_dir=None,
    tokenizer=None,
    log_fn=None,
) -> TrainResult:
    """Build a fresh model for ``ontology`` and train it; see :class:`Trainer`."""
    from .model import build_tokenizer

    set_seed(config.seed)
    if tokenizer is None:
        tokenizer = build_tokenizer(config, corpus_texts(train_dialogues, ontology))
    model = DSSDSTModel(ontology, tokenizer, config)
    return Trainer(model, config, out_dir, log_fn).fit(train_dialogues, val_dialogues)


def corpus_texts(dialogues: Sequence[Dialogue], ontology) -> list[str]:
    texts = [t.system_response + " " + t.user_utterance for d in dialogues for t in d.turns]
    texts += [s.name.replace("-", " ") for s in ontology]
    texts += [v for s in ontology for v in s.candidate_values]
    return texts


def set_seed(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)
