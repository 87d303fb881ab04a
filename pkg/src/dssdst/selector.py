"""Slot-aware matching, the preliminary/ultimate selector heads and the update decision."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import torch
from torch import nn

from .ontology import NONE, Ontology, SlotSchema, normalize_value

# fill value for masked scores; exp() of it underflows to exactly 0 in float32/64
MASK_VALUE = -1e9

INHERIT = "inherit"
UPDATE = "update"
EXTRACTIVE = "extractive"
CLASSIFICATION = "classification"


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.float64)


def sam_logits(H, h_slot):
    """Matching scores ``H h_slot^T`` between every row of ``H`` and the slot vector."""
    return _as_tensor(H) @ _as_tensor(h_slot)


def sam(H, h_slot):
    """Slot-aware matching: softmax over the rows of ``H`` of their inner product with ``h_slot``."""
    H = _as_tensor(H)
    if H.ndim != 2 or H.shape[0] == 0:
        raise ValueError("sam needs a non-empty (M, d) matrix")
    h_slot = _as_tensor(h_slot, H.dtype)
    if h_slot.shape[-1] != H.shape[1]:
        raise ValueError(f"dimension mismatch: H is {tuple(H.shape)}, h_slot is {tuple(h_slot.shape)}")
    return torch.softmax(H @ h_slot, dim=0)


def masked_log_softmax(scores, mask):
    return scores.masked_fill(~mask, MASK_VALUE).log_softmax(-1)


def batched_sam(O, h_slot, mask):
    """``O`` (B, N, d), ``h_slot`` (B, J, d), ``mask`` (B, N) -> log attention (B, J, N)."""
    scores = torch.einsum("bjd,bnd->bjn", h_slot, O)
    return masked_log_softmax(scores, mask[:, None, :])


def gather_slots(O, slot_pos):
    """Rows of ``O`` (B, N, d) at ``slot_pos`` (B, J) -> (B, J, d)."""
    idx = slot_pos[..., None].expand(-1, -1, O.shape[-1])
    return O.gather(1, idx)


def attention_pool(O, h_slot, mask):
    """Attention-weighted rows summed over positions -> (B, J, d)."""
    alpha = batched_sam(O, h_slot, mask).exp()
    return alpha @ O


# --------------------------------------------------------------------------
# span partition


def span_log_partition(start, end):
    """log of ``exp(s[0]+e[0]) + sum_{p1<p2} exp(s[p1]+e[p2])`` along the last axis.

    The null pair (0, 0) sits inside the partition together with every
    proper span, so span and null probabilities share one distribution.
    """
    start = _as_tensor(start)
    end = _as_tensor(end, start.dtype)
    if start.shape[-1] < 2:
        raise ValueError("span scores need at least 2 positions")
    prefix = torch.logcumsumexp(start, dim=-1)[..., :-1]
    spans = torch.logsumexp(end[..., 1:] + prefix, dim=-1)
    return torch.logaddexp(start[..., 0] + end[..., 0], spans)


def is_null_span(ps: int, pe: int) -> bool:
    # end is exclusive; anything empty or anchored on [CLS] is the null answer
    return ps <= 0 or pe <= ps


def span_scores(start, end, ps: int, pe: int) -> tuple[float, float]:
    """(logit_span, logit_null) for the pair ``(ps, pe)``.

    Degenerate pairs (``pe <= ps`` or ``ps == 0``) score as the null span.
    """
    start = _as_tensor(start)
    end = _as_tensor(end, start.dtype)
    log_z = span_log_partition(start, end)
    log_null = start[0] + end[0] - log_z
    if is_null_span(ps, pe):
        log_span = log_null
    else:
        log_span = start[ps] + end[pe] - log_z
    return float(log_span.exp()), float(log_null.exp())


@dataclass
class SpanPrediction:
    start: int
    end: int
    text: str
    logit_span: float
    logit_null: float

    @property
    def is_null(self) -> bool:
        return is_null_span(self.start, self.end)


def extract_span(start, end, enc_input=None) -> SpanPrediction:
    """Independent argmaxes of the start/end distributions, then their partition scores.

    ``start``/``end`` are log-attention vectors over ``[CLS] + dialogue``.
    """
    start = _as_tensor(start)
    end = _as_tensor(end, start.dtype)
    ps = int(torch.argmax(start))
    pe = int(torch.argmax(end))
    logit_span, logit_null = span_scores(start, end, ps, pe)
    if is_null_span(ps, pe):
        text = ""
    else:
        text = enc_input.span_text(ps, pe) if enc_input is not None else ""
    return SpanPrediction(ps, pe, text, logit_span, logit_null)


def classify_value(alpha_c, slot: SlotSchema) -> tuple[str, float]:
    """Pick the most probable candidate; score is its probability minus that of ``none``."""
    if not slot.categorical:
        raise ValueError(f"slot {slot.name!r} is non-categorical and has no candidate distribution")
    alpha_c = _as_tensor(alpha_c)[: len(slot.candidate_values)]
    best = int(torch.argmax(alpha_c))
    return slot.candidate_values[best], float(alpha_c[best] - alpha_c[0])


# --------------------------------------------------------------------------
# heads


class PreliminaryHead(nn.Module):
    """Attention-pooled dialogue -> (p_sel, p_fail) per slot."""

    def __init__(self, hidden_size: int, dropout: float = 0.1):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.fc = nn.Linear(hidden_size, 2)

    def forward(self, O, slot_pos, dialogue_mask):
        h_slot = gather_slots(O, slot_pos)
        pooled = attention_pool(O, h_slot, dialogue_mask)
        return torch.softmax(self.fc(self.drop(pooled)), dim=-1)


class SpanHead(nn.Module):
    """Separate start/end projections matched against the slot vector."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.start = nn.Linear(hidden_size, hidden_size)
        self.end = nn.Linear(hidden_size, hidden_size)

    def forward(self, O, slot_pos, span_mask):
        h_slot = gather_slots(O, slot_pos)
        return batched_sam(self.start(O), h_slot, span_mask), batched_sam(self.end(O), h_slot, span_mask)


class ClassificationHead(nn.Module):
    """Per-slot affine classifier over the slot's candidate values.

    Weights for all slots live in one padded tensor; classes beyond a slot's
    ``|V_j|`` are masked out of the softmax.
    """

    def __init__(self, ontology: Ontology, hidden_size: int, dropout: float = 0.1):
        super().__init__()
        sizes = [len(s.candidate_values) if s.categorical else 1 for s in ontology]
        n_max = max(sizes)
        self.drop = nn.Dropout(dropout)
        self.weight = nn.Parameter(torch.empty(len(sizes), n_max, hidden_size))
        self.bias = nn.Parameter(torch.zeros(len(sizes), n_max))
        nn.init.normal_(self.weight, std=hidden_size**-0.5)
        mask = torch.zeros(len(sizes), n_max, dtype=torch.bool)
        for j, n in enumerate(sizes):
            mask[j, :n] = True
        self.register_buffer("class_mask", mask, persistent=False)

    def forward(self, O, slot_pos, dialogue_mask):
        h_slot = gather_slots(O, slot_pos)
        pooled = self.drop(attention_pool(O, h_slot, dialogue_mask))
        logits = torch.einsum("bjd,jvd->bjv", pooled, self.weight) + self.bias
        return torch.softmax(logits.masked_fill(~self.class_mask, MASK_VALUE), dim=-1)


# --------------------------------------------------------------------------
# decisions


@dataclass
class SlotDecision:
    slot: str
    pre_score: float
    ult_score: float | None = None
    total_score: float | None = None
    action: str = INHERIT
    temp_value: str | None = None
    branch: str | None = None
    span_text: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def preliminary_select(probs, use_preliminary: bool = True) -> tuple[list[float], list[int]]:
    """Pre scores ``p_sel - p_fail`` for one turn and the indices that clear zero."""
    probs = _as_tensor(probs)
    scores = [float(x) for x in probs[:, 0] - probs[:, 1]]
    if not use_preliminary:
        return scores, list(range(len(scores)))
    return scores, [j for j, s in enumerate(scores) if s > 0]


def hybrid_value(slot: SlotSchema, start, end, alpha_c, enc_input=None) -> tuple[str, float, str, SpanPrediction]:
    """Extract first; categorical slots whose extraction is not a candidate fall back to classification.

    Returns ``(value, score, branch, span)``.
    """
    span = extract_span(start, end, enc_input)
    extracted = normalize_value(span.text) if not span.is_null else NONE
    if not slot.categorical or (not span.is_null and extracted in slot.candidate_values):
        return extracted, span.logit_span - span.logit_null, EXTRACTIVE, span
    value, score = classify_value(alpha_c, slot)
    return value, score, CLASSIFICATION, span


def ultimate_select(start, end, alpha_c, U1: Iterable[int], ontology: Ontology, enc_input=None) -> dict[int, tuple[str, float, str, SpanPrediction]]:
    """Temporary value and reliability score for every slot index in ``U1``.

    ``start``/``end``: (J, N) log attention, ``alpha_c``: (J, V) candidate distributions.
    """
    return {j: hybrid_value(ontology[j], start[j], end[j], alpha_c[j], enc_input) for j in U1}


def decide(
    pre_scores: Sequence[float],
    ult_scores: Mapping[int, float],
    beta: float = 0.55,
    delta: float = 0.0,
    slot_names: Sequence[str] | None = None,
    use_ultimate: bool = True,
) -> tuple[list[int], list[SlotDecision]]:
    """Fuse the two selector scores; slots outside ``ult_scores`` (i.e. outside U1) inherit.

    With ``use_ultimate=False`` every slot of U1 is updated.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    names = slot_names or [str(j) for j in range(len(pre_scores))]
    U2, decisions = [], []
    for j, pre in enumerate(pre_scores):
        d = SlotDecision(names[j], float(pre))
        if j in ult_scores:
            ult = float(ult_scores[j])
            d.ult_score = ult
            d.total_score = beta * pre + (1.0 - beta) * ult
            if not use_ultimate or d.total_score > delta:
                d.action = UPDATE
                U2.append(j)
        decisions.append(d)
    return U2, decisions

