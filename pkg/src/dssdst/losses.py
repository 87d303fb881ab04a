"""Cross-entropy objectives for the selector and generator heads.

Each per-slot loss is averaged over the slots that contribute in a turn,
then over the turns of the batch that have at least one such slot.
"""

from __future__ import annotations

import torch

from .selector import span_log_partition

EPS = 1e-12


def _turn_mean(per_slot, mask):
    """Average ``per_slot`` (B, J) over masked slots per turn, then over non-empty turns."""
    counts = mask.to(per_slot.dtype).sum(-1)
    per_turn = torch.where(mask, per_slot, torch.zeros_like(per_slot)).sum(-1) / counts.clamp(min=1)
    used = counts > 0
    if not bool(used.any()):
        return torch.where(mask, per_slot, torch.zeros_like(per_slot)).sum()
    return per_turn[used].mean()


def loss_preliminary(probs, labels):
    """Binary cross-entropy between ``probs`` = p(select) (B, J) and 0/1 ``labels``; mean over J then batch."""
    labels = labels.to(probs.dtype)
    log_p = torch.log(probs.clamp(min=EPS))
    log_q = torch.log((1.0 - probs).clamp(min=EPS))
    per_slot = -(labels * log_p + (1.0 - labels) * log_q)
    return per_slot.mean(-1).mean()


def span_log_prob(start, end, gold):
    """log p(gold span) under the (0,0)-inclusive span partition.

    ``start``/``end``: (..., N) scores, ``gold``: (..., 2) long (exclusive end; (0,0) = null).
    """
    log_z = span_log_partition(start, end)
    s = start.gather(-1, gold[..., :1]).squeeze(-1)
    e = end.gather(-1, gold[..., 1:]).squeeze(-1)
    return s + e - log_z


def loss_extractive(start, end, gold, mask):
    """``-mean log p(gold span)`` over the slots flagged in ``mask`` (B, J)."""
    gold = gold.clamp(min=0)
    return _turn_mean(-span_log_prob(start, end, gold), mask)


def loss_span_boundary(start, end, gold, mask):
    """``-mean [log start[p1] + log end[p2]]`` on log-normalised ``start``/``end``.

    Trains the start and end marginals that independent-argmax decoding
    reads; the partition loss alone leaves mass on inverted pairs free.
    """
    gold = gold.clamp(min=0)
    s = start.gather(-1, gold[..., :1]).squeeze(-1)
    e = end.gather(-1, gold[..., 1:]).squeeze(-1)
    return _turn_mean(-(s + e), mask)


def loss_classification(alpha_c, gold, mask):
    """Cross-entropy of candidate distributions ``alpha_c`` (B, J, V) against one-hot ``gold`` (B, J)."""
    gold = gold.clamp(min=0)
    picked = alpha_c.gather(-1, gold[..., None]).squeeze(-1)
    return _turn_mean(-torch.log(picked.clamp(min=EPS)), mask)


def loss_generator(start, end, alpha_c, gold_span, span_mask, gold_class, class_mask):
    """Extractive plus classification loss over the gold-selected slots."""
    return loss_extractive(start, end, gold_span, span_mask) + loss_classification(alpha_c, gold_class, class_mask)
