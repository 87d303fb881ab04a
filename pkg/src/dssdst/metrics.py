"""Joint, slot, split and selector metrics plus the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .ontology import NONE, Dialogue, Ontology, normalize_value, slot_domain

INHERIT = "inherit"
UPDATE = "update"


class MetricsError(ValueError):
    pass


def _norm(state: Mapping[str, str], slots: Sequence[str]) -> list[str]:
    return [normalize_value(state.get(s, NONE)) for s in slots]


def _aligned(preds, golds):
    if len(preds) != len(golds):
        raise MetricsError(f"misaligned inputs: {len(preds)} predicted turns vs {len(golds)} gold turns")
    if not golds:
        raise MetricsError("no turns to evaluate")


def _slots(preds, golds, slots=None) -> list[str]:
    if slots is not None:
        return list(slots)
    names = set()
    for state in list(preds) + list(golds):
        names.update(state)
    return sorted(names)


def _matches(preds, golds, slots):
    return [[p == g for p, g in zip(_norm(ps, slots), _norm(gs, slots))] for ps, gs in zip(preds, golds)]


def joint_accuracy(preds: Sequence[Mapping], golds: Sequence[Mapping], slots: Sequence[str] | None = None) -> float:
    """Fraction of turns whose every slot matches after normalisation.

    Slots absent from a state count as ``none``.  ``slots`` defaults to the
    union of keys seen on either side.
    """
    _aligned(preds, golds)
    rows = _matches(preds, golds, _slots(preds, golds, slots))
    return sum(all(r) for r in rows) / len(rows)


def slot_accuracy(preds: Sequence[Mapping], golds: Sequence[Mapping], slots: Sequence[str] | None = None) -> float:
    _aligned(preds, golds)
    slots = _slots(preds, golds, slots)
    if not slots:
        return 1.0
    rows = _matches(preds, golds, slots)
    return sum(sum(r) for r in rows) / (len(rows) * len(slots))


def split_metrics(preds: Sequence[Mapping], golds: Sequence[Mapping], schema: Ontology | Mapping[str, bool]) -> dict:
    """Categorical/non-categorical joint accuracy, per-domain joint accuracy and per-slot accuracy.

    ``schema`` is an :class:`Ontology` or a ``slot -> is_categorical`` map.
    A split with no slots scores 1.0.
    """
    _aligned(preds, golds)
    flags = {s.name: s.categorical for s in schema} if isinstance(schema, Ontology) else dict(schema)
    slots = sorted(flags)
    for state in preds:
        unknown = sorted(set(state) - set(flags))
        if unknown:
            raise MetricsError(f"unknown slot(s) in predictions: {', '.join(unknown)}")
    rows = _matches(preds, golds, slots)
    col = {s: i for i, s in enumerate(slots)}

    def joint_over(subset):
        idx = [col[s] for s in subset]
        return sum(all(r[i] for i in idx) for r in rows) / len(rows)

    domains = sorted({slot_domain(s) for s in slots})
    return {
        "cat_joint": joint_over([s for s in slots if flags[s]]),
        "noncat_joint": joint_over([s for s in slots if not flags[s]]),
        "per_domain": {d: joint_over([s for s in slots if slot_domain(s) == d]) for d in domains},
        "per_slot": {s: sum(r[col[s]] for r in rows) / len(rows) for s in slots},
    }


def _flat(xs):
    out = []
    for x in xs:
        if isinstance(x, (list, tuple)):
            out.extend(_flat(x))
        else:
            out.append(x)
    return out


def _as_update(x) -> bool:
    if isinstance(x, str):
        if x not in (INHERIT, UPDATE):
            raise MetricsError(f"unknown action {x!r}")
        return x == UPDATE
    return bool(x)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def selector_f1(decisions, gold_update_labels) -> dict[str, tuple[float, float, float]]:
    """Per-class precision/recall/F1 for inherit vs update.

    Both arguments are (possibly nested) sequences of per-(turn, slot)
    actions: 0/1 with 1 = update, or the strings ``"inherit"``/``"update"``.
    """
    pred = [_as_update(x) for x in _flat(decisions)]
    gold = [_as_update(x) for x in _flat(gold_update_labels)]
    if len(pred) != len(gold):
        raise MetricsError(f"misaligned decisions: {len(pred)} vs {len(gold)}")
    tp = sum(p and g for p, g in zip(pred, gold))
    fp = sum(p and not g for p, g in zip(pred, gold))
    fn = sum(g and not p for p, g in zip(pred, gold))
    tn = len(pred) - tp - fp - fn
    # the inherit class swaps the roles of fp and fn
    return {UPDATE: _prf(tp, fp, fn), INHERIT: _prf(tn, fn, fp)}


# --------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    joint_acc: float
    slot_acc: float
    cat_joint: float
    noncat_joint: float
    per_domain: dict[str, float]
    per_slot: dict[str, float]
    selector_f1: dict[str, tuple[float, float, float]]
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["selector_f1"] = {k: list(v) for k, v in self.selector_f1.items()}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        return format_report(self)


def compute_report(
    preds: Sequence[Mapping],
    golds: Sequence[Mapping],
    ontology: Ontology,
    decisions=None,
    gold_updates=None,
    n_dialogues: int = 0,
) -> MetricsReport:
    slots = ontology.names
    split = split_metrics(preds, golds, ontology)
    f1 = selector_f1(decisions, gold_updates) if decisions is not None else {}
    return MetricsReport(
        joint_acc=joint_accuracy(preds, golds, slots),
        slot_acc=slot_accuracy(preds, golds, slots),
        cat_joint=split["cat_joint"],
        noncat_joint=split["noncat_joint"],
        per_domain=split["per_domain"],
        per_slot=split["per_slot"],
        selector_f1=f1,
        counts={"turns": len(golds), "dialogues": n_dialogues},
    )


def gold_update_labels(dialogue: Dialogue, ontology: Ontology) -> list[list[int]]:
    """Per turn, 1 for each slot whose gold value differs from the previous gold state."""
    out = []
    prev = ontology.empty_state()
    for t in range(len(dialogue)):
        cur = dialogue.full_state(t, ontology)
        out.append([int(normalize_value(cur[n]) != normalize_value(prev[n])) for n in ontology.names])
        prev = cur
    return out


def evaluate_predictions(payload: Mapping, dialogues: Sequence[Dialogue], ontology: Ontology) -> MetricsReport:
    """Score a prediction dump against gold dialogues; every gold dialogue must be present."""
    by_id = {d["dialogue_id"]: d for d in payload.get("dialogues", [])}
    preds, golds, decisions, updates = [], [], [], []
    for dial in dialogues:
        if dial.dialogue_id not in by_id:
            raise MetricsError(f"dialogue {dial.dialogue_id} missing from predictions")
        turns = by_id[dial.dialogue_id]["turns"]
        if len(turns) != len(dial):
            raise MetricsError(f"dialogue {dial.dialogue_id}: {len(turns)} predicted turns vs {len(dial)} gold turns")
        updates.extend(gold_update_labels(dial, ontology))
        for t, rec in enumerate(turns):
            preds.append(rec["state"])
            golds.append(dial.full_state(t, ontology))
            changed = set(rec.get("updated", []))
            decisions.append([int(n in changed) for n in ontology.names])
    return compute_report(preds, golds, ontology, decisions, updates, n_dialogues=len(dialogues))


def write_report(report: MetricsReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    js, txt = out_dir / "metrics.json", out_dir / "metrics.txt"
    js.write_text(report.to_json(), encoding="utf-8")
    txt.write_text(report.to_text(), encoding="utf-8")
    return js, txt


# --------------------------------------------------------------------------
# human-readable tables


def format_percent(rate: float) -> str:
    """Percentages as in the per-slot table: ``100`` when exact, otherwise two decimals."""
    pct = 100.0 * rate
    return "100" if pct == 100.0 else f"{pct:.2f}"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]], align: str) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]

    def line(cells):
        parts = []
        for cell, w, a in zip(cells, widths, align):
            parts.append(str(cell).ljust(w) if a == "l" else str(cell).rjust(w))
        return " | ".join(parts).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *(line(r) for r in rows)])


def format_report(report: MetricsReport) -> str:
    blocks = [
        "Overall (%)",
        format_table(
            ["Joint", "Slot", "Cat-joint", "Noncat-joint"],
            [[format_percent(x) for x in (report.joint_acc, report.slot_acc, report.cat_joint, report.noncat_joint)]],
            "rrrr",
        ),
    ]
    if report.selector_f1:
        blocks += ["", "Operation F1 (%)"]
        blocks.append(format_table(["Operation", "F1"], [[op, format_percent(report.selector_f1[op][2])] for op in (INHERIT, UPDATE)], "lr"))
    blocks += ["", "Domain-specific joint accuracy"]
    blocks.append(format_table(["Domain", "Joint Accuracy (%)"], [[d.capitalize(), format_percent(v)] for d, v in sorted(report.per_domain.items())], "lr"))
    blocks += ["", "Accuracy (%) per slot"]
    blocks.append(format_table(["Domain-Slot", "Accuracy"], [[s, format_percent(v)] for s, v in sorted(report.per_slot.items())], "lr"))
    c = report.counts
    blocks += ["", f"turns: {c.get('turns', 0)}  dialogues: {c.get('dialogues', 0)}"]
    return "\n".join(blocks) + "\n"
