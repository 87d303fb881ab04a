"""Value generation for the selected slots and the open-loop tracking loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .encoding import assemble_generator_input, collate
from .model import DSSDSTModel
from .ontology import NONE, Dialogue, DialogueTurn
from .selector import (
    EXTRACTIVE,
    UPDATE,
    SlotDecision,
    decide,
    hybrid_value,
    preliminary_select,
    ultimate_select,
)

logger = logging.getLogger(__name__)

PREDICTIONS_FORMAT = "dssdst-predictions"
PREDICTIONS_VERSION = 1

FORCING_MODES = (None, "gold", "selector")


@dataclass
class TurnResult:
    turn_index: int
    state: dict[str, str]
    decisions: list[SlotDecision] = field(default_factory=list)
    # slot -> (value, branch) for every slot in U2
    generated: dict[str, tuple[str, str]] = field(default_factory=dict)

    @property
    def updated(self) -> list[str]:
        return list(self.generated)


def _window(turns: Sequence[DialogueTurn], t: int, size: int) -> list[DialogueTurn]:
    return list(turns[max(0, t - size + 1) : t + 1])


def _generate(model: DSSDSTModel, histories, prev_states, U2s, k: int):
    """Run the generator on every item whose U2 is non-empty; returns per-item ``{j: (value, branch)}``."""
    ontology = model.ontology
    out = [{} for _ in histories]
    todo = [i for i, U2 in enumerate(U2s) if U2]
    if not todo:
        return out
    inputs = [
        assemble_generator_input(_window(histories[i], len(histories[i]) - 1, k), prev_states[i], ontology, model.tokenizer, model.config.max_len)
        for i in todo
    ]
    batch = collate(inputs, model.pad_id, device=next(model.parameters()).device)
    start, end, alpha_c = model.generator(batch)
    for row, i in enumerate(todo):
        for j in U2s[i]:
            slot = ontology[j]
            value, _, branch, span = hybrid_value(slot, start[row, j], end[row, j], alpha_c[row, j], inputs[row])
            if branch == EXTRACTIVE and span.is_null and not slot.categorical:
                logger.debug("%s: null extraction, value set to %s", slot.name, NONE)
            out[i][j] = (value, branch)
    return out


@torch.no_grad()
def generate_values(model: DSSDSTModel, history: Sequence[DialogueTurn], prev_state: dict, U2: Sequence[int]) -> TurnResult:
    """Values for the slots in ``U2`` from the last ``k`` turns; every other slot is inherited."""
    was_training = model.training
    model.eval()
    try:
        gen = _generate(model, [list(history)], [prev_state], [list(U2)], model.config.k)[0]
    finally:
        model.train(was_training)
    state = dict(prev_state)
    generated = {}
    for j, (value, branch) in gen.items():
        name = model.ontology[j].name
        state[name] = value
        generated[name] = (value, branch)
    return TurnResult(history[-1].turn_index, state, [], generated)


@torch.no_grad()
def track_dialogues(
    dialogues: Sequence[Dialogue],
    model: DSSDSTModel,
    k: int | None = None,
    beta: float | None = None,
    delta: float | None = None,
    forcing: str | None = None,
    batch_size: int = 64,
) -> list[list[TurnResult]]:
    """Open-loop tracking: turn ``t`` consumes the predicted state of turn ``t-1``.

    Dialogues are processed in lock-step by turn position so every model
    call is batched.  ``forcing="gold"`` replaces decisions and values with
    gold annotations; ``forcing="selector"`` replaces only the decisions
    (a slot is updated when its gold value changed since the previous turn).
    """
    if forcing not in FORCING_MODES:
        raise ValueError(f"forcing must be one of {FORCING_MODES}")
    cfg = model.config
    k = cfg.k if k is None else k
    beta = cfg.beta if beta is None else beta
    delta = cfg.delta if delta is None else delta
    ontology = model.ontology
    names = ontology.names
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    try:
        results: list[list[TurnResult]] = [[] for _ in dialogues]
        states = [ontology.empty_state() for _ in dialogues]
        longest = max((len(d) for d in dialogues), default=0)
        for t in range(longest):
            active = [i for i, d in enumerate(dialogues) if t < len(d)]
            for lo in range(0, len(active), batch_size):
                chunk = active[lo : lo + batch_size]
                gold_sets = {}
                if forcing is not None:
                    for i in chunk:
                        gold = dialogues[i].full_state(t, ontology)
                        prev = dialogues[i].full_state(t - 1, ontology) if t > 0 else ontology.empty_state()
                        gold_sets[i] = (gold, [j for j, n in enumerate(names) if gold[n] != prev[n]])

                decisions_all, U2s = {}, {}
                if forcing is None:
                    sel_inputs = [
                        assemble_generator_input(
                            _window(dialogues[i].turns, t, cfg.selector_history), states[i], ontology, model.tokenizer, cfg.max_len
                        )
                        for i in chunk
                    ]
                    batch = collate(sel_inputs, model.pad_id, device=device)
                    if cfg.use_preliminary:
                        probs = model.preliminary(batch)
                    if cfg.use_ultimate:
                        start, end, alpha_c = model.ultimate(batch)
                    for row, i in enumerate(chunk):
                        if cfg.use_preliminary:
                            pre, U1 = preliminary_select(probs[row])
                            b = beta
                        else:
                            pre, U1, b = [0.0] * len(names), list(range(len(names))), 0.0
                        if cfg.use_ultimate:
                            ult = ultimate_select(start[row], end[row], alpha_c[row], U1, ontology, sel_inputs[row])
                            ult_scores = {j: v[1] for j, v in ult.items()}
                        else:
                            ult, ult_scores = {}, {j: 0.0 for j in U1}
                        U2, decisions = decide(pre, ult_scores, b, delta, names, use_ultimate=cfg.use_ultimate)
                        for j, (value, _, branch, span) in ult.items():
                            decisions[j].temp_value = value
                            decisions[j].branch = branch
                            decisions[j].span_text = span.text
                        decisions_all[i], U2s[i] = decisions, U2
                else:
                    for i in chunk:
                        U2 = gold_sets[i][1]
                        decisions_all[i] = [
                            SlotDecision(n, 1.0 if j in U2 else -1.0, action=UPDATE if j in U2 else "inherit") for j, n in enumerate(names)
                        ]
                        U2s[i] = U2

                if forcing == "gold":
                    gens = [{j: (gold_sets[i][0][names[j]], "gold") for j in U2s[i]} for i in chunk]
                else:
                    gens = _generate(
                        model,
                        [dialogues[i].turns[: t + 1] for i in chunk],
                        [states[i] for i in chunk],
                        [U2s[i] for i in chunk],
                        k,
                    )
                for i, gen in zip(chunk, gens):
                    new_state = dict(states[i])
                    generated = {}
                    for j, (value, branch) in gen.items():
                        new_state[names[j]] = value
                        generated[names[j]] = (value, branch)
                    results[i].append(TurnResult(dialogues[i].turns[t].turn_index, new_state, decisions_all[i], generated))
                    states[i] = new_state
        return results
    finally:
        model.train(was_training)


def track_dialogue(dialogue: Dialogue, model: DSSDSTModel, k=None, beta=None, delta=None, forcing=None) -> list[TurnResult]:
    return track_dialogues([dialogue], model, k, beta, delta, forcing)[0]


# --------------------------------------------------------------------------
# prediction dump


def predictions_to_dict(dialogues: Sequence[Dialogue], results: Sequence[Sequence[TurnResult]], model: DSSDSTModel, debug: bool = False) -> dict:
    ontology = model.ontology
    out = []
    for dial, turns in zip(dialogues, results):
        records = []
        for r in turns:
            rec = {"turn_index": r.turn_index, "state": r.state, "updated": r.updated}
            if debug:
                rec["decisions"] = [d.to_dict() for d in r.decisions]
                rec["generated"] = {s: {"value": v, "branch": b} for s, (v, b) in r.generated.items()}
            records.append(rec)
        out.append({"dialogue_id": dial.dialogue_id, "turns": records})
    return {
        "format": PREDICTIONS_FORMAT,
        "version": PREDICTIONS_VERSION,
        "ontology_fingerprint": ontology.fingerprint(),
        "slots": {s.name: {"categorical": s.categorical} for s in ontology},
        "dialogues": out,
    }


def write_predictions(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_predictions(path) -> dict:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != PREDICTIONS_FORMAT:
        raise ValueError(f"{path}: not a {PREDICTIONS_FORMAT} file")
    if payload.get("version") != PREDICTIONS_VERSION:
        raise ValueError(f"{path}: unsupported predictions version {payload.get('version')}")
    return payload

