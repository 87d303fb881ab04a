"""Ontology, MultiWOZ corpus loading and per-turn supervision."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .tokenization import SPECIAL_TOKENS, Token, WordTokenizer, turn_tokens

logger = logging.getLogger(__name__)

NONE = "none"
DONTCARE = "dontcare"

FIVE_DOMAINS = ("restaurant", "train", "hotel", "taxi", "attraction")

NULL_SPAN = (0, 0)

_WORD_TOKENIZER = WordTokenizer(SPECIAL_TOKENS)


class OntologyError(ValueError):
    pass


@lru_cache(maxsize=None)
def _synonyms() -> dict[str, str]:
    raw = json.loads(resources.files("dssdst.data").joinpath("synonyms.json").read_text("utf-8"))
    return raw["synonyms"]


@lru_cache(maxsize=None)
def multiwoz_schema() -> dict:
    """Five-domain slot list with the MultiWOZ 2.2 categorical flags."""
    return json.loads(resources.files("dssdst.data").joinpath("multiwoz_schema.json").read_text("utf-8"))


def normalize_value(raw: str) -> str:
    value = " ".join(str(raw).lower().split())
    return _synonyms().get(value, value)


def slot_domain(slot: str) -> str:
    return slot.split("-", 1)[0]


@dataclass(frozen=True)
class SlotSchema:
    name: str
    candidate_values: tuple[str, ...]
    categorical: bool = True

    def __post_init__(self):
        if not self.candidate_values or self.candidate_values[0] != NONE:
            raise OntologyError(f"slot {self.name!r}: candidate_values[0] must be {NONE!r}")
        if len(set(self.candidate_values)) != len(self.candidate_values):
            raise OntologyError(f"slot {self.name!r}: duplicate candidate values")

    @property
    def domain(self) -> str:
        return slot_domain(self.name)

    def index(self, value: str) -> int | None:
        try:
            return self.candidate_values.index(value)
        except ValueError:
            return None

    def __contains__(self, value) -> bool:
        return value in self.candidate_values


class Ontology:
    """Ordered slot collection; slot order is fixed for the lifetime of a model."""

    def __init__(self, slots: Sequence[SlotSchema]):
        self.slots = tuple(slots)
        names = [s.name for s in self.slots]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise OntologyError(f"duplicate slot names: {', '.join(dupes)}")
        self._index = {s.name: i for i, s in enumerate(self.slots)}

    @classmethod
    def from_mapping(cls, mapping: Mapping, categorical: Mapping[str, bool] | None = None) -> "Ontology":
        """Build from ``{slot: [values]}`` or ``{slot: {"values": [...], "categorical": bool}}``.

        ``categorical`` supplies flags for slots that do not carry their own.
        """
        slots = []
        for name, spec in mapping.items():
            flag, explicit = True, False
            if isinstance(spec, Mapping):
                if "values" not in spec:
                    raise OntologyError(f"slot {name!r}: missing 'values'")
                explicit = "categorical" in spec
                flag = bool(spec.get("categorical", True))
                spec = spec["values"]
            if isinstance(spec, str) or not isinstance(spec, (list, tuple)):
                raise OntologyError(f"slot {name!r}: expected a list of values, got {type(spec).__name__}")
            if categorical is not None and not explicit:
                # MultiWOZ 2.2 schema names drop the spaces ("hotel-pricerange")
                for key in (name, name.replace(" ", "")):
                    if key in categorical:
                        flag = bool(categorical[key])
                        break
            values = [NONE]
            for raw in spec:
                if not isinstance(raw, str):
                    raise OntologyError(f"slot {name!r}: non-string value {raw!r}")
                v = normalize_value(raw)
                if v not in values:
                    values.append(v)
            slots.append(SlotSchema(str(name), tuple(values), flag))
        return cls(slots)

    @property
    def J(self) -> int:
        return len(self.slots)

    def __len__(self):
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, key) -> SlotSchema:
        if isinstance(key, str):
            return self.slots[self._index[key]]
        return self.slots[key]

    def __contains__(self, name) -> bool:
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Ontology) and self.slots == other.slots

    def __hash__(self):
        return hash(self.slots)

    def __repr__(self):
        return f"Ontology(J={self.J}, domains={self.domains})"

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.slots]

    @property
    def domains(self) -> list[str]:
        seen = []
        for s in self.slots:
            if s.domain not in seen:
                seen.append(s.domain)
        return seen

    def index(self, name: str) -> int:
        return self._index[name]

    def to_dict(self) -> dict:
        return {s.name: {"values": list(s.candidate_values), "categorical": s.categorical} for s in self.slots}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def restrict(self, domains: Iterable[str]) -> "Ontology":
        keep = set(domains)
        return Ontology([s for s in self.slots if s.domain in keep])

    def empty_state(self) -> dict[str, str]:
        return {s.name: NONE for s in self.slots}


def load_ontology(path, categorical: Mapping[str, bool] | None = None) -> Ontology:
    """Read a JSON ontology file; slot order follows the file."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise OntologyError(f"{path}: empty ontology file")
    try:
        mapping = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OntologyError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(mapping, dict) or not mapping:
        raise OntologyError(f"{path}: expected a non-empty object mapping slot -> values")
    # json.loads silently keeps the last duplicate key
    names = json.loads(text, object_pairs_hook=lambda pairs: [k for k, _ in pairs])
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise OntologyError(f"{path}: duplicate slot names: {', '.join(dupes)}")
    return Ontology.from_mapping(mapping, categorical)


def categorical_flags_from_schema(path) -> dict[str, bool]:
    """Read ``is_categorical`` flags from a MultiWOZ 2.2 ``schema.json``."""
    services = json.loads(Path(path).read_text(encoding="utf-8"))
    flags = {}
    for service in services:
        for slot in service.get("slots", []):
            domain, _, name = slot["name"].partition("-")
            flags[f"{domain}-{name}"] = bool(slot.get("is_categorical", False))
    return flags


# --------------------------------------------------------------------------
# dialogues


@dataclass(frozen=True)
class DialogueTurn:
    turn_index: int
    system_response: str
    user_utterance: str
    domain: str | None = None


@dataclass
class Dialogue:
    dialogue_id: str
    turns: list[DialogueTurn]
    # gold state after each turn, sparse: only slots with a non-none value
    states: list[dict[str, str]]
    domains: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.turns)

    def full_state(self, t: int, ontology: Ontology) -> dict[str, str]:
        """Gold state after turn position ``t`` (0-based); ``t = -1`` is the empty initial state."""
        state = ontology.empty_state()
        if t >= 0:
            for slot, value in self.states[t].items():
                if slot in state:
                    state[slot] = value
        return state

    def to_trade(self) -> dict:
        turns = []
        for turn, state in zip(self.turns, self.states):
            turns.append(
                {
                    "turn_idx": turn.turn_index - 1,
                    "system_transcript": turn.system_response,
                    "transcript": turn.user_utterance,
                    "domain": turn.domain or "",
                    "belief_state": [{"slots": [[s, v]], "act": "inform"} for s, v in state.items()],
                }
            )
        return {"dialogue_idx": self.dialogue_id, "domains": list(self.domains), "dialogue": turns}


@dataclass
class LoadReport:
    path: str = ""
    dialogues_read: int = 0
    dialogues_kept: int = 0
    dialogues_filtered: int = 0
    dialogues_skipped: int = 0
    turns_kept: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def _parse_belief_state(raw) -> dict[str, str]:
    if isinstance(raw, Mapping):
        return {str(k): normalize_value(v) for k, v in raw.items()}
    state = {}
    for entry in raw:
        for slot, value in entry["slots"]:
            state[str(slot)] = normalize_value(value)
    return state


def parse_dialogue(raw: Mapping, domains: Iterable[str] | None = None) -> Dialogue | None:
    """Parse one TRADE-style dialogue record.

    Returns ``None`` when no domain of the dialogue survives the filter.
    Raises ``KeyError``/``TypeError``/``ValueError`` on missing annotation.
    """
    keep = set(FIVE_DOMAINS if domains is None else domains)
    turns, states = [], []
    for i, t in enumerate(raw["dialogue"]):
        state = _parse_belief_state(t["belief_state"])
        state = {s: v for s, v in state.items() if slot_domain(s) in keep and v != NONE}
        turns.append(
            DialogueTurn(
                turn_index=int(t.get("turn_idx", i)) + 1,
                system_response=str(t["system_transcript"]),
                user_utterance=str(t["transcript"]),
                domain=t.get("domain") or None,
            )
        )
        states.append(state)
    for a, b in zip(turns, turns[1:]):
        if b.turn_index <= a.turn_index:
            raise ValueError(f"turn indices not increasing ({a.turn_index} -> {b.turn_index})")
    dial_domains = raw.get("domains")
    if dial_domains is None:
        dial_domains = sorted({slot_domain(s) for st in states for s in st} | {t.domain for t in turns if t.domain})
    if not keep.intersection(dial_domains):
        return None
    return Dialogue(str(raw["dialogue_idx"]), turns, states, [d for d in dial_domains if d in keep])


def load_dialogues(path, domains: Iterable[str] = FIVE_DOMAINS, report: LoadReport | None = None) -> list[Dialogue]:
    """Load a TRADE-format corpus file (list of dialogues) restricted to ``domains``."""
    domains = set(domains)
    report = report if report is not None else LoadReport()
    report.path = str(path)
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON list of dialogues")
    out = []
    for i, record in enumerate(raw):
        report.dialogues_read += 1
        if not domains:
            report.dialogues_filtered += 1
            continue
        try:
            dial = parse_dialogue(record, domains)
        except (KeyError, TypeError, ValueError) as exc:
            ident = record.get("dialogue_idx", f"#{i}") if isinstance(record, Mapping) else f"#{i}"
            msg = f"{ident}: skipped ({type(exc).__name__}: {exc})"
            logger.warning(msg)
            report.warnings.append(msg)
            report.dialogues_skipped += 1
            continue
        if dial is None:
            report.dialogues_filtered += 1
            continue
        report.dialogues_kept += 1
        report.turns_kept += len(dial)
        out.append(dial)
    return out


def corpus_statistics(raw_dialogues: Sequence[Mapping], domains: Iterable[str] = FIVE_DOMAINS) -> dict[str, tuple[int, int]]:
    """Per-domain (dialogue, turn) counts.

    A dialogue counts toward every domain in its ``domains`` list; a turn
    counts toward the domain annotated on the turn.
    """
    stats = {d: [0, 0] for d in domains}
    for dial in raw_dialogues:
        for d in set(dial.get("domains", [])):
            if d in stats:
                stats[d][0] += 1
        for turn in dial.get("dialogue", []):
            d = turn.get("domain")
            if d in stats:
                stats[d][1] += 1
    return {d: (n_dial, n_turn) for d, (n_dial, n_turn) in stats.items()}


# --------------------------------------------------------------------------
# supervision


@dataclass
class TurnExample:
    dialogue_id: str
    turn_index: int
    history: list[DialogueTurn]  # oldest -> newest, current turn last
    prev_state: dict[str, str]
    gold_state: dict[str, str]
    update_label: list[int]
    # positions in the untruncated selector layout ([CLS] R ; U [SEP] ...)
    span_target: list[tuple[int, int] | None]
    # positions in the untruncated generator layout ([CLS] D_t D_t-1 ...)
    gen_span_target: list[tuple[int, int] | None]
    candidate_target: list[int | None]
    unreachable: list[bool] = field(default_factory=list)
    gen_unreachable: list[bool] = field(default_factory=list)

    @property
    def turn(self) -> DialogueTurn:
        return self.history[-1]


@dataclass
class ExampleReport:
    turns: int = 0
    updates: int = 0
    unreachable: int = 0
    gen_unreachable: int = 0


def _find_span(tokens: Sequence[Token], texts: Mapping[str, str], value: str, sources: Sequence[str]) -> tuple[int, int] | None:
    """Latest occurrence of ``value`` in ``tokens`` (exclusive end), searching ``sources`` in order."""
    width = len(WordTokenizer.split(value)) + 2
    for source in sources:
        best = None
        idx = [i for i, tok in enumerate(tokens) if tok.source == source]
        for a_pos, a in enumerate(idx):
            for b in idx[a_pos : a_pos + width]:
                text = texts[source][tokens[a].start : tokens[b].end]
                if normalize_value(text) == value:
                    best = (a, b + 1)
                    break
        if best is not None:
            return best
    return None


def derive_turn_examples(
    dialogue: Dialogue,
    ontology: Ontology,
    k: int = 2,
    tokenizer=None,
    report: ExampleReport | None = None,
    prev_states: Sequence[Mapping[str, str]] | None = None,
) -> list[TurnExample]:
    """One :class:`TurnExample` per turn, supervised from gold state differences.

    ``prev_states`` replaces the gold previous state of each turn (e.g. with
    model predictions for scheduled sampling); labels are then the diff
    between that state and the gold state.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    tokenizer = tokenizer if tokenizer is not None else _WORD_TOKENIZER
    report = report if report is not None else ExampleReport()
    examples = []
    prev = ontology.empty_state()
    for t, turn in enumerate(dialogue.turns):
        gold = dialogue.full_state(t, ontology)
        if prev_states is not None:
            prev = {s.name: prev_states[t].get(s.name, NONE) for s in ontology}
        history = dialogue.turns[max(0, t - k + 1) : t + 1]
        # current turn first, as laid out in both encoder inputs
        layouts = []
        offset = 1
        for h in reversed(history):
            toks = turn_tokens(tokenizer, h.system_response, h.user_utterance)
            layouts.append((offset, toks, {"system": h.system_response, "user": h.user_utterance}))
            offset += len(toks)

        labels, spans, gen_spans, cands, unreach, gen_unreach = [], [], [], [], [], []
        for slot in ontology:
            old, new = prev[slot.name], gold[slot.name]
            if old == new:
                labels.append(0)
                spans.append(None)
                gen_spans.append(None)
                cands.append(None)
                unreach.append(False)
                gen_unreach.append(False)
                continue
            labels.append(1)
            cand = slot.index(new) if slot.categorical else None
            span = gen_span = None
            if new == NONE:
                span = gen_span = NULL_SPAN
            else:
                for h, (off, toks, texts) in enumerate(layouts):
                    found = _find_span(toks, texts, new, ("user", "system"))
                    if found is not None:
                        hit = (found[0] + off, found[1] + off)
                        if h == 0:
                            span = hit
                        gen_span = hit
                        break
            miss = span is None and cand is None
            gen_miss = gen_span is None and cand is None
            if span is None and not miss:
                span = NULL_SPAN
            if gen_span is None and not gen_miss:
                gen_span = NULL_SPAN
            spans.append(span)
            gen_spans.append(gen_span)
            cands.append(cand)
            unreach.append(miss)
            gen_unreach.append(gen_miss)

        report.turns += 1
        report.updates += sum(labels)
        report.unreachable += sum(unreach)
        report.gen_unreachable += sum(gen_unreach)
        examples.append(
            TurnExample(
                dialogue_id=dialogue.dialogue_id,
                turn_index=turn.turn_index,
                history=list(history),
                prev_state=prev,
                gold_state=gold,
                update_label=labels,
                span_target=spans,
                gen_span_target=gen_spans,
                candidate_target=cands,
                unreachable=unreach,
                gen_unreachable=gen_unreach,
            )
        )
        prev = gold
    return examples
