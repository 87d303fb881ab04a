"""scikit-learn style wrapper around training and tracking."""

from __future__ import annotations

from typing import Mapping, Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .generator import track_dialogues
from .metrics import joint_accuracy
from .ontology import NONE, Dialogue, Ontology, multiwoz_schema, parse_dialogue
from .training import train


def check_dialogues(X, domains=None) -> list[Dialogue]:
    """Accept :class:`Dialogue` objects or raw TRADE-format records; reject anything else."""
    if isinstance(X, (Dialogue, Mapping)):
        raise TypeError("expected a sequence of dialogues, got a single dialogue")
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        raise TypeError(f"expected a sequence of dialogues, got {type(X).__name__}")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, Dialogue):
            out.append(item)
        elif isinstance(item, Mapping):
            dial = parse_dialogue(item, domains)
            if dial is None:
                raise ValueError(f"dialogue #{i} has no domain in {sorted(domains or [])}")
            out.append(dial)
        else:
            raise TypeError(f"dialogue #{i}: expected Dialogue or mapping, got {type(item).__name__}")
    return out


def infer_ontology(dialogues: Sequence[Dialogue]) -> Ontology:
    """Slots and values seen in the gold states; categorical flags from the bundled schema, default categorical."""
    values: dict[str, list[str]] = {}
    for dial in dialogues:
        for state in dial.states:
            for slot, value in state.items():
                seen = values.setdefault(slot, [])
                if value != NONE and value not in seen:
                    seen.append(value)
    if not values:
        raise ValueError("cannot infer an ontology: no slot values in the gold states")
    flags = multiwoz_schema()["slots"]
    mapping = {s: {"values": sorted(values[s]), "categorical": flags.get(s, True)} for s in sorted(values)}
    return Ontology.from_mapping(mapping)


def _config(config) -> TrainConfig:
    if config is None:
        return TrainConfig()
    if isinstance(config, TrainConfig):
        return config
    if isinstance(config, Mapping):
        return TrainConfig.from_dict(config)
    raise TypeError(f"config must be a TrainConfig or mapping, got {type(config).__name__}")


class DSSDSTTracker(BaseEstimator):
    """Dialogue state tracker with a fit/predict/score interface.

    ``X`` is a sequence of dialogues (see :func:`check_dialogues`); ``y`` is
    unused because the gold states travel with the dialogues.  ``predict``
    returns, per dialogue, the list of predicted per-turn states.
    """

    def __init__(self, ontology: Ontology | None = None, config: TrainConfig | Mapping | None = None, out_dir=None):
        self.ontology = ontology
        self.config = config
        self.out_dir = out_dir

    def fit(self, X, y=None, X_val=None):
        config = _config(self.config)
        dialogues = check_dialogues(X)
        if not dialogues:
            raise ValueError("fit needs at least one dialogue")
        val = check_dialogues(X_val) if X_val is not None else None
        ontology = self.ontology if self.ontology is not None else infer_ontology(dialogues)
        result = train(dialogues, ontology, config, val, self.out_dir)
        self.model_ = result.model
        self.ontology_ = ontology
        self.training_log_ = result.log
        return self

    def predict(self, X, forcing: str | None = None) -> list[list[dict[str, str]]]:
        check_is_fitted(self, "model_")
        dialogues = check_dialogues(X)
        results = track_dialogues(dialogues, self.model_, forcing=forcing)
        return [[r.state for r in rs] for rs in results]

    def score(self, X, y=None) -> float:
        """Joint accuracy over every turn of ``X``."""
        dialogues = check_dialogues(X)
        preds = [s for states in self.predict(dialogues) for s in states]
        golds = [d.full_state(t, self.ontology_) for d in dialogues for t in range(len(d))]
        return joint_accuracy(preds, golds, self.ontology_.names)


__all__ = ["DSSDSTTracker", "NotFittedError", "check_dialogues", "infer_ontology"]
