"""Dual slot selector dialogue state tracking."""

from .config import TrainConfig
from .estimator import DSSDSTTracker, check_dialogues, infer_ontology
from .generator import track_dialogue, track_dialogues
from .metrics import MetricsReport, joint_accuracy, selector_f1, slot_accuracy, split_metrics
from .model import DSSDSTModel, load_checkpoint, save_checkpoint
from .ontology import Dialogue, DialogueTurn, Ontology, derive_turn_examples, load_dialogues, load_ontology, normalize_value
from .training import Trainer, train

__version__ = "0.1.0"

__all__ = [
    "DSSDSTModel",
    "DSSDSTTracker",
    "Dialogue",
    "DialogueTurn",
    "MetricsReport",
    "Ontology",
    "TrainConfig",
    "Trainer",
    "check_dialogues",
    "derive_turn_examples",
    "infer_ontology",
    "joint_accuracy",
    "load_checkpoint",
    "load_dialogues",
    "load_ontology",
    "normalize_value",
    "save_checkpoint",
    "selector_f1",
    "slot_accuracy",
    "split_metrics",
    "track_dialogue",
    "track_dialogues",
    "train",
]
