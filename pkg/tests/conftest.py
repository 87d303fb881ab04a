import random
import sys

import pytest
import torch

from dssdst import synthetic
from dssdst.config import TrainConfig
from dssdst.model import DSSDSTModel
from dssdst.ontology import Dialogue, DialogueTurn, Ontology, parse_dialogue
from dssdst.tokenization import WordTokenizer
from dssdst.training import corpus_texts

torch.set_num_threads(1)


@pytest.fixture
def small_ontology():
    return Ontology.from_mapping(
        {
            "hotel-area": {"values": ["north", "south", "dontcare"], "categorical": True},
            "hotel-name": {"values": ["acorn house"], "categorical": False},
            "taxi-leave at": {"values": [], "categorical": False},
        }
    )


@pytest.fixture
def small_dialogue():
    turns = [
        DialogueTurn(1, "", "i need a hotel in the north", "hotel"),
        DialogueTurn(2, "how about acorn house ?", "yes please", "hotel"),
        DialogueTurn(3, "anything else ?", "a taxi at 10:30 please", "taxi"),
    ]
    states = [
        {"hotel-area": "north"},
        {"hotel-area": "north", "hotel-name": "acorn house"},
        {"hotel-area": "north", "hotel-name": "acorn house", "taxi-leave at": "10:30"},
    ]
    return Dialogue("d1", turns, states, ["hotel", "taxi"])


@pytest.fixture(scope="session")
def syn_ontology():
    return synthetic.ontology()


@pytest.fixture(scope="session")
def syn_dialogues():
    return [parse_dialogue(r) for r in synthetic.generate_corpus(12, seed=3)]


def tiny_config(**kw):
    base = dict(
        hidden_size=16,
        num_layers=1,
        num_heads=2,
        max_len=128,
        epochs_preliminary=1,
        epochs_ult_gen=1,
        batch_size=4,
        lr_preliminary=1e-3,
        lr_ultimate_generator=1e-3,
        seed=7,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_model(syn_ontology, syn_dialogues):
    torch.manual_seed(0)
    random.seed(0)
    tok = WordTokenizer.build(corpus_texts(syn_dialogues, syn_ontology))
    return DSSDSTModel(syn_ontology, tok, tiny_config())


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
