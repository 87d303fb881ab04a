import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from dssdst.encoding import (
    DIALOGUE_SEGMENT,
    STATE_SEGMENT,
    InputTooLongError,
    ToyTransformerEncoder,
    assemble_generator_input,
    assemble_selector_input,
)
from dssdst.ontology import DialogueTurn
from dssdst.tokenization import CLS, SEP, SLOT, TURN_SEP, UNK, WordTokenizer


@pytest.fixture
def tok(small_dialogue, small_ontology):
    texts = [t.system_response + " " + t.user_utterance for t in small_dialogue.turns]
    texts += [s.name.replace("-", " ") + " " + " ".join(s.candidate_values) for s in small_ontology]
    return WordTokenizer.build(texts)


def _texts(enc):
    return [p.text for p in enc.pieces]


def test_first_turn_layout(small_dialogue, small_ontology, tok):
    enc = assemble_selector_input(small_dialogue.turns[0], small_ontology.empty_state(), small_ontology, tok)
    words = _texts(enc)
    # empty system response: [CLS] ; U [SEP] then the slot blocks
    assert words[:2] == [CLS, TURN_SEP]
    assert words[enc.dialogue_end - 1] == SEP
    assert " ".join(words[2 : enc.dialogue_end - 1]) == "i need a hotel in the north"
    assert [words[p] for p in enc.slot_pos] == [SLOT] * small_ontology.J
    assert enc.segments[: enc.dialogue_end] == [DIALOGUE_SEGMENT] * enc.dialogue_end
    assert enc.segments[enc.dialogue_end :] == [STATE_SEGMENT] * (enc.N - enc.dialogue_end)
    assert list(enc.dialogue_region) == list(range(1, enc.dialogue_end))
    assert enc.cls_pos == 0


def test_history_is_newest_first(small_dialogue, small_ontology, tok):
    prev = small_dialogue.full_state(1, small_ontology)
    enc = assemble_generator_input(small_dialogue.turns, prev, small_ontology, tok)
    words = _texts(enc)[1 : enc.dialogue_end]
    first_sep = words.index(SEP)
    assert " ".join(words[:first_sep]) == "anything else ? ; a taxi at 10 : 30 please"
    assert words.count(SEP) == 3
    assert enc.turn_of[1] == 0 and enc.turn_of[enc.dialogue_end - 1] == 2


def test_state_block_shows_previous_values(small_dialogue, small_ontology, tok):
    prev = small_dialogue.full_state(0, small_ontology)
    enc = assemble_selector_input(small_dialogue.turns[1], prev, small_ontology, tok)
    words = _texts(enc)
    a, b = enc.slot_pos[0], enc.slot_pos[1]
    assert words[a:b] == [SLOT, "hotel", "area", "-", "north"]


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(12, 60))
def test_truncation_cuts_oldest_turn_from_the_left(small_dialogue, small_ontology, tok, max_len):
    prev = small_ontology.empty_state()
    full = assemble_generator_input(small_dialogue.turns, prev, small_ontology, tok, max_len=1000)
    state_len = full.N - full.dialogue_end
    if max_len - 1 - state_len < 1:
        with pytest.raises(InputTooLongError):
            assemble_generator_input(small_dialogue.turns, prev, small_ontology, tok, max_len=max_len)
        return
    enc = assemble_generator_input(small_dialogue.turns, prev, small_ontology, tok, max_len=max_len)
    assert enc.N <= max_len
    assert _texts(enc)[enc.dialogue_end :] == _texts(full)[full.dialogue_end :]
    # kept dialogue tokens are a suffix of each turn, and a turn is only cut once all older ones are gone
    kept = enc.origin[1 : enc.dialogue_end]
    assert kept == sorted(kept)
    by_turn = {}
    for h, o in zip(enc.turn_of[1 : enc.dialogue_end], kept):
        by_turn.setdefault(h, []).append(o)
    full_by_turn = {}
    for h, o in zip(full.turn_of[1 : full.dialogue_end], full.origin[1 : full.dialogue_end]):
        full_by_turn.setdefault(h, []).append(o)
    for h, origins in by_turn.items():
        assert origins == full_by_turn[h][len(full_by_turn[h]) - len(origins) :]
        for newer in range(h):
            assert by_turn.get(newer) == full_by_turn[newer]


def test_too_long_state_raises(small_dialogue, small_ontology, tok):
    with pytest.raises(InputTooLongError):
        assemble_selector_input(small_dialogue.turns[0], small_ontology.empty_state(), small_ontology, tok, max_len=10)


def test_missing_state_slot_raises(small_dialogue, small_ontology, tok):
    with pytest.raises(ValueError):
        assemble_selector_input(small_dialogue.turns[0], {"hotel-area": "none"}, small_ontology, tok)


def test_map_span_and_span_text(small_dialogue, small_ontology, tok):
    prev = small_dialogue.full_state(1, small_ontology)
    full = assemble_generator_input(small_dialogue.turns, prev, small_ontology, tok, max_len=1000)
    words = _texts(full)
    a = words.index("10")
    span = (a, a + 3)
    assert full.span_text(*span) == "10:30"
    assert full.map_span((0, 0)) == (0, 0)
    assert full.map_span(None) is None
    # cutting to the current turn keeps the span, shifted
    cur = assemble_generator_input(small_dialogue.turns[-1:], prev, small_ontology, tok)
    short = assemble_generator_input(small_dialogue.turns, prev, small_ontology, tok, max_len=cur.N)
    mapped = short.map_span(span)
    assert mapped is not None and short.span_text(*mapped) == "10:30"
    # a span in the oldest turn is dropped
    b = words.index("north")
    assert short.map_span((b, b + 1)) is None


def test_unknown_words_map_to_unk(small_ontology, tok):
    turn = DialogueTurn(1, "", "zebra crossing", "hotel")
    enc = assemble_selector_input(turn, small_ontology.empty_state(), small_ontology, tok)
    assert enc.tokens[2] == tok.special_id(UNK)
    assert enc.span_text(2, 4) == "zebra crossing"


def test_word_tokenizer_round_trip(tmp_path, tok):
    path = tmp_path / "vocab.txt"
    tok.save(path)
    assert WordTokenizer.load(path).vocab == tok.vocab
    with pytest.raises(ValueError):
        WordTokenizer(["a", "b"])


@pytest.mark.parametrize("position", ["sinusoidal", "learned"])
def test_toy_encoder_shapes_and_eval_determinism(position):
    torch.manual_seed(0)
    enc = ToyTransformerEncoder(30, hidden_size=16, num_layers=1, num_heads=2, max_len=20, position=position)
    tokens = torch.randint(1, 30, (3, 12))
    segments = torch.zeros(3, 12, dtype=torch.long)
    mask = torch.ones(3, 12, dtype=torch.bool)
    mask[0, 8:] = False
    enc.eval()
    out = enc(tokens, segments, mask)
    assert out.shape == (3, 12, 16)
    assert torch.equal(out, enc(tokens, segments, mask))
    # padding does not affect unpadded rows
    assert torch.allclose(enc(tokens[1:], segments[1:], mask[1:]), out[1:], atol=1e-6)


def test_toy_encoder_rejects_unknown_position():
    with pytest.raises(ValueError):
        ToyTransformerEncoder(10, position="rotary")
