import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dssdst.ontology import Ontology
from dssdst.selector import (
    CLASSIFICATION,
    EXTRACTIVE,
    UPDATE,
    classify_value,
    decide,
    extract_span,
    hybrid_value,
    is_null_span,
    preliminary_select,
    sam,
    span_log_partition,
    span_scores,
)

floats = st.floats(-8, 8, allow_nan=False, allow_infinity=False)


def _t(xs):
    return torch.tensor(xs, dtype=torch.float64)


@given(st.integers(1, 10).flatmap(lambda m: st.tuples(st.lists(st.lists(floats, min_size=3, max_size=3), min_size=m, max_size=m), st.lists(floats, min_size=3, max_size=3))))
def test_sam_matches_reference_and_sums_to_one(case):
    H, h = case
    got = sam(_t(H), _t(h))
    want = oracles.slot_attention(H, h)
    assert got.sum().item() == pytest.approx(1.0, abs=1e-12)
    assert got.tolist() == pytest.approx(want, abs=1e-12)


@given(st.lists(floats, min_size=2, max_size=9), st.floats(-50, 50))
def test_sam_shift_invariance(logits, shift):
    # a constant offset on every logit: append a unit feature whose weight is the shift
    H = _t([[x, 1.0] for x in logits])
    a = sam(H, _t([1.0, 0.0]))
    b = sam(H, _t([1.0, shift]))
    assert torch.allclose(a, b, atol=1e-9, rtol=0)


def test_sam_rejects_bad_shapes():
    with pytest.raises(ValueError):
        sam(torch.zeros(0, 4), torch.zeros(4))
    with pytest.raises(ValueError):
        sam(torch.zeros(3, 4), torch.zeros(5))


@settings(max_examples=200)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(st.lists(floats, min_size=n, max_size=n), st.lists(floats, min_size=n, max_size=n))))
def test_span_partition_matches_enumeration(case):
    s, e = case
    assert span_log_partition(_t(s), _t(e)).item() == pytest.approx(oracles.span_log_partition(s, e), abs=1e-9)


def test_span_partition_batched_shapes():
    g = torch.Generator().manual_seed(0)
    s = torch.randn(3, 4, 7, generator=g, dtype=torch.float64)
    e = torch.randn(3, 4, 7, generator=g, dtype=torch.float64)
    out = span_log_partition(s, e)
    assert out.shape == (3, 4)
    assert out[1, 2].item() == pytest.approx(oracles.span_log_partition(s[1, 2].tolist(), e[1, 2].tolist()), abs=1e-12)


def test_span_partition_needs_two_positions():
    with pytest.raises(ValueError):
        span_log_partition(_t([0.0]), _t([0.0]))


@given(st.integers(2, 10).flatmap(lambda n: st.tuples(st.lists(floats, min_size=n, max_size=n), st.lists(floats, min_size=n, max_size=n), st.integers(0, n - 1), st.integers(0, n - 1))))
def test_span_scores_match_enumeration(case):
    s, e, ps, pe = case
    got = span_scores(_t(s), _t(e), ps, pe)
    want = oracles.span_probabilities(s, e, ps, pe)
    assert got == pytest.approx(want, abs=1e-9)


def test_null_span_rules():
    assert is_null_span(0, 0)
    assert is_null_span(0, 3)
    assert is_null_span(3, 3)
    assert is_null_span(4, 2)
    assert not is_null_span(1, 2)


def test_all_pair_probabilities_sum_to_one():
    rng = random.Random(1)
    s = [rng.gauss(0, 2) for _ in range(6)]
    e = [rng.gauss(0, 2) for _ in range(6)]
    total = span_scores(_t(s), _t(e), 0, 0)[1]
    total += sum(span_scores(_t(s), _t(e), a, b)[0] for a in range(1, 6) for b in range(a + 1, 6))
    # p1 = 0 with p2 > 0 are partition terms too
    lz = oracles.span_log_partition(s, e)
    total += sum(math.exp(s[0] + e[b] - lz) for b in range(1, 6))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_extract_span_argmax_and_null():
    s = _t([0.0, 5.0, 0.0, 0.0])
    e = _t([0.0, 0.0, 0.0, 5.0])
    pred = extract_span(s, e)
    assert (pred.start, pred.end) == (1, 3)
    assert not pred.is_null
    s0 = _t([9.0, 0.0, 0.0, 0.0])
    e0 = _t([9.0, 0.0, 0.0, 0.0])
    assert extract_span(s0, e0).is_null


@pytest.fixture
def onto():
    return Ontology.from_mapping(
        {
            "hotel-area": {"values": ["north", "south"], "categorical": True},
            "hotel-name": {"values": [], "categorical": False},
        }
    )


def test_classify_value_picks_argmax_and_scores_against_none(onto):
    value, score = classify_value(_t([0.2, 0.1, 0.7, 0.0]), onto["hotel-area"])
    assert value == "south"
    assert score == pytest.approx(0.5)


def test_classify_value_rejects_noncategorical(onto):
    with pytest.raises(ValueError):
        classify_value(_t([1.0]), onto["hotel-name"])


class _Text:
    def __init__(self, text):
        self.text = text

    def span_text(self, a, b):
        return self.text


def _peaked(n, a, b):
    s = [0.0] * n
    e = [0.0] * n
    s[a] = 10.0
    e[b] = 10.0
    return _t(s), _t(e)


def test_hybrid_uses_extraction_when_it_is_a_candidate(onto):
    s, e = _peaked(5, 2, 3)
    value, _, branch, _ = hybrid_value(onto["hotel-area"], s, e, _t([0.9, 0.05, 0.05]), _Text("North"))
    assert (value, branch) == ("north", EXTRACTIVE)


def test_hybrid_falls_back_to_classification(onto):
    s, e = _peaked(5, 2, 3)
    value, score, branch, _ = hybrid_value(onto["hotel-area"], s, e, _t([0.1, 0.2, 0.7]), _Text("east"))
    assert (value, branch) == ("south", CLASSIFICATION)
    assert score == pytest.approx(0.6)
    s0, e0 = _peaked(5, 0, 0)
    assert hybrid_value(onto["hotel-area"], s0, e0, _t([0.1, 0.8, 0.1]), _Text("x"))[2] == CLASSIFICATION


def test_hybrid_noncategorical_null_is_none(onto):
    s0, e0 = _peaked(5, 0, 0)
    value, score, branch, _ = hybrid_value(onto["hotel-name"], s0, e0, _t([1.0]), _Text("x"))
    assert (value, branch) == ("none", EXTRACTIVE)
    assert score == pytest.approx(0.0)


def test_preliminary_select_strict_threshold():
    probs = _t([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]])
    scores, U1 = preliminary_select(probs)
    assert scores == pytest.approx([0.4, 0.0, -0.6])
    assert U1 == [0]
    assert preliminary_select(probs, use_preliminary=False)[1] == [0, 1, 2]


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.data())
def test_decide_beta_one_ranks_like_preliminary(pre, data):
    U1 = [j for j, p in enumerate(pre) if p > 0]
    ult = {j: data.draw(st.floats(-1, 1)) for j in U1}
    U2, decisions = decide(pre, ult, beta=1.0, delta=0.0)
    assert U2 == U1
    totals = [decisions[j].total_score for j in U1]
    assert totals == [pre[j] for j in U1]


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.data())
def test_decide_properties(pre, data):
    U1 = [j for j, p in enumerate(pre) if p > 0]
    ult = {j: data.draw(st.floats(-1, 1)) for j in U1}
    beta = data.draw(st.floats(0, 1))
    U2, decisions = decide(pre, ult, beta=beta, delta=0.0)
    assert set(U2) <= set(U1)
    assert decide(pre, ult, beta, delta=float("inf"))[0] == []
    assert decide(pre, ult, beta, use_ultimate=False)[0] == U1
    for j in U2:
        assert decisions[j].action == UPDATE
        assert decisions[j].total_score > 0


def test_decide_rejects_bad_beta():
    with pytest.raises(ValueError):
        decide([0.1], {0: 0.1}, beta=1.5)
