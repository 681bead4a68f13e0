import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sedlm import metrics
from sedlm.metrics import FrameCounts, ScoreReport


def worked_example():
    # classes A, B, C
    ref = np.array([[1, 1, 0], [1, 0, 0]])
    pred = np.array([[1, 0, 1], [0, 0, 0]])
    return ref, pred


def test_worked_example_counts():
    c = metrics.accumulate(*worked_example())
    assert (c.tp, c.fp, c.fn, c.subs, c.dels, c.ins, c.n_ref) == (1, 1, 2, 1, 1, 0, 3)
    assert metrics.error_rate(c) == 2 / 3
    assert metrics.f1(c) == 0.4


def test_perfect_prediction():
    ref = np.random.default_rng(0).random((10, 4)) < 0.5
    c = metrics.accumulate(ref, ref)
    assert c.fp == c.fn == c.subs == c.dels == c.ins == 0
    assert metrics.f1(c) == 1.0 and metrics.error_rate(c) == 0.0


def test_empty_conventions():
    assert metrics.f1(FrameCounts()) == 0.0
    assert metrics.error_rate(FrameCounts()) == 0.0
    c = metrics.accumulate(np.zeros((3, 2)), np.ones((3, 2)))
    assert math.isinf(metrics.error_rate(c))
    rep = ScoreReport.from_counts(c)
    assert rep.er_undefined and "er_flag=no_reference_activity" in rep.key_values()


def test_mask_excludes_frames():
    ref, pred = worked_example()
    c = metrics.accumulate(ref, pred, mask=np.array([True, False]))
    assert (c.tp, c.fp, c.fn, c.n_ref) == (1, 1, 1, 2)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.accumulate(np.zeros((3, 2)), np.zeros((3, 3)))


rolls = st.integers(1, 20).flatmap(lambda t: st.integers(1, 4).flatmap(
    lambda c: st.tuples(arrays(np.uint8, (t, c), elements=st.integers(0, 1)),
                        arrays(np.uint8, (t, c), elements=st.integers(0, 1)))))


@given(rolls)
def test_matches_brute_force(pair):
    ref, pred = pair
    assert metrics.accumulate(ref, pred) == metrics.brute_force_counts(ref, pred)


@given(rolls)
def test_counts_identities(pair):
    c = metrics.accumulate(*pair)
    assert c.tp + c.fn == c.n_ref
    assert c.subs + c.dels == c.fn and c.subs + c.ins == c.fp
    assert 0.0 <= metrics.f1(c) <= 1.0


@given(rolls, st.integers(2, 5))
def test_scale_invariance(pair, k):
    c = metrics.accumulate(*pair)
    assert metrics.f1(c.scaled(k)) == pytest.approx(metrics.f1(c), abs=1e-15)
    assert metrics.error_rate(c.scaled(k)) == pytest.approx(metrics.error_rate(c), abs=1e-15)


def test_counts_add_over_frames():
    rng = np.random.default_rng(5)
    ref, pred = rng.random((12, 3)) < 0.4, rng.random((12, 3)) < 0.4
    whole = metrics.accumulate(ref, pred)
    parts = metrics.accumulate(ref[:5], pred[:5]) + metrics.accumulate(ref[5:], pred[5:])
    assert whole == parts


def test_aggregate():
    one = ScoreReport(0.5, 0.4)
    agg = metrics.aggregate([one])
    assert (agg.f1, agg.er, agg.f1_std) == (0.5, 0.4, 0.0)
    assert metrics.aggregate([[ScoreReport(0.2, 1.0), ScoreReport(0.4, 0.0)]]).f1 == pytest.approx(0.3)
    repeats = [[ScoreReport(f, 0.0)] for f in (0.1, 0.2, 0.3, 0.6)]
    agg = metrics.aggregate(repeats)
    mean = 0.3
    std = math.sqrt(sum((f - mean) ** 2 for f in (0.1, 0.2, 0.3, 0.6)) / 4)
    assert agg.f1 == pytest.approx(mean) and agg.f1_std == pytest.approx(std) and agg.n_runs == 4
    with pytest.raises(ValueError):
        metrics.aggregate([])


def test_report_text():
    rep = ScoreReport.from_counts(metrics.accumulate(*worked_example()))
    kv = dict(line.split("=") for line in rep.key_values().splitlines())
    assert kv["f1"] == "0.400000" and kv["tp"] == "1" and kv["n_ref"] == "3"
    assert "TP=1 FP=1 FN=2 S=1 D=1 I=0 N=3" in rep.table()
