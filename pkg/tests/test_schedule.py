import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sedlm.schedule import (
    ActivitySelector, ScheduleParams, binarize, crossing_index, format_curve, p_tf, p_tf_tanh,
    schedule_curve, select_activity,
)
from sedlm.tensor import ShapeError

FIG = ScheduleParams(gamma=1 / 12, p_min=0.05, p_max=0.9, n_batches=44)


def test_start_and_limit():
    assert p_tf(0, FIG) == 0.9
    assert p_tf(10**7, FIG) == pytest.approx(0.05, abs=1e-15)


def test_half_crossing():
    assert abs(p_tf(580, FIG) - 0.5) < 1e-3
    assert crossing_index(FIG, 0.5) in (579, 580, 581)
    # closed-form inversion: tanh(i / 1056) = 1/2
    assert abs(crossing_index(FIG, 0.5) - 1056 * math.atanh(0.5)) <= 1


@given(st.integers(0, 10**6), st.floats(1e-3, 10), st.floats(0, 0.49), st.floats(0.5, 1),
       st.integers(1, 500))
def test_matches_tanh_form(i, gamma, p_min, p_max, nb):
    params = ScheduleParams(gamma, p_min, p_max, nb)
    assert abs(p_tf(i, params) - p_tf_tanh(i, params)) < 1e-12
    assert p_min - 1e-15 <= p_tf(i, params) <= p_max


@given(st.integers(0, 10**5), st.integers(1, 100))
def test_non_increasing(i, step):
    assert p_tf(i + step, FIG) <= p_tf(i, FIG)


def test_invalid_params():
    for bad in [dict(gamma=0), dict(p_min=-0.1), dict(p_min=0.95), dict(p_max=1.5), dict(n_batches=0)]:
        with pytest.raises(ValueError):
            ScheduleParams(**bad)
    with pytest.raises(ValueError):
        p_tf(-1, FIG)


def test_curve_shape():
    curve = schedule_curve(FIG, 4400)
    assert len(curve) == 4401 and curve[0] == (0, 0.9)
    values = [p for _, p in curve]
    assert all(b <= a for a, b in zip(values, values[1:]))
    # after 25, 50 and 100 epochs of 44 updates
    assert values[1100] < 0.3 and values[2200] < 0.1 and values[4400] < 0.06
    assert format_curve(curve[:2]).splitlines()[0] == "0 0.9"


def test_binarize():
    np.testing.assert_array_equal(binarize(np.array([0.5, 0.49, 0.9, 0.0])), [1, 0, 1, 0])
    y = np.random.default_rng(0).random(20)
    np.testing.assert_array_equal(binarize(binarize(y)), binarize(y))


def test_modes():
    yt = np.ones((3, 2))
    yp = np.full((3, 2), 0.3)
    np.testing.assert_array_equal(ActivitySelector(FIG, mode="always_truth").select(yt, yp), yt)
    np.testing.assert_array_equal(select_activity(ActivitySelector(FIG, mode="always_pred"), yt, yp), yp)
    bz = ActivitySelector(FIG, mode="always_pred", binarize_predictions=True)
    np.testing.assert_array_equal(bz.select(yt, np.full((3, 2), 0.7)), yt)
    with pytest.raises(ValueError):
        ActivitySelector(FIG, mode="sometimes")
    with pytest.raises(ShapeError):
        ActivitySelector(FIG).select(np.ones((2, 3)), np.ones((3, 2)))


def test_truth_fraction_statistics():
    sel = ActivitySelector(FIG, seed=11)
    assert sel.probability == 0.9
    draws = sel.draw_mask(1, 10**4 + 1)[0, :-1]
    sigma = math.sqrt(0.9 * 0.1 / 10**4)
    assert abs(draws.mean() - 0.9) < 3 * sigma


def test_counter_advances_probability():
    sel = ActivitySelector(FIG)
    for _ in range(580):
        sel.advance()
    assert sel.probability == p_tf(580, FIG)


def test_seed_replay_and_mask_equivalence():
    params = ScheduleParams(gamma=1e-9, p_min=0.5, p_max=0.5, n_batches=1)
    yt = np.ones((4, 3))
    yp = np.zeros((4, 3))
    a = ActivitySelector(params, seed=3)
    b = ActivitySelector(params, seed=3)
    seq_a = [a.select(yt, yp) for _ in range(15)]
    seq_b = [b.select(yt, yp) for _ in range(15)]
    np.testing.assert_array_equal(seq_a, seq_b)
    mask = ActivitySelector(params, seed=3).draw_mask(4, 16)
    np.testing.assert_array_equal(mask[:, :-1].T, np.array(seq_a)[:, :, 0])
    assert not mask[:, -1].any()
    assert 0 < mask.mean() < 1
