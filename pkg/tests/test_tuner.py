import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ruleworth.errors import TrainingError
from ruleworth.tuner import TuneState, propose, tune_loop

TARGET = np.array([2.0, 1.0, 0.3])


def bowl(w):
    """Validation loss of a synthetic model, minimised at TARGET in log-weight space."""
    w = np.maximum(np.asarray(w, dtype=float), 1e-12)
    return float(np.sum(np.log(w / TARGET) ** 2)) + 1e-3


def bowl_importance(w):
    # positive when growing the weight lowers the loss
    w = np.maximum(np.asarray(w, dtype=float), 1e-12)
    return list(-np.log(w / TARGET))


@given(
    st.lists(st.floats(0, 100), min_size=1, max_size=6),
    st.lists(st.floats(-5, 5), min_size=6, max_size=6),
    st.floats(1e-4, 0.999),
)
def test_proposal_keeps_weights_nonnegative(weights, ri, eps):
    out = propose(weights, ri[: len(weights)], eps)
    assert all(w >= 0 for w in out)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=5), st.lists(st.floats(-9, 9), min_size=5))
def test_infinite_threshold_is_identity(weights, ri):
    assert propose(weights, ri[: len(weights)], 0.5, tau=math.inf) == tuple(weights)


def test_update_directions():
    assert propose([1.0, 1.0, 1.0], [0.5, -0.5, 0.05], 0.5) == (1.5, 0.5, 1.0)


def test_zero_importance_exits_after_one_probe():
    calls = []

    def validation(w):
        calls.append(w)
        return 1.0

    st_ = tune_loop([1.0, 1.0], lambda w: [0.0, 0.0], validation, max_iters=10)
    assert st_.weights == (1.0, 1.0)
    assert st_.stop_reason == "weights unchanged"
    assert len(st_.history) == 2 and not st_.history[-1].accepted
    assert len(calls) == 1


def test_convex_surrogate_descends():
    state = tune_loop([1.0, 1.0, 1.0], bowl_importance, bowl, max_iters=40)
    accepted = [h.validation_loss for h in state.history if h.accepted]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    assert bowl(state.weights) < bowl([1.0, 1.0, 1.0]) / 5
    assert state.best_validation_loss == pytest.approx(bowl(state.weights))


def test_rejections_halve_step_and_keep_weights():
    losses = iter([1.0, 2.0, 3.0, 0.5])

    def validation(w):
        return next(losses)

    state = tune_loop([1.0], lambda w: [1.0], validation, max_iters=3)
    h = state.history
    assert [x.accepted for x in h[1:]] == [False, False, True]
    assert h[1].eps_step == 0.25 and h[2].eps_step == 0.125
    assert h[3].weights == (1.125,)
    assert state.weights == (1.125,)
    assert state.best_validation_loss == 0.5


def test_divergent_probe_counts_as_rejected():
    seen = []

    def validation(w):
        seen.append(w)
        if len(seen) == 2:
            raise TrainingError("boom")
        return 1.0 / len(seen)

    state = tune_loop([1.0], lambda w: [1.0], validation, max_iters=2)
    assert state.history[1].validation_loss == math.inf
    assert not state.history[1].accepted
    assert state.history[2].accepted


def test_stops_when_step_vanishes():
    state = tune_loop([1.0], lambda w: [1.0], lambda w: 1.0 if w == (1.0,) else 2.0,
                      max_iters=100)
    assert state.stop_reason == "step below minimum"
    assert state.eps_step < 1e-3


def test_trajectory_csv():
    state = tune_loop([1.0, 1.0, 1.0], bowl_importance, bowl, max_iters=3)
    rows = state.trajectory_csv().strip().splitlines()
    assert rows[0].startswith("iteration,lambda_1,lambda_2,lambda_3,validation_loss,accepted")
    assert len(rows) == 1 + len(state.history)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        tune_loop([1.0], lambda w: [0.0], lambda w: 1.0, max_iters=0)
    with pytest.raises(ValueError):
        tune_loop([-1.0], lambda w: [0.0], lambda w: 1.0, max_iters=1)
    assert isinstance(TuneState((1.0,)), TuneState)
