"""Importance-guided rule weights.

Each iteration measures RI under the current weights, grows the weight of
helpful rules and shrinks harmful ones multiplicatively, retrains the full
coalition, and keeps the move only if the validation loss drops.  A rejected
move halves the step.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ruleworth.autodiff import forward
from ruleworth.errors import ConfigError, TrainingError
from ruleworth.importance import TAU_FLAG, MseTable, monte_carlo_ri, rule_importance
from ruleworth.lab import (
    Experiment,
    ResultCache,
    _baseline_job,
    _datasets,
    run_coalition_sweep,
)
from ruleworth.rules import Coalition, enumerate_coalitions, rule_loss

log = logging.getLogger(__name__)

EPS_STEP0 = 0.5
EPS_STEP_MIN = 1e-3
MC_SAMPLES = 8


@dataclass(frozen=True)
class TuneStep:
    iteration: int
    weights: tuple[float, ...]
    validation_loss: float
    ri: tuple[float, ...]
    accepted: bool
    eps_step: float


@dataclass
class TuneState:
    weights: tuple[float, ...]
    eps_step: float = EPS_STEP0
    best_validation_loss: float = math.inf
    iteration: int = 0
    history: list[TuneStep] = field(default_factory=list)
    stop_reason: str = ""

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.weights)
        w.writerow(
            ["iteration"] + [f"lambda_{k + 1}" for k in range(n)]
            + ["validation_loss", "accepted", "eps_step"] + [f"ri_{k + 1}" for k in range(n)]
        )
        for h in self.history:
            w.writerow(
                [h.iteration] + [repr(x) for x in h.weights]
                + [repr(h.validation_loss), int(h.accepted), repr(h.eps_step)]
                + [repr(x) for x in h.ri]
            )
        return buf.getvalue()


def propose(weights: Sequence[float], ri: Sequence[float], eps_step: float,
            tau: float = TAU_FLAG) -> tuple[float, ...]:
    out = []
    for w, v in zip(weights, ri):
        if v > tau:
            w = w * (1 + eps_step)
        elif v < -tau:
            w = max(0.0, w * (1 - eps_step))
        out.append(float(w))
    return tuple(out)


def tune_loop(weights0: Sequence[float], importance: Callable[[tuple], Sequence[float]],
              validation: Callable[[tuple], float], max_iters: int,
              eps_step: float = EPS_STEP0, eps_min: float = EPS_STEP_MIN,
              tau: float = TAU_FLAG) -> TuneState:
    """The accept/revert loop over abstract ``importance`` and ``validation`` callbacks.

    ``validation(weights)`` may raise :class:`TrainingError`; that probe then
    counts as rejected.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    weights = tuple(float(w) for w in weights0)
    if any(w < 0 for w in weights):
        raise ValueError("weights must be non-negative")
    state = TuneState(weights, eps_step, float(validation(weights)))
    ri = tuple(float(v) for v in importance(weights))
    state.history.append(TuneStep(0, weights, state.best_validation_loss, ri, True, eps_step))
    while state.iteration < max_iters:
        state.iteration += 1
        cand = propose(state.weights, ri, state.eps_step, tau)
        if cand == state.weights:
            state.history.append(
                TuneStep(state.iteration, cand, state.best_validation_loss, ri, False, state.eps_step)
            )
            state.stop_reason = "weights unchanged"
            return state
        try:
            loss = float(validation(cand))
        except TrainingError as exc:
            log.warning("tuning probe diverged: %s", exc)
            loss = math.inf
        accepted = loss < state.best_validation_loss
        if accepted:
            state.weights, state.best_validation_loss = cand, loss
            ri = tuple(float(v) for v in importance(cand))
        else:
            state.eps_step /= 2
        state.history.append(TuneStep(state.iteration, cand, loss, ri, accepted, state.eps_step))
        if state.eps_step < eps_min:
            state.stop_reason = "step below minimum"
            return state
    state.stop_reason = "max iterations"
    return state


# --------------------------------------------------------------------------
# experiment bindings


def weighted(exp: Experiment, weights: Sequence[float]) -> Experiment:
    labels = exp.rules().labels
    return replace(exp, weights=tuple(zip(labels, (float(w) for w in weights))))


def _full(exp: Experiment) -> Coalition:
    n = len(exp.rules())
    return Coalition((1 << n) - 1, n)


def full_result(exp: Experiment, seed: int, cache: ResultCache | None = None, workers: int = 1):
    return run_coalition_sweep(exp, [_full(exp)], cache, workers, seeds=(seed,))[0]


def sweep_importance(exp: Experiment, seed: int, method: str = "auto",
                     samples: int = MC_SAMPLES, cache: ResultCache | None = None,
                     workers: int = 1) -> list[float]:
    """RI of every rule from validation MSE, exact or by ``samples`` draws per rule."""
    n = len(exp.rules())
    if method == "auto":
        method = "exact" if (1 << n) <= 2 * samples * n else "monte_carlo"
    if method == "exact":
        res = run_coalition_sweep(exp, enumerate_coalitions(n), cache, workers, seeds=(seed,))
        table = MseTable.from_results(res, n, metric="val")
        return [rule_importance(table, i) for i in range(1, n + 1)]
    if method != "monte_carlo":
        raise ConfigError(f"unknown importance method {method!r}")

    def lookup(mask):
        return run_coalition_sweep(exp, [Coalition(mask, n)], cache, 1, seeds=(seed,))[0].val_mse

    return [monte_carlo_ri(lookup, i, samples, seed, n=n)[0] for i in range(1, n + 1)]


def tune_weights(exp: Experiment, max_iters: int = 10, seed: int = 0, method: str = "auto",
                 samples: int = MC_SAMPLES, tau: float = TAU_FLAG,
                 cache: ResultCache | None = None, workers: int = 1,
                 weights0: Sequence[float] | None = None) -> TuneState:
    train, val, _ = _datasets(exp, seed)
    if val is None or len(val) == 0:
        raise ConfigError("weight tuning needs training data so that a validation split exists")
    w0 = weights0 if weights0 is not None else exp.rules().weights

    def validation(w):
        res = full_result(weighted(exp, w), seed, cache, workers)
        if res.failed:
            raise TrainingError(f"full coalition diverged under weights {w}")
        return res.val_mse

    def importance(w):
        return sweep_importance(weighted(exp, w), seed, method, samples, cache, workers)

    return tune_loop(w0, importance, validation, max_iters, tau=tau)


def empirical_weights(exp: Experiment, seed: int, cache: ResultCache | None = None) -> tuple:
    """Powers of ten that bring each rule loss to the data loss's magnitude at the baseline."""
    rules = exp.rules()
    train, _, _ = _datasets(exp, seed)
    if len(train) == 0:
        return tuple(1.0 for _ in rules)
    base = cache.get_baseline(exp, seed) if cache else None
    if base is None:
        base = _baseline_job(exp, seed)
        if cache:
            cache.put_baseline(exp, seed, base)
    pred = np.asarray(forward(base.net, train.inputs))
    data_loss = float(np.mean((pred - train.outputs) ** 2))
    problem = exp.problem()
    out = []
    for rule, colloc in zip(rules, exp.colloc_table()):
        loss = rule_loss(rule, base.net, colloc, problem.input_names, problem.output_names)
        if loss <= 0 or data_loss <= 0:
            out.append(1.0)
        else:
            out.append(float(10.0 ** round(math.log10(data_loss / loss))))
    return tuple(out)


@dataclass(frozen=True)
class MethodRow:
    method: str
    weights: tuple[float, ...] | None
    test_mse: tuple[float, ...] | None
    seeds: tuple[int, ...]

    @property
    def mean_test_mse(self) -> float | None:
        if self.test_mse is None:
            return None
        return float(10 ** np.mean(np.log10(self.test_mse)))


def compare_weighting_methods(exp: Experiment, seeds: Sequence[int] = (0,), max_iters: int = 10,
                              method: str = "auto", cache: ResultCache | None = None,
                              workers: int = 1) -> tuple[list[MethodRow], dict[int, TuneState]]:
    """Default, Empirical and tuned weights; tuned weights are found per seed.

    The gradient-flow column is listed without numbers since that method is
    outside this package.
    """
    n = len(exp.rules())
    default = tuple(1.0 for _ in range(n))
    rows, states = [], {}

    def test_mse(w, seed):
        return full_result(weighted(exp, w), seed, cache, workers).test_mse

    rows.append(MethodRow("Default", default, tuple(test_mse(default, s) for s in seeds),
                          tuple(seeds)))
    emp = [empirical_weights(exp, s, cache) for s in seeds]
    rows.append(MethodRow("Empirical", emp[0] if len(set(emp)) == 1 else None,
                          tuple(test_mse(w, s) for w, s in zip(emp, seeds)), tuple(seeds)))
    tuned = []
    for s in seeds:
        st = tune_weights(exp, max_iters, s, method, cache=cache, workers=workers,
                          weights0=default)
        states[s] = st
        tuned.append(test_mse(st.weights, s))
    rows.append(MethodRow("Ours", states[seeds[0]].weights if len(seeds) == 1 else None,
                          tuple(tuned), tuple(seeds)))
    rows.append(MethodRow("Gradient flow", None, None, tuple(seeds)))
    return rows, states


def comparison_csv(rows: Sequence[MethodRow], states: dict | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", "weights", "test_mse"])
    for row in rows:
        if row.test_mse is None:
            w.writerow([row.method, "", "n/a", "n/a"])
            continue
        for k, s in enumerate(row.seeds):
            if row.method == "Ours" and states:
                wt = states[s].weights
            else:
                wt = row.weights
            w.writerow([row.method, s, " ".join(f"{x:.6g}" for x in wt) if wt else "",
                        repr(row.test_mse[k])])
    return buf.getvalue()
