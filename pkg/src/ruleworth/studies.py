"""Sweeps turned into importance reports, and studies over a swept parameter."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ruleworth.errors import RuleWorthError
from ruleworth.importance import (
    TAU_FLAG,
    ImportanceReport,
    Method,
    MseTable,
    ScenarioOutcome,
    importance_report,
    monte_carlo_ri,
    wrong_rule_scan,
)
from ruleworth.lab import Experiment, ResultCache, run_coalition_sweep
from ruleworth.rules import Coalition

log = logging.getLogger(__name__)


def exact_report(exp: Experiment, seeds: Sequence[int] | None = None,
                 cache: ResultCache | None = None, workers: int = 1) -> ImportanceReport:
    """Full 2^N sweep over every seed, aggregated by per-mask geometric mean."""
    seeds = tuple(seeds) if seeds is not None else exp.protocol.seeds
    rules = exp.rules()
    n = len(rules)
    res = run_coalition_sweep(exp, None, cache, workers, seeds)
    excl = exp.protocol.exclude_failed
    table = MseTable.from_results(res, n, exclude_failed=excl)
    channels = {
        name: MseTable.from_results(res, n, channel=c, exclude_failed=excl)
        for c, name in enumerate(rules.output_names)
    }
    rep = importance_report(
        table,
        rule_labels=rules.labels,
        rule_names=[r.label for r in rules],
        channel_tables=channels if len(channels) > 1 else None,
        seeds=seeds,
        config_hash=exp.config_hash,
        per_seed=MseTable.per_seed(res, n) if len(seeds) > 1 else None,
    )
    rep.extra["failed_runs"] = sum(r.failed for r in res)
    # Not a field: a warm rerun must serialise identically.
    rep.trained_jobs = res.trained_jobs
    return rep


def monte_carlo_report(exp: Experiment, samples: int, seeds: Sequence[int] | None = None,
                       cache: ResultCache | None = None, workers: int = 1,
                       rng_seed: int = 0) -> ImportanceReport:
    """RI by sampling coalitions; only the sampled coalitions are trained."""
    seeds = tuple(seeds) if seeds is not None else exp.protocol.seeds
    rules = exp.rules()
    n = len(rules)

    def mse(mask):
        res = run_coalition_sweep(exp, [Coalition(mask, n)], cache, workers, seeds)
        return float(10 ** np.mean([np.log10(max(r.test_mse, 1e-16)) for r in res]))

    ri, se = [], []
    for i in range(1, n + 1):
        est, err = monte_carlo_ri(mse, i, samples, rng_seed + i, n=n)
        ri.append(est)
        se.append(err)
    nan = [float("nan")] * n
    return ImportanceReport(
        rules=rules.labels,
        rule_names=[r.label for r in rules],
        ri=ri,
        fi=nan,
        curves=[{} for _ in range(n)],
        shapley=nan,
        method=Method.MONTE_CARLO,
        sample_count=samples,
        stderr=se,
        seeds=list(seeds),
        config_hash=exp.config_hash,
    )


def report_for(exp: Experiment, method: str = "exact", samples: int = 64,
               seeds: Sequence[int] | None = None, cache: ResultCache | None = None,
               workers: int = 1) -> ImportanceReport:
    if method == "exact":
        return exact_report(exp, seeds, cache, workers)
    if method == "monte_carlo":
        return monte_carlo_report(exp, samples, seeds, cache, workers)
    raise ValueError(f"unknown importance method {method!r}")


@dataclass
class StudyReport:
    parameter: str
    values: list
    cells: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "values": list(self.values),
            "cells": {str(k): v.to_dict() for k, v in self.cells.items()},
            "errors": {str(k): v for k, v in self.errors.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> StudyReport:
        cells = {k: ImportanceReport.from_dict(v) for k, v in d["cells"].items()}
        return cls(d["parameter"], d["values"], cells, dict(d.get("errors", {})))

    def series(self, metric: str = "ri") -> dict[int, list[float]]:
        """Rule label -> metric value per swept value (NaN for failed cells)."""
        out: dict[int, list[float]] = {}
        for v in self.values:
            rep = self.cells.get(v)
            if rep is None:
                continue
            for rule, x in zip(rep.rules, getattr(rep, metric)):
                out.setdefault(rule, [])
        for rule in out:
            out[rule] = [
                self.cells[v].value(metric, rule) if v in self.cells else float("nan")
                for v in self.values
            ]
        return out

    def csv(self, metric: str = "ri") -> str:
        lines = [f"rule,{self.parameter},{metric}"]
        for rule, vals in self.series(metric).items():
            for v, x in zip(self.values, vals):
                lines.append(f"{rule},{v},{x!r}")
        return "\n".join(lines) + "\n"


def run_study(parameter: str, values: Sequence, make: Callable[[object], Experiment],
              method: str = "exact", samples: int = 64, seeds: Sequence[int] | None = None,
              cache: ResultCache | None = None, workers: int = 1) -> StudyReport:
    """One report per value; a failing cell is recorded and the sweep carries on."""
    study = StudyReport(parameter, list(values))
    for v in values:
        try:
            study.cells[v] = report_for(make(v), method, samples, seeds, cache, workers)
        except (RuleWorthError, ValueError) as exc:
            log.error("%s=%s failed: %s", parameter, v, exc)
            study.errors[v] = str(exc)
    return study


def volume_study(exp: Experiment, volumes: Sequence[int], **kw) -> StudyReport:
    return run_study(
        "train_volume", volumes, lambda v: replace(exp, split=replace(exp.split, train_volume=v)), **kw
    )


def noise_study(exp: Experiment, levels: Sequence[float], **kw) -> StudyReport:
    return run_study(
        "noise", levels, lambda e: replace(exp, split=replace(exp.split, noise=float(e))), **kw
    )


def colloc_study(exp: Experiment, sizes: Sequence[int], **kw) -> StudyReport:
    def make(m):
        dims = len(exp.problem().input_names)
        return replace(exp, colloc_shape=(m,) * dims, face_points=m)

    return run_study("colloc_size", sizes, make, **kw)


def wrong_rule_study(exp: Experiment, perturbations: Sequence[tuple[int, str]],
                     tau: float = TAU_FLAG, seeds: Sequence[int] | None = None,
                     cache: ResultCache | None = None,
                     workers: int = 1) -> tuple[ImportanceReport, list[ScenarioOutcome]]:
    def evaluate(rule, expr):
        if rule is None:
            return exact_report(exp, seeds, cache, workers)
        return exact_report(replace(exp, perturb=((int(rule), expr),)), seeds, cache, workers)

    ref = evaluate(None, None)
    return ref, wrong_rule_scan(evaluate, perturbations, tau, reference=ref)
