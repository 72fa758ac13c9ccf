"""Run every training-heavy acceptance sweep so the test suite reads from cache.

Usage: python scripts/warm_acceptance_cache.py [cache_dir] [only...]
"""

import logging
import sys
import time
from pathlib import Path

from ruleworth.config import ExperimentConfig
from ruleworth.lab import ResultCache, run_coalition_sweep
from ruleworth.studies import exact_report, volume_study, wrong_rule_study
from ruleworth.tuner import compare_weighting_methods

ROOT = Path(__file__).resolve().parents[1]
CFG = ROOT / "configs" / "acceptance"


def main():
    cache = ResultCache(sys.argv[1] if len(sys.argv) > 1 else ROOT / ".acceptance_cache")
    only = set(sys.argv[2:])
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    def step(name, fn):
        if only and name not in only:
            return
        t = time.time()
        fn()
        print(f"{name}: {time.time() - t:.0f}s", flush=True)

    def load(name):
        return ExperimentConfig.load(CFG / f"{name}.json")

    step("multivar_outer", lambda: exact_report(load("multivar_outer").experiment(), cache=cache))
    step("pde2d_solve", lambda: run_coalition_sweep(
        load("pde2d_solve").experiment(), [_full(7)], cache))
    for mode in ("in", "out"):
        c = load(f"convdiff_{mode}")
        step(f"convdiff_{mode}", lambda c=c: volume_study(
            c.experiment(), c.study.volumes, cache=cache))
    c = load("pde2d_wrong_rule")
    step("pde2d_wrong_rule", lambda: wrong_rule_study(
        c.experiment(), [tuple(p) for p in c.study.perturbations], cache=cache))
    c = load("multivar_tune")
    step("multivar_tune", lambda: compare_weighting_methods(
        c.experiment(), c.protocol.seeds, c.study.max_iters, c.study.tune_method, cache=cache))


def _full(n):
    from ruleworth.rules import Coalition

    return Coalition((1 << n) - 1, n)


if __name__ == "__main__":
    main()
