"""``ruleworth`` command line.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training or
numerical validation failure.  ``RULEWORTH_CACHE_DIR`` and
``RULEWORTH_WORKERS`` override the cache location and worker count.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from ruleworth import plots
from ruleworth.config import ExperimentConfig
from ruleworth.errors import ConfigError, DataError, RuleWorthError
from ruleworth.importance import ImportanceReport, flag_rules
from ruleworth.io import atomic_write_text

log = logging.getLogger("ruleworth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "csv_only", False):
        cfg = replace(cfg, output=replace(cfg.output, csv_only=True))
    if getattr(args, "out", None):
        cfg = replace(cfg, output=replace(cfg.output, dir=args.out))
    return cfg


def _runtime(cfg: ExperimentConfig, args):
    return cfg.cache(args.cache_dir), cfg.resolved_workers(args.workers)


def _write(out: Path, name: str, text: str) -> Path:
    p = atomic_write_text(out / name, text)
    log.info("wrote %s", p)
    return p


def _emit_report(out: Path, rep: ImportanceReport, csv_only: bool, prefix: str = ""):
    _write(out, f"{prefix}report.json", rep.to_json())
    _write(out, f"{prefix}report.csv", rep.to_csv())
    if not csv_only:
        for name, svg in plots.report_figures(rep).items():
            _write(out, prefix + name, svg)


def _print_table(rep: ImportanceReport):
    print(f"{'rule':>4}  {'name':<14} {'RI':>10} {'FI':>10}")
    for k, rule in enumerate(rep.rules):
        fi = rep.fi[k]
        print(f"{rule:>4}  {rep.rule_names[k]:<14} {rep.ri[k]:>10.4f} {fi:>10.4f}"
              + (f"  +/- {rep.stderr[k]:.4f}" if rep.stderr else ""))


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from ruleworth import problems as P

    problem = P.get_problem(args.problem)
    if not problem.self_generated:
        raise DataError(
            f"{problem.id.value} is ingest-only: its reference solution comes from external "
            f"simulation output. Provide a CSV with header "
            f"{','.join([*problem.input_names, *problem.output_names])} and check it with "
            f"'ruleworth ingest-check {problem.id.value} FILE'"
        )
    grid = tuple(args.grid) if args.grid else None
    if problem.id is P.ProblemId.MULTIVAR:
        data = P.generate_multivar(grid or (100, 100))
    elif problem.id is P.ProblemId.PDE2D:
        data = P.generate_pde2d(grid or (100, 100))
    else:
        data = P.solve_convdiff_fd(*(grid or (256, 100)))
    out = Path(args.out or f"{problem.id.value}.csv")
    P.write_dataset(out, data)
    print(f"wrote {len(data)} rows to {out}")
    return 0


def cmd_ingest_check(args) -> int:
    from ruleworth import problems as P

    data = P.ingest_dataset(args.path, P.get_problem(args.problem), full_grid=args.full_grid)
    print(f"ok: {len(data)} rows, inputs {data.input_names}, outputs {data.output_names}")
    return 0


def cmd_importance(args) -> int:
    from ruleworth.studies import report_for

    cfg = _load(args)
    cache, workers = _runtime(cfg, args)
    method = args.method or cfg.importance.method
    samples = args.samples or cfg.importance.samples
    rep = report_for(cfg.experiment(), method, samples, cfg.protocol.seeds, cache, workers)
    _emit_report(Path(cfg.output.dir), rep, cfg.output.csv_only)
    _print_table(rep)
    print(f"trained jobs: {getattr(rep, 'trained_jobs', 0)}")
    return 0


def _study(args, kind: str) -> int:
    from ruleworth import studies

    cfg = _load(args)
    cache, workers = _runtime(cfg, args)
    exp = cfg.experiment()
    kw = dict(method=cfg.importance.method, samples=cfg.importance.samples,
              seeds=cfg.protocol.seeds, cache=cache, workers=workers)
    if kind == "volume":
        study = studies.volume_study(exp, args.values or cfg.study.volumes, **kw)
    elif kind == "noise":
        study = studies.noise_study(exp, args.values or cfg.study.noise_levels, **kw)
    else:
        study = studies.colloc_study(exp, args.values or cfg.study.colloc_sizes, **kw)
    out = Path(cfg.output.dir)
    _write(out, f"{kind}_study.json", study.to_json())
    _write(out, f"{kind}_study.csv", study.csv())
    if not cfg.output.csv_only:
        series = {f"rule {r}": v for r, v in study.series().items()}
        _write(out, f"{kind}_study.svg",
               plots.line_chart(study.values, series, f"RI by {study.parameter}",
                                xlabel=study.parameter))
    for v in study.values:
        if v in study.cells:
            print(f"{study.parameter}={v}: RI " + " ".join(f"{x:.3f}" for x in study.cells[v].ri))
        else:
            print(f"{study.parameter}={v}: failed ({study.errors[v]})")
    return 0 if not study.errors else 3


def cmd_relying_curve(args) -> int:
    from ruleworth.studies import exact_report

    cfg = _load(args)
    cache, workers = _runtime(cfg, args)
    rep = exact_report(cfg.experiment(), cfg.protocol.seeds, cache, workers)
    rules = [args.rule] if args.rule else rep.rules
    out = Path(cfg.output.dir)
    lines = ["rule,r,mean,values"]
    for rule in rules:
        if rule not in rep.rules:
            raise ConfigError(f"rule {rule} is not in the rule set {rep.rules}")
        curve = rep.curves[rep.rules.index(rule)]
        for r, (mean, vals) in sorted(curve.items()):
            lines.append(f"{rule},{r},{mean!r}," + " ".join(repr(v) for v in vals))
            print(f"rule {rule} r={r}: mean {mean:.4f} over {len(vals)} coalitions")
        if not cfg.output.csv_only:
            groups = [(str(r), vals) for r, (_, vals) in sorted(curve.items())]
            _write(out, f"relying_rule{rule}.svg",
                   plots.box_chart(groups, f"rule {rule} by number of other rules"))
    _write(out, "relying_curve.csv", "\n".join(lines) + "\n")
    return 0


def cmd_tune_weights(args) -> int:
    from ruleworth.tuner import comparison_csv, compare_weighting_methods

    cfg = _load(args)
    cache, workers = _runtime(cfg, args)
    seeds = [args.seed] if args.seed is not None else list(cfg.protocol.seeds)
    iters = args.max_iters or cfg.study.max_iters
    rows, states = compare_weighting_methods(
        cfg.experiment(), seeds, iters, cfg.study.tune_method, cache, workers
    )
    out = Path(cfg.output.dir)
    _write(out, "weights_comparison.csv", comparison_csv(rows, states))
    for s, st in states.items():
        _write(out, f"trajectory_s{s}.csv", st.trajectory_csv())
        if not cfg.output.csv_only:
            acc = [h for h in st.history if h.accepted]
            _write(out, f"trajectory_s{s}.svg", plots.line_chart(
                [h.iteration for h in acc],
                {"validation loss (log10)": [_log10(h.validation_loss) for h in acc]},
                f"accepted iterations, seed {s}", "log10 loss", "iteration"))
    for row in rows:
        if row.test_mse is None:
            print(f"{row.method:<14} n/a")
        else:
            print(f"{row.method:<14} test MSE " + " ".join(f"{m:.3g}" for m in row.test_mse))
    return 0


def _log10(v):
    return math.log10(v) if v > 0 else float("nan")


def _parse_perturbation(text: str) -> tuple[int, str]:
    rule, sep, expr = text.partition("=")
    if not sep or not rule.strip().isdigit() or not expr.strip():
        raise ConfigError(f"perturbation {text!r} must look like RULE=EXPRESSION")
    return int(rule), expr.strip()


def cmd_detect_wrong_rules(args) -> int:
    from ruleworth.studies import wrong_rule_study

    cfg = _load(args)
    cache, workers = _runtime(cfg, args)
    perts = [_parse_perturbation(p) for p in args.perturb] if args.perturb else [
        (int(r), e) for r, e in cfg.study.perturbations
    ]
    if not perts:
        raise ConfigError("no perturbations given (use --perturb RULE=EXPR or study.perturbations)")
    tau = args.tau if args.tau is not None else cfg.importance.tau
    try:
        ref, outcomes = wrong_rule_study(cfg.experiment(), perts, tau, cfg.protocol.seeds,
                                         cache, workers)
    except RuleWorthError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad perturbation: {exc}") from exc
    out = Path(cfg.output.dir)
    _emit_report(out, ref, cfg.output.csv_only, "unperturbed_")
    summary = []
    for k, o in enumerate(outcomes):
        _emit_report(out, o.report, cfg.output.csv_only, f"scenario{k}_")
        summary.append({"scenario": o.scenario, "flagged": o.flagged, "ri": o.report.ri,
                        "delta_ri": o.delta_ri, "config_hash": o.report.config_hash})
        if not cfg.output.csv_only:
            _write(out, f"scenario{k}_delta.svg", plots.bar_chart(
                [str(r) for r in o.report.rules], o.delta_ri, f"RI change: {o.scenario}", "delta RI"))
        print(f"{o.scenario}: flagged {o.flagged or 'none'}; RI "
              + " ".join(f"{x:.3f}" for x in o.report.ri))
    _write(out, "wrong_rules.json", json.dumps({"tau": tau, "reference_flags": flag_rules(ref, tau),
                                                "scenarios": summary}, indent=1) + "\n")
    return 0


def cmd_validate_autodiff(args) -> int:
    from ruleworth.validation import validate_all

    rows = validate_all(args.points, args.seed)
    ok = True
    for r in rows:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.architecture:<22} {r.quantity:<18} "
              f"order {r.order}  err {r.error:.2e}  tol {r.tolerance:.0e}")
    return 0 if ok else 3


def cmd_report(args) -> int:
    path = Path(args.path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from None
    if "cells" in d:
        from ruleworth.studies import StudyReport

        study = StudyReport.from_dict(d)
        for v, rep in study.cells.items():
            print(f"{study.parameter}={v}")
            _print_table(rep)
        return 0
    rep = ImportanceReport.from_dict(d)
    _print_table(rep)
    if args.plots:
        for name, svg in plots.report_figures(rep).items():
            _write(Path(args.plots), name, svg)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ruleworth", description="Rule importance for physics-informed networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--workers", type=int)
        s.add_argument("--cache-dir")
        s.add_argument("--out")
        s.add_argument("--csv-only", action="store_true")
        s.set_defaults(func=fn)
        return s

    s = sub.add_parser("gen-data", help="write a reference dataset CSV")
    s.add_argument("problem")
    s.add_argument("--grid", type=int, nargs=2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("ingest-check", help="validate an external dataset CSV")
    s.add_argument("problem")
    s.add_argument("path")
    s.add_argument("--full-grid", action="store_true")
    s.set_defaults(func=cmd_ingest_check)

    s = with_config("importance", cmd_importance, "coalition sweep and importance report")
    s.add_argument("--method", choices=["exact", "monte_carlo"])
    s.add_argument("--samples", type=int)

    s = with_config("volume-study", lambda a: _study(a, "volume"), "importance vs data volume")
    s.add_argument("--values", type=int, nargs="+")
    s = with_config("noise-study", lambda a: _study(a, "noise"), "importance vs data noise")
    s.add_argument("--values", type=float, nargs="+")
    s = with_config("colloc-study", lambda a: _study(a, "colloc"), "importance vs collocation size")
    s.add_argument("--values", type=int, nargs="+")

    s = with_config("relying-curve", cmd_relying_curve, "RI by number of other rules")
    s.add_argument("--rule", type=int)

    s = with_config("tune-weights", cmd_tune_weights, "importance-guided weight tuning")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-iters", type=int)

    s = with_config("detect-wrong-rules", cmd_detect_wrong_rules, "perturb rules, flag negative RI")
    s.add_argument("--perturb", action="append", metavar="RULE=EXPR")
    s.add_argument("--tau", type=float)

    s = sub.add_parser("validate-autodiff", help="check derivatives against finite differences")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_validate_autodiff)

    s = sub.add_parser("report", help="print a saved report, optionally re-plotting it")
    s.add_argument("path")
    s.add_argument("--plots")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RuleWorthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
