"""Rule importance from coalition MSE tables.

The marginal contribution of rule ``i`` to coalition ``s`` is
``log10(MSE(s without i) / MSE(s))``.  RI averages it uniformly over the
``2**(N-1)`` coalitions holding ``i``; FI takes the full coalition only;
the relying curve RI^r averages over coalitions with ``r`` other rules.  The
permutation-weighted (Shapley) average is kept as a labelled variant.

Rules are numbered from 1 in every public function.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ruleworth.rules import Coalition, coalitions_containing, relying_groups

MSE_FLOOR = 1e-16
TAU_FLAG = 0.1


class IncompleteTableError(KeyError):
    pass


@dataclass(frozen=True)
class MseTable:
    n: int
    entries: Mapping[int, float]

    def __post_init__(self):
        clean = {}
        for mask, v in self.entries.items():
            if not 0 <= int(mask) < 1 << self.n:
                raise ValueError(f"mask {mask} out of range for N={self.n}")
            v = float(v)
            if not v > 0 and not math.isnan(v):
                raise ValueError(f"MSE must be positive, got {v} for mask {mask}")
            clean[int(mask)] = v
        object.__setattr__(self, "entries", clean)

    def __getitem__(self, mask: int) -> float:
        try:
            return max(self.entries[mask], MSE_FLOOR)
        except KeyError:
            raise IncompleteTableError(f"no MSE for coalition mask {mask}") from None

    def __contains__(self, mask: int) -> bool:
        return mask in self.entries

    @property
    def complete(self) -> bool:
        return len(self.entries) == 1 << self.n

    def require_complete(self):
        if not self.complete:
            missing = (1 << self.n) - len(self.entries)
            raise IncompleteTableError(f"table misses {missing} of {1 << self.n} coalitions")

    def scaled(self, c: float) -> MseTable:
        return MseTable(self.n, {m: v * c for m, v in self.entries.items()})

    @classmethod
    def from_results(cls, results, n: int, channel: int | None = None,
                     exclude_failed: bool = False, metric: str = "test") -> MseTable:
        """Geometric mean over seeds of each coalition's test (or validation) MSE."""
        if metric not in ("test", "val"):
            raise ValueError(f"unknown metric {metric!r}")
        logs: dict[int, list[float]] = {}
        for r in results:
            if exclude_failed and r.failed:
                continue
            if metric == "val":
                if r.val_mse is None:
                    raise ValueError(f"coalition mask {r.mask} has no validation MSE")
                v = r.val_mse
            else:
                v = r.test_mse if channel is None else r.channel_mse[channel]
            logs.setdefault(r.mask, []).append(math.log10(max(v, MSE_FLOOR)))
        return cls(n, {m: 10 ** float(np.mean(v)) for m, v in logs.items()})

    @classmethod
    def per_seed(cls, results, n: int, channel: int | None = None) -> dict[int, MseTable]:
        seeds = sorted({r.seed for r in results})
        return {
            s: cls.from_results([r for r in results if r.seed == s], n, channel) for s in seeds
        }


def _pos(rule: int, n: int) -> int:
    if not 1 <= rule <= n:
        raise ValueError(f"rule {rule} out of range for N={n}")
    return rule - 1


def marginal(table: MseTable, rule: int, s: Coalition) -> float:
    k = _pos(rule, table.n)
    if k not in s:
        raise ValueError(f"coalition {s} does not contain rule {rule}")
    return math.log10(table[s.without(k).mask]) - math.log10(table[s.mask])


def rule_importance(table: MseTable, rule: int) -> float:
    table.require_complete()
    group = coalitions_containing(rule, table.n)
    return math.fsum(marginal(table, rule, s) for s in group) / len(group)


def full_importance(table: MseTable, rule: int) -> float:
    full = Coalition((1 << table.n) - 1, table.n)
    return marginal(table, rule, full)


def relying_curve(table: MseTable, rule: int) -> dict[int, tuple[float, list[float]]]:
    """r -> (mean marginal, every marginal) over coalitions with r other rules."""
    table.require_complete()
    out = {}
    for r in range(table.n):
        vals = [marginal(table, rule, s) for s in relying_groups(rule, table.n, r)]
        out[r] = (math.fsum(vals) / len(vals), vals)
    return out


def shapley_weighted(table: MseTable, rule: int) -> float:
    """Permutation-weighted average of the same log10 marginals."""
    table.require_complete()
    n = table.n
    total = []
    for s in coalitions_containing(rule, n):
        size = len(s)
        w = math.factorial(size - 1) * math.factorial(n - size) / math.factorial(n)
        total.append(w * marginal(table, rule, s))
    return math.fsum(total)


def monte_carlo_ri(source, rule: int, samples: int, seed: int, n: int | None = None,
                   replace: bool = True) -> tuple[float, float]:
    """Sampled RI and its standard error.

    ``source`` is an :class:`MseTable` or a callable ``mask -> MSE`` that may
    train coalitions on demand (then ``n`` is required).  Coalitions holding
    the rule are drawn uniformly; without replacement the finite-population
    correction is applied, so drawing all ``2**(N-1)`` gives the exact value
    with zero error.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if isinstance(source, MseTable):
        n = source.n
        lookup = source.__getitem__
    else:
        if n is None:
            raise ValueError("n is required when source is a callable")
        memo: dict[int, float] = {}

        def lookup(mask):
            if mask not in memo:
                memo[mask] = max(float(source(mask)), MSE_FLOOR)
            return memo[mask]

    k = _pos(rule, n)
    population = 1 << (n - 1)
    rng = np.random.default_rng(seed)
    if replace:
        draws = rng.integers(0, population, size=samples)
    else:
        if samples > population:
            raise ValueError(f"cannot draw {samples} of {population} coalitions without replacement")
        draws = rng.permutation(population)[:samples]
    low = (1 << k) - 1
    vals = []
    for d in draws:
        d = int(d)
        mask = (d & low) | ((d >> k) << (k + 1)) | (1 << k)
        vals.append(math.log10(lookup(mask & ~(1 << k))) - math.log10(lookup(mask)))
    vals = np.array(vals)
    est = float(np.mean(vals))
    if samples == 1:
        return est, math.inf
    se = float(np.std(vals, ddof=1) / math.sqrt(samples))
    if not replace:
        se *= math.sqrt(max(0.0, (population - samples) / (population - 1))) if population > 1 else 0.0
    return est, se


# --------------------------------------------------------------------------
# reports


class Method:
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"
    SHAPLEY = "shapley_weighted"


@dataclass
class ImportanceReport:
    rules: list[int]
    rule_names: list[str]
    ri: list[float]
    fi: list[float]
    curves: list[dict[int, tuple[float, list[float]]]]
    shapley: list[float]
    per_variable: dict[str, list[float]] = field(default_factory=dict)
    method: str = Method.EXACT
    sample_count: int | None = None
    stderr: list[float] | None = None
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    mse_table: dict[int, float] = field(default_factory=dict)
    per_seed_ri: dict[int, list[float]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.rules)

    def value(self, metric: str, rule: int) -> float:
        return getattr(self, metric)[self.rules.index(rule)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curves"] = [
            {str(r): {"mean": m, "values": v} for r, (m, v) in c.items()} for c in self.curves
        ]
        d["mse_table"] = {str(k): v for k, v in self.mse_table.items()}
        d["per_seed_ri"] = {str(k): v for k, v in self.per_seed_ri.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ImportanceReport:
        d = dict(d)
        d["curves"] = [
            {int(r): (e["mean"], list(e["values"])) for r, e in c.items()} for c in d["curves"]
        ]
        d["mse_table"] = {int(k): v for k, v in d["mse_table"].items()}
        d["per_seed_ri"] = {int(k): v for k, v in d.get("per_seed_ri", {}).items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rule", "name", "metric", "value"])
        for k, rule in enumerate(self.rules):
            name = self.rule_names[k]
            w.writerow([rule, name, "RI", repr(self.ri[k])])
            w.writerow([rule, name, "FI", repr(self.fi[k])])
            w.writerow([rule, name, "shapley_weighted", repr(self.shapley[k])])
            if self.stderr is not None:
                w.writerow([rule, name, "RI_stderr", repr(self.stderr[k])])
            for r, (mean, _) in sorted(self.curves[k].items()):
                w.writerow([rule, name, f"RI_r{r}", repr(mean)])
            for channel, vals in self.per_variable.items():
                w.writerow([rule, name, f"RI[{channel}]", repr(vals[k])])
        return buf.getvalue()


def importance_report(table: MseTable, rule_labels: Sequence[int] | None = None,
                      rule_names: Sequence[str] | None = None,
                      channel_tables: Mapping[str, MseTable] | None = None,
                      seeds=(), config_hash: str = "",
                      per_seed: Mapping[int, MseTable] | None = None) -> ImportanceReport:
    """Exact report; ``rule_labels`` renames positions 1..N (e.g. after dropping a rule)."""
    table.require_complete()
    n = table.n
    labels = list(rule_labels) if rule_labels is not None else list(range(1, n + 1))
    names = list(rule_names) if rule_names is not None else [str(r) for r in labels]
    pos = range(1, n + 1)
    return ImportanceReport(
        rules=labels,
        rule_names=names,
        ri=[rule_importance(table, i) for i in pos],
        fi=[full_importance(table, i) for i in pos],
        curves=[relying_curve(table, i) for i in pos],
        shapley=[shapley_weighted(table, i) for i in pos],
        per_variable=per_variable_importance(channel_tables or {}),
        seeds=list(seeds),
        config_hash=config_hash,
        mse_table=dict(table.entries),
        per_seed_ri={s: [rule_importance(t, i) for i in pos] for s, t in (per_seed or {}).items()},
    )


def per_variable_importance(channel_tables: Mapping[str, MseTable]) -> dict[str, list[float]]:
    """RI of every rule measured on each output channel's own MSE table."""
    return {
        ch: [rule_importance(t, i) for i in range(1, t.n + 1)] for ch, t in channel_tables.items()
    }


# --------------------------------------------------------------------------
# wrong-rule diagnostics


@dataclass
class ScenarioOutcome:
    scenario: str
    report: ImportanceReport
    perturbed_rule: int | None
    flagged: list[int]
    delta_ri: list[float]


def flag_rules(report: ImportanceReport, tau: float = TAU_FLAG) -> list[int]:
    return [rule for rule, v in zip(report.rules, report.ri) if v < -tau]


def wrong_rule_scan(evaluate: Callable[[int | None, str | None], ImportanceReport],
                    perturbations: Sequence[tuple[int, str]], tau: float = TAU_FLAG,
                    reference: ImportanceReport | None = None) -> list[ScenarioOutcome]:
    """Recompute importance with one rule replaced at a time.

    ``evaluate(rule, expression)`` returns the report for a rule set where
    ``rule``'s target is replaced by ``expression``; ``(None, None)`` asks for
    the unperturbed report, used for the RI deltas.
    """
    for rule, expr in perturbations:
        if rule is None or expr is None or not str(expr).strip():
            raise ValueError(f"invalid perturbation ({rule}, {expr!r})")
    ref = reference or evaluate(None, None)
    out = []
    for rule, expr in perturbations:
        rep = evaluate(rule, expr)
        out.append(
            ScenarioOutcome(
                scenario=f"rule {rule} -> {expr}",
                report=rep,
                perturbed_rule=rule,
                flagged=flag_rules(rep, tau),
                delta_ri=[a - b for a, b in zip(rep.ri, ref.ri)],
            )
        )
    return out
