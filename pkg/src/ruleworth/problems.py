"""Benchmark problems, reference data, splits and observation noise."""

from __future__ import annotations

import csv
import enum
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, linalg

from ruleworth.autodiff import Activation, NetworkSpec
from ruleworth.errors import DataError
from ruleworth.io import atomic_write_text
from ruleworth.rules import Region, RuleKind, RuleSet, RuleSpec, grid_points


class ProblemId(str, enum.Enum):
    BURGERS = "burgers"
    KDV = "kdv"
    KLEIN_GORDON = "klein_gordon"
    CONV_DIFF = "conv_diff"
    MULTIVAR = "multivar"
    PDE2D = "pde2d"


class Source(str, enum.Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "finite_difference"
    INGESTED = "ingested"


class SplitMode(str, enum.Enum):
    IN = "in"
    OUT = "out"


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray = field(repr=False)
    outputs: np.ndarray = field(repr=False)
    source: Source
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    clean_outputs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64).reshape(-1, len(self.input_names))
        y = np.asarray(self.outputs, dtype=np.float64).reshape(-1, len(self.output_names))
        if len(x) != len(y):
            raise DataError(f"{len(x)} input rows but {len(y)} output rows")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        clean = y if self.clean_outputs is None else np.asarray(self.clean_outputs, dtype=np.float64)
        object.__setattr__(self, "clean_outputs", clean.reshape(y.shape))

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> Dataset:
        return replace(
            self,
            inputs=self.inputs[idx],
            outputs=self.outputs[idx],
            clean_outputs=self.clean_outputs[idx],
        )

    @classmethod
    def concat(cls, parts: Sequence[Dataset]) -> Dataset:
        first = parts[0]
        return replace(
            first,
            inputs=np.concatenate([p.inputs for p in parts]),
            outputs=np.concatenate([p.outputs for p in parts]),
            clean_outputs=np.concatenate([p.clean_outputs for p in parts]),
        )


@dataclass(frozen=True)
class ProblemDef:
    id: ProblemId
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    domain: Region
    rule_set: RuleSet
    default_net: NetworkSpec
    # out-of-distribution predicates, row-wise on inputs
    train_region: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    test_region: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    out_regions_text: tuple[str, str] = ("", "")
    full_grid_rows: int | None = None
    default_colloc: tuple[int, ...] = (100, 100)
    self_generated: bool = True

    @property
    def n_rules(self) -> int:
        return len(self.rule_set)


def _box(*bounds) -> Region:
    return Region(tuple(bounds))


def _pde(index, lhs, domain, rhs="0"):
    return RuleSpec(index, "PDE", RuleKind.PDE, lhs, domain, rhs=rhs)


def _time_cut(cut: float, axis: int = 1):
    return (lambda x: x[:, axis] < cut), (lambda x: x[:, axis] >= cut)


def _sin_net(inputs=2, outputs=1):
    return NetworkSpec(inputs, outputs, hidden_layers=4, hidden_width=50, activation=Activation.SIN)


def burgers() -> ProblemDef:
    dom = _box((-1, 1), (0, 1))
    rules = RuleSet(
        (
            _pde(1, "u_t + u*u_x - (0.01/pi)*u_xx", dom),
            RuleSpec(2, "IC", RuleKind.INITIAL, "u", dom.pin(1, 0), rhs="-sin(pi*x)"),
            RuleSpec(3, "LBC", RuleKind.BOUNDARY, "u", dom.pin(0, -1)),
            RuleSpec(4, "RBC", RuleKind.BOUNDARY, "u", dom.pin(0, 1)),
        ),
        ("x", "t"),
        ("u",),
    )
    tr, te = _time_cut(0.5)
    return ProblemDef(
        ProblemId.BURGERS, ("x", "t"), ("u",), dom, rules, _sin_net(), tr, te,
        ("t < 0.5", "t >= 0.5"), full_grid_rows=25_600, default_colloc=(200, 200),
        self_generated=False,
    )


def kdv() -> ProblemDef:
    dom = _box((-1, 1), (0, 1))
    rules = RuleSet(
        (
            _pde(1, "u_t + u*u_x + 0.0025*u_xxx", dom),
            RuleSpec(2, "IC", RuleKind.INITIAL, "u", dom.pin(1, 0), rhs="cos(pi*x)"),
            RuleSpec(3, "PBC", RuleKind.BOUNDARY, "u", dom.pin(0, -1), rhs="u_mirror",
                     mirror_axis=0, mirror_value=1.0),
        ),
        ("x", "t"),
        ("u",),
    )
    tr, te = _time_cut(0.5)
    return ProblemDef(
        ProblemId.KDV, ("x", "t"), ("u",), dom, rules, _sin_net(), tr, te,
        ("t < 0.5", "t >= 0.5"), full_grid_rows=102_912, self_generated=False,
    )


def klein_gordon() -> ProblemDef:
    dom = _box((-1, 1), (0, 3))
    rules = RuleSet(
        (
            _pde(1, "u_tt + 5*u - 0.5*u_xx", dom),
            RuleSpec(2, "IC", RuleKind.INITIAL, "u", dom.pin(1, 0),
                     rhs="exp(-20*x**2)*(sin(pi*x) + sin(2*pi*x))"),
            RuleSpec(3, "LBC", RuleKind.BOUNDARY, "u", dom.pin(0, -1)),
            RuleSpec(4, "RBC", RuleKind.BOUNDARY, "u", dom.pin(0, 1)),
        ),
        ("x", "t"),
        ("u",),
    )
    tr, te = _time_cut(1.5)
    return ProblemDef(
        ProblemId.KLEIN_GORDON, ("x", "t"), ("u",), dom, rules, _sin_net(), tr, te,
        ("t < 1.5", "t >= 1.5"), full_grid_rows=40_401, self_generated=False,
    )


def conv_diff() -> ProblemDef:
    dom = _box((0, 2), (0, 1))
    rules = RuleSet(
        (
            _pde(1, "u_t + u_x - 0.25*u_xx", dom),
            RuleSpec(2, "IC", RuleKind.INITIAL, "u", dom.pin(1, 0), rhs="sin(pi*x)*exp(-x)"),
            RuleSpec(3, "LBC", RuleKind.BOUNDARY, "u", dom.pin(0, 0)),
            RuleSpec(4, "RBC", RuleKind.BOUNDARY, "u", dom.pin(0, 2)),
        ),
        ("x", "t"),
        ("u",),
    )
    net = NetworkSpec(2, 1, hidden_layers=4, hidden_width=50, activation=Activation.TANH)
    tr, te = _time_cut(0.5)
    return ProblemDef(
        ProblemId.CONV_DIFF, ("x", "t"), ("u",), dom, rules, net, tr, te,
        ("t < 0.5", "t >= 0.5"), full_grid_rows=25_600,
    )


MULTIVAR_OUTER = _box((0, 2 * math.pi), (-math.pi, 2 * math.pi))
MULTIVAR_TEST_OUT = _box((math.pi, 2 * math.pi), (math.pi, 2 * math.pi))


def multivar(collocation: str = "outer") -> ProblemDef:
    base = _box((0, math.pi), (-math.pi, 0))
    if collocation not in ("outer", "inner"):
        raise ValueError("multivar collocation mode is 'outer' or 'inner'")
    cdom = MULTIVAR_OUTER if collocation == "outer" else base
    rules = RuleSet(
        (
            RuleSpec(1, "c", RuleKind.ALGEBRAIC, "c", cdom, rhs="abs(sin(a) - cos(b))"),
            RuleSpec(2, "d", RuleKind.ALGEBRAIC, "d", cdom, rhs="log((a - b)**2 + 1)"),
            RuleSpec(3, "e", RuleKind.ALGEBRAIC, "e", cdom, rhs="0.5*(1 + c**2)"),
            RuleSpec(4, "f", RuleKind.ALGEBRAIC, "f", cdom, rhs="exp(-e)"),
            RuleSpec(5, "e,f>0", RuleKind.INEQUALITY, "e; f", cdom),
        ),
        ("a", "b"),
        ("c", "d", "e", "f"),
    )
    net = NetworkSpec(2, 4, hidden_layers=2, hidden_width=50, activation=Activation.RELU)
    return ProblemDef(
        ProblemId.MULTIVAR, ("a", "b"), ("c", "d", "e", "f"), base, rules, net,
        base.contains, MULTIVAR_TEST_OUT.contains,
        ("a in [0,pi], b in [-pi,0]", "a in [pi,2pi], b in [pi,2pi]"),
        default_colloc=(64, 64),
    )


PDE2D_HOLE = _box((0.25, 0.75), (0.25, 0.75))


def pde2d() -> ProblemDef:
    dom = _box((0, 1), (0, 1))
    rules = RuleSet(
        (
            _pde(1, "u_xx - u_yyyy", dom, rhs="(2 - x**2)*exp(-y)"),
            RuleSpec(2, "u_yy(x,0)", RuleKind.BOUNDARY, "u_yy", dom.pin(1, 0), rhs="x**2"),
            RuleSpec(3, "u_yy(x,1)", RuleKind.BOUNDARY, "u_yy", dom.pin(1, 1), rhs="x**2*exp(-1)"),
            RuleSpec(4, "u(x,0)", RuleKind.BOUNDARY, "u", dom.pin(1, 0), rhs="x**2"),
            RuleSpec(5, "u(x,1)", RuleKind.BOUNDARY, "u", dom.pin(1, 1), rhs="x**2*exp(-1)"),
            RuleSpec(6, "u(0,y)", RuleKind.BOUNDARY, "u", dom.pin(0, 0)),
            RuleSpec(7, "u(1,y)", RuleKind.BOUNDARY, "u", dom.pin(0, 1), rhs="exp(-y)"),
        ),
        ("x", "y"),
        ("u",),
    )
    # Smooth activation: the fourth-order rule has no signal through ReLU.
    net = NetworkSpec(2, 1, hidden_layers=2, hidden_width=50, activation=Activation.TANH)
    return ProblemDef(
        ProblemId.PDE2D, ("x", "y"), ("u",), dom, rules, net,
        lambda x: ~PDE2D_HOLE.contains(x), PDE2D_HOLE.contains,
        ("outside x,y in [0.25,0.75]", "x,y in [0.25,0.75]"),
    )


_BUILDERS = {
    ProblemId.BURGERS: burgers,
    ProblemId.KDV: kdv,
    ProblemId.KLEIN_GORDON: klein_gordon,
    ProblemId.CONV_DIFF: conv_diff,
    ProblemId.MULTIVAR: multivar,
    ProblemId.PDE2D: pde2d,
}


def get_problem(problem_id, **kwargs) -> ProblemDef:
    try:
        pid = ProblemId(problem_id)
    except ValueError:
        raise DataError(
            f"unknown problem {problem_id!r}; choose from {[p.value for p in ProblemId]}"
        ) from None
    return _BUILDERS[pid](**kwargs)


# --------------------------------------------------------------------------
# reference data


def multivar_exact(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    c = np.abs(np.sin(a) - np.cos(b))
    d = np.log((a - b) ** 2 + 1)
    e = 0.5 * (1 + c**2)
    f = np.exp(-e)
    return np.stack([c, d, e, f], axis=-1)


def generate_multivar(grid=(100, 100), region: Region | None = None) -> Dataset:
    region = region or multivar().domain
    x = grid_points(region, grid)
    return Dataset(x, multivar_exact(x[:, 0], x[:, 1]), Source.ANALYTIC, ("a", "b"), ("c", "d", "e", "f"))


def pde2d_exact(x, y) -> np.ndarray:
    return np.asarray(x) ** 2 * np.exp(-np.asarray(y))


def generate_pde2d(grid=(100, 100)) -> Dataset:
    pts = grid_points(pde2d().domain, grid)
    return Dataset(pts, pde2d_exact(pts[:, 0], pts[:, 1])[:, None], Source.ANALYTIC, ("x", "y"), ("u",))


def _convdiff_ic(x):
    return np.sin(np.pi * x) * np.exp(-x)


def solve_convdiff_fd(space_points: int = 256, time_points: int = 100,
                      velocity: float = 1.0, diffusivity: float = 0.25,
                      length: float = 2.0, t_end: float = 1.0) -> Dataset:
    """Crank-Nicolson with central differences and zero Dirichlet walls.

    The IC slope at the walls is incompatible with fixed zero values, so the
    first few steps carry a thin corner layer; second-order convergence holds
    once that layer has diffused (t of order 0.1 and beyond).
    """
    if space_points < 3 or time_points < 2:
        raise DataError("need at least 3 space points and 2 time points")
    x = np.linspace(0.0, length, space_points)
    t = np.linspace(0.0, t_end, time_points)
    dx, dt = x[1] - x[0], t[1] - t[0]
    peclet = velocity * dx / diffusivity
    if peclet > 2.0:
        raise DataError(
            f"grid too coarse: cell Peclet number {peclet:.3g} > 2 gives oscillatory central "
            f"convection; use more than {int(np.ceil(velocity * length / (2 * diffusivity))) + 1} "
            "space points"
        )
    m = space_points - 2
    # interior operator L u = -v u_x + D u_xx
    lo = diffusivity / dx**2 + velocity / (2 * dx)
    di = -2 * diffusivity / dx**2
    up = diffusivity / dx**2 - velocity / (2 * dx)

    def implicit_matrix(theta_dt):
        ab = np.zeros((3, m))
        ab[0, 1:] = -theta_dt * up
        ab[1, :] = 1 - theta_dt * di
        ab[2, :-1] = -theta_dt * lo
        return ab

    def apply_l(w):
        out = di * w
        out[1:] += lo * w[:-1]
        out[:-1] += up * w[1:]
        return out

    cn = implicit_matrix(0.5 * dt)
    u = np.zeros((time_points, space_points))
    u[0] = _convdiff_ic(x)
    u[0, [0, -1]] = 0.0
    for n in range(time_points - 1):
        w = u[n, 1:-1]
        u[n + 1, 1:-1] = linalg.solve_banded((1, 1), cn, w + 0.5 * dt * apply_l(w))
    xx, tt = np.meshgrid(x, t, indexing="ij")
    pts = np.stack([xx.ravel(), tt.ravel()], axis=1)
    return Dataset(pts, u.T.ravel()[:, None], Source.FINITE_DIFFERENCE, ("x", "t"), ("u",))


def convdiff_series(x, t, modes: int = 200) -> np.ndarray:
    """Eigenfunction-expansion reference: u = exp(2x - t) w, w_t = w_xx / 4 on [0, 2]."""
    x, t = np.asarray(x, dtype=np.float64), np.asarray(t, dtype=np.float64)
    w = np.zeros(np.broadcast(x, t).shape)
    for n in range(1, modes + 1):
        k = n * np.pi / 2
        coef, _ = integrate.quad(
            lambda s: np.sin(np.pi * s) * np.exp(-3 * s) * np.sin(k * s), 0, 2, limit=200
        )
        w = w + coef * np.sin(k * x) * np.exp(-0.25 * k**2 * t)
    return np.exp(2 * x - t) * w


def ingest_dataset(path, problem: ProblemDef, full_grid: bool = False) -> Dataset:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        expected = [*problem.input_names, *problem.output_names]
        if [h.strip() for h in header] != expected:
            raise DataError(f"{path}: header {header} does not match {expected}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field in {row}") from None
    if not rows:
        raise DataError(f"{path} has a header but no rows")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values")
    k = len(problem.input_names)
    outside = ~problem.domain.contains(arr[:, :k])
    if outside.any():
        warnings.warn(f"{path}: {int(outside.sum())} rows lie outside the problem domain")
    if full_grid and problem.full_grid_rows is not None and len(arr) != problem.full_grid_rows:
        raise DataError(
            f"{path}: full-grid {problem.id.value} data must have {problem.full_grid_rows} rows, "
            f"got {len(arr)}"
        )
    return Dataset(arr[:, :k], arr[:, k:], Source.INGESTED, problem.input_names, problem.output_names)


def write_dataset(path, data: Dataset) -> Path:
    lines = [",".join([*data.input_names, *data.output_names])]
    for xi, yi in zip(data.inputs, data.outputs):
        lines.append(",".join(format(float(v), ".17g") for v in (*xi, *yi)))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def reference_dataset(problem: ProblemDef, mode: SplitMode = SplitMode.IN, path=None) -> Dataset:
    """Default data for a problem: generated when possible, else ingested from ``path``."""
    if path is not None:
        return ingest_dataset(path, problem)
    if problem.id is ProblemId.MULTIVAR:
        base = generate_multivar((100, 100))
        if SplitMode(mode) is SplitMode.OUT:
            return Dataset.concat([base, generate_multivar((100, 100), MULTIVAR_TEST_OUT)])
        return base
    if problem.id is ProblemId.PDE2D:
        return generate_pde2d((100, 100))
    if problem.id is ProblemId.CONV_DIFF:
        return solve_convdiff_fd(256, 100)
    raise DataError(
        f"{problem.id.value} data are ingested, not simulated; supply a CSV with header "
        f"{','.join([*problem.input_names, *problem.output_names])}"
    )


# --------------------------------------------------------------------------
# splits and noise


@dataclass(frozen=True)
class SplitSpec:
    mode: SplitMode = SplitMode.IN
    train_volume: int = 0
    test_volume: int = 10_000
    noise: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SplitMode(self.mode))
        if self.train_volume < 0 or self.test_volume < 1:
            raise ValueError("train_volume must be >= 0 and test_volume >= 1")
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")


def validation_size(train_volume: int) -> int:
    if train_volume == 0:
        return 0
    return max(10, int(math.ceil(0.1 * train_volume)))


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_indices(dataset: Dataset, spec: SplitSpec, problem: ProblemDef) -> SplitIndices:
    rng = np.random.default_rng(spec.rng_seed)
    n_val = validation_size(spec.train_volume)
    if spec.mode is SplitMode.IN:
        pool = rng.permutation(len(dataset))
        need = spec.train_volume + n_val
        if need >= len(pool):
            raise DataError(f"requested {need} training rows but only {len(pool)} exist")
        train, val = pool[: spec.train_volume], pool[spec.train_volume : need]
        rest = pool[need:]
        test = rest[: spec.test_volume]
    else:
        tr_mask = np.asarray(problem.train_region(dataset.inputs), dtype=bool)
        te_mask = np.asarray(problem.test_region(dataset.inputs), dtype=bool) & ~tr_mask
        tr_pool = rng.permutation(np.flatnonzero(tr_mask))
        te_pool = rng.permutation(np.flatnonzero(te_mask))
        need = spec.train_volume + n_val
        if need > len(tr_pool):
            raise DataError(f"requested {need} training rows but the train region has {len(tr_pool)}")
        if len(te_pool) == 0:
            raise DataError("the test region holds no rows")
        train, val = tr_pool[: spec.train_volume], tr_pool[spec.train_volume : need]
        test = te_pool[: spec.test_volume]
    return SplitIndices(np.sort(train), np.sort(val), np.sort(test))


def add_noise(train: Dataset, eps: float, seed: int) -> Dataset:
    """Per-channel Gaussian noise scaled by the channel std over ``train``."""
    if eps < 0:
        raise ValueError("noise level must be >= 0")
    if eps == 0 or len(train) == 0:
        return replace(train, outputs=train.clean_outputs.copy())
    rng = np.random.default_rng(seed)
    std = train.clean_outputs.std(axis=0)
    z = rng.standard_normal(train.clean_outputs.shape)
    return replace(train, outputs=train.clean_outputs + eps * std * z)


def split(dataset: Dataset, spec: SplitSpec, problem: ProblemDef):
    """Return ``(train, validation, test)``; noise touches the training outputs only."""
    idx = split_indices(dataset, spec, problem)
    train = add_noise(dataset.subset(idx.train), spec.noise, spec.rng_seed + 7919)
    return train, dataset.subset(idx.validation), dataset.subset(idx.test)


def split_manifest(spec: SplitSpec, problem: ProblemDef, idx: SplitIndices) -> dict:
    return {
        "problem": problem.id.value,
        "mode": spec.mode.value,
        "rng_seed": spec.rng_seed,
        "train_volume": spec.train_volume,
        "validation_volume": int(len(idx.validation)),
        "test_volume": int(len(idx.test)),
        "noise": spec.noise,
        "train_region": problem.out_regions_text[0] if spec.mode is SplitMode.OUT else "all",
        "test_region": problem.out_regions_text[1] if spec.mode is SplitMode.OUT else "all",
        "train_indices": idx.train.tolist(),
        "validation_indices": idx.validation.tolist(),
        "test_indices": idx.test.tolist(),
    }


def save_split_manifest(path, spec: SplitSpec, problem: ProblemDef, idx: SplitIndices) -> Path:
    return atomic_write_text(path, json.dumps(split_manifest(spec, problem, idx), indent=1) + "\n")
