"""Coalition training: rule-free baseline, warm-started fine-tunes, cached sweeps.

One compiled training program serves every coalition of a rule set; the
coalition mask and rule weights are runtime arguments, and inactive rules are
skipped with ``lax.cond`` so they cost nothing.
"""

from __future__ import annotations

import concurrent.futures as cf
import functools
import json
import logging
import math
import multiprocessing
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from ruleworth.autodiff import (
    AdamState,
    NetworkSpec,
    NetworkState,
    Surrogate,
    adam_update,
    check_orders,
    init_network,
    load_checkpoint,
    save_checkpoint,
    unflatten,
)
from ruleworth.errors import TrainingError
from ruleworth.io import atomic_write_text, digest
from ruleworth.problems import (
    Dataset,
    ProblemDef,
    SplitSpec,
    get_problem,
    reference_dataset,
    split,
)
from ruleworth.rules import (
    CollocationSet,
    Coalition,
    RuleSet,
    default_colloc_table,
    enumerate_coalitions,
    traced_rule_loss,
)

log = logging.getLogger(__name__)

CACHE_FORMAT = 2


@dataclass(frozen=True)
class TrainProtocol:
    pretrain_epochs_max: int = 8000
    finetune_epochs_max: int = 4000
    plateau_patience: int = 500
    plateau_tol: float = 1e-3
    eval_every: int = 50
    seeds: tuple[int, ...] = (0,)
    lr: float = 1e-3
    exclude_failed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for name in ("pretrain_epochs_max", "finetune_epochs_max", "plateau_patience", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not (self.plateau_tol >= 0 and self.lr > 0):
            raise ValueError("plateau_tol must be >= 0 and lr > 0")

    def hash_fields(self) -> dict:
        d = asdict(self)
        d.pop("seeds")
        d.pop("exclude_failed")
        return d


@dataclass(frozen=True)
class CoalitionResult:
    mask: int
    n_rules: int
    seed: int
    test_mse: float
    channel_mse: tuple[float, ...]
    val_mse: float | None
    epochs_run: int
    config_hash: str
    failed: bool = False
    final_loss: float | None = None

    @property
    def coalition(self) -> Coalition:
        return Coalition(self.mask, self.n_rules)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mse"] = list(self.channel_mse)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CoalitionResult:
        return cls(**{**d, "channel_mse": tuple(d["channel_mse"])})


@dataclass
class Baseline:
    net: NetworkState
    opt: AdamState
    epochs_run: int = 0
    trace: list = field(default_factory=list, repr=False)


@dataclass
class TrainTrace:
    """Per-epoch composite and data losses of one run."""

    composite: list[float] = field(default_factory=list)
    data: list[float] = field(default_factory=list)


# --------------------------------------------------------------------------
# compiled trainer


def share_groups(rules) -> tuple[tuple[int, ...], ...]:
    """Positions of rules on the same region, which reuse one derivative pass.

    Mirrored rules keep their own group since they also evaluate elsewhere.
    """
    groups: dict = {}
    for k, r in enumerate(rules):
        key = (r.region.bounds, k) if r.mirror_axis is not None else (r.region.bounds,)
        groups.setdefault(key, []).append(k)
    return tuple(tuple(g) for g in groups.values())


class Trainer:
    """Compiled chunked Adam loop for one (network spec, rule structure)."""

    def __init__(self, spec: NetworkSpec, rules: RuleSet | None, eval_every: int):
        self.spec = spec
        self.rules = rules
        self.eval_every = eval_every
        inputs = rules.input_names if rules else ()
        outputs = rules.output_names if rules else ()
        rules = tuple(rules) if rules else ()
        for r in rules:
            own, mirror = r.needs(inputs, outputs)
            check_orders(spec, own | mirror)

        self.groups = share_groups(rules)

        def loss(flat, weights, mask, tx, ty, colloc):
            sur = Surrogate(spec, unflatten(spec, flat))
            if tx.shape[0] > 0:
                data = jnp.mean((sur.forward(tx) - ty) ** 2)
            else:
                data = jnp.zeros((), flat.dtype)
            total = data
            for group in self.groups:
                need = frozenset().union(*(rules[k].needs(inputs, outputs)[0] for k in group))

                def active(f, group=group, need=need):
                    s = Surrogate(spec, unflatten(spec, f))
                    x = colloc[group[0]]
                    fields = s.derivatives(x, need) if need else {}
                    out = jnp.zeros((), f.dtype)
                    for k in group:
                        term = traced_rule_loss(rules[k], s, x, inputs, outputs, fields)
                        out = out + jnp.where(mask[k], weights[k] * term, 0.0)
                    return out

                def inactive(f):
                    return jnp.zeros((), f.dtype)

                gate = mask[group[0]]
                for k in group[1:]:
                    gate = gate | mask[k]
                total = total + jax.lax.cond(gate, active, inactive, flat)
            return total, data

        grad_fn = jax.value_and_grad(loss, has_aux=True)

        def chunk(state, weights, mask, tx, ty, colloc, lr, n):
            def body(carry, _):
                p, m, v, step = carry
                (total, data), g = grad_fn(p, weights, mask, tx, ty, colloc)
                step = step + 1
                p, m, v = adam_update(p, m, v, step, g, lr, 0.9, 0.999, 1e-8)
                return (p, m, v, step), (total, data)

            return jax.lax.scan(body, state, None, length=n)

        self._chunk = jax.jit(chunk, static_argnums=7)
        self._loss = jax.jit(loss)

        def mse(flat, x, y):
            pred = Surrogate(spec, unflatten(spec, flat)).forward(x)
            return jnp.mean((pred - y) ** 2, axis=0)

        self._mse = jax.jit(mse)

    def channel_mse(self, params, data: Dataset) -> np.ndarray:
        return np.asarray(self._mse(jnp.asarray(params), data.inputs, data.clean_outputs))

    def composite(self, params, weights, mask, train: Dataset, colloc) -> tuple[float, float]:
        total, data = self._loss(jnp.asarray(params), jnp.asarray(weights), jnp.asarray(mask),
                                 train.inputs, train.outputs, colloc)
        return float(total), float(data)

    def train(self, net: NetworkState, opt: AdamState, weights, mask, train: Dataset,
              validation: Dataset | None, colloc, max_epochs: int, protocol: TrainProtocol,
              trace: TrainTrace | None = None):
        """Run until plateau or ``max_epochs``; returns (net, opt, epochs, failed)."""
        weights = jnp.asarray(weights, dtype=jnp.float64)
        mask = jnp.asarray(mask, dtype=bool)
        tx, ty = jnp.asarray(train.inputs), jnp.asarray(train.outputs)
        for group in self.groups:
            for k in group[1:]:
                if not np.array_equal(colloc[k], colloc[group[0]]):
                    raise ValueError(
                        f"rules at positions {group} share a region but got different points"
                    )
        colloc = tuple(jnp.asarray(c) for c in colloc)
        state = (jnp.asarray(net.params), jnp.asarray(opt.first_moment),
                 jnp.asarray(opt.second_moment), jnp.asarray(opt.step, dtype=jnp.int64))
        use_val = validation is not None and len(validation) > 0
        best, since, epochs, failed = math.inf, 0, 0, False
        while epochs < max_epochs:
            n = min(self.eval_every, max_epochs - epochs)
            new_state, (totals, datas) = self._chunk(state, weights, mask, tx, ty, colloc,
                                                     protocol.lr, n)
            totals = np.asarray(totals)
            if not (np.all(np.isfinite(totals)) and bool(jnp.all(jnp.isfinite(new_state[0])))):
                failed = True
                break
            state = new_state
            epochs += n
            if trace is not None:
                trace.composite.extend(totals.tolist())
                trace.data.extend(np.asarray(datas).tolist())
            if use_val:
                monitor = float(np.mean(self.channel_mse(state[0], validation)))
            else:
                monitor = float(totals[-1])
            if monitor < best * (1.0 - protocol.plateau_tol):
                best, since = monitor, 0
            else:
                since += n
                if since >= protocol.plateau_patience:
                    break
        p, m, v, step = state
        net = replace(net, params=np.asarray(p))
        opt = replace(opt, first_moment=np.asarray(m), second_moment=np.asarray(v),
                      step=int(step), lr=protocol.lr)
        return net, opt, epochs, failed


_TRAINERS: dict = {}


def get_trainer(spec: NetworkSpec, rules: RuleSet | None, eval_every: int) -> Trainer:
    """Compiled trainer for a rule structure; ``rules=None`` gives the data-only one."""
    if rules is not None:
        rules = rules.with_weights([1.0] * len(rules))
    key = (spec, rules, eval_every)
    if key not in _TRAINERS:
        _TRAINERS[key] = Trainer(spec, key[1], eval_every)
    return _TRAINERS[key]


def _colloc_arrays(colloc_table: Sequence[CollocationSet]) -> tuple:
    return tuple(np.asarray(c.points) for c in colloc_table)


# --------------------------------------------------------------------------
# protocol steps


def pretrain_baseline(problem: ProblemDef, train: Dataset, validation: Dataset | None,
                      protocol: TrainProtocol, seed: int, net_spec: NetworkSpec | None = None,
                      trace: TrainTrace | None = None) -> Baseline:
    """Data-only training; with no data the fresh initialisation is the baseline."""
    spec = net_spec or problem.default_net
    net = init_network(spec, seed)
    opt = AdamState.zeros(spec.n_params, lr=protocol.lr)
    if len(train) == 0:
        return Baseline(net, opt, 0)
    trainer = get_trainer(spec, None, protocol.eval_every)
    net, opt, epochs, failed = trainer.train(
        net, opt, np.zeros(0), np.zeros(0, dtype=bool), train, validation, (),
        protocol.pretrain_epochs_max, protocol, trace,
    )
    if failed:
        raise TrainingError(f"pre-training diverged after {epochs} epochs (seed {seed})")
    return Baseline(net, opt, epochs)


def finetune_coalition(baseline: Baseline, coalition: Coalition, rules: RuleSet,
                       colloc_table: Sequence[CollocationSet], train: Dataset,
                       validation: Dataset | None, test: Dataset, protocol: TrainProtocol,
                       seed: int, config_hash: str = "",
                       trace: TrainTrace | None = None) -> CoalitionResult:
    spec = baseline.net.spec
    trainer = get_trainer(spec, rules, protocol.eval_every)
    if coalition.n != len(rules):
        raise ValueError("coalition size does not match the rule set")
    has_val = validation is not None and len(validation) > 0

    def result(net, epochs, failed, final_loss):
        ch = trainer.channel_mse(net.params, test)
        val = float(np.mean(trainer.channel_mse(net.params, validation))) if has_val else None
        return CoalitionResult(
            coalition.mask, coalition.n, seed, float(np.mean(ch)), tuple(float(c) for c in ch),
            val, epochs, config_hash, failed, final_loss,
        )

    if coalition.mask == 0:
        return result(baseline.net, 0, False, None)
    mask = np.array([k in coalition for k in range(coalition.n)])
    colloc = _colloc_arrays(colloc_table)
    net, opt, epochs, failed = trainer.train(
        baseline.net.copy(), baseline.opt.copy(), rules.weights, mask, train, validation,
        colloc, protocol.finetune_epochs_max, protocol, trace,
    )
    final, _ = trainer.composite(net.params, rules.weights, mask, train, colloc)
    if failed:
        log.warning("coalition %s seed %d diverged after %d epochs", coalition, seed, epochs)
    return result(net, epochs, failed, final)


# --------------------------------------------------------------------------
# experiments, cache and sweeps


@dataclass(frozen=True)
class Experiment:
    """Everything that determines a coalition's MSE, apart from the seed."""

    problem_id: str
    split: SplitSpec = SplitSpec()
    protocol: TrainProtocol = TrainProtocol()
    colloc_shape: tuple[int, ...] | None = None
    face_points: int = 256
    net: NetworkSpec | None = None
    weights: tuple[tuple[int, float], ...] = ()
    drop: tuple[int, ...] = ()
    perturb: tuple[tuple[int, str], ...] = ()
    problem_options: tuple[tuple[str, str], ...] = ()
    data_path: str | None = None

    def problem(self) -> ProblemDef:
        return get_problem(self.problem_id, **dict(self.problem_options))

    def net_spec(self) -> NetworkSpec:
        return self.net or self.problem().default_net

    def rules(self) -> RuleSet:
        rules = self.problem().rule_set
        for index, expr in self.perturb:
            rules = rules.perturb(index, expr)
        for index, w in self.weights:
            k = rules.position(index)
            rules = rules.with_weights([w if j == k else r.weight for j, r in enumerate(rules)])
        for index in self.drop:
            rules = rules.drop(index)
        return rules

    def colloc_table(self) -> tuple[CollocationSet, ...]:
        shape = self.colloc_shape or self.problem().default_colloc
        return default_colloc_table(self.rules(), shape, self.face_points)

    def data_fingerprint(self) -> str | None:
        if self.data_path is None:
            return None
        import hashlib

        return hashlib.sha256(Path(self.data_path).read_bytes()).hexdigest()[:16]

    def hash_dict(self) -> dict:
        rules = self.rules()
        return {
            "format": CACHE_FORMAT,
            "problem": self.problem_id,
            "problem_options": [list(p) for p in self.problem_options],
            "split": {**asdict(self.split), "mode": self.split.mode.value},
            "protocol": self.protocol.hash_fields(),
            "net": self.net_spec().to_dict(),
            "colloc_shape": list(self.colloc_shape or self.problem().default_colloc),
            "face_points": self.face_points,
            "rules": [
                [r.index, r.kind.value, r.lhs, r.rhs, r.weight, [list(b) for b in r.region.bounds]]
                for r in rules
            ],
            "data": self.data_fingerprint(),
        }

    @functools.cached_property
    def config_hash(self) -> str:
        return digest(self.hash_dict())

    @functools.cached_property
    def baseline_hash(self) -> str:
        """Pre-training ignores the rules, so its key leaves them out."""
        d = self.hash_dict()
        for key in ("rules", "colloc_shape", "face_points", "problem_options"):
            d.pop(key)
        return digest(d)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("config_hash", None)
        state.pop("baseline_hash", None)
        return state

    def with_protocol(self, **changes) -> Experiment:
        return replace(self, protocol=replace(self.protocol, **changes))

    def datasets(self, seed: int):
        """(train, validation, test) for one seed; the split seed is offset by it."""
        problem = self.problem()
        data = reference_dataset(problem, self.split.mode, self.data_path)
        spec = replace(self.split, rng_seed=self.split.rng_seed + seed)
        return split(data, spec, problem)


@functools.lru_cache(maxsize=8)
def _datasets(exp: Experiment, seed: int):
    return exp.datasets(seed)


class ResultCache:
    """Content-addressed records: ``root/<problem>/<config_hash>/m<mask>_s<seed>.json``."""

    def __init__(self, root):
        self.root = Path(root)

    def _dir(self, exp: Experiment) -> Path:
        return self.root / exp.problem_id / exp.config_hash

    def path(self, exp: Experiment, mask: int, seed: int) -> Path:
        return self._dir(exp) / f"m{mask}_s{seed}.json"

    def baseline_path(self, exp: Experiment, seed: int) -> Path:
        return self.root / exp.problem_id / "baselines" / f"{exp.baseline_hash}_s{seed}.json"

    def get(self, exp: Experiment, mask: int, seed: int) -> CoalitionResult | None:
        p = self.path(exp, mask, seed)
        if not p.exists():
            return None
        return CoalitionResult.from_dict(json.loads(p.read_text()))

    def put(self, exp: Experiment, res: CoalitionResult) -> None:
        p = self.path(exp, res.mask, res.seed)
        text = json.dumps(res.to_dict(), sort_keys=True) + "\n"
        if p.exists():
            if p.read_text() != text:
                raise RuntimeError(f"cache conflict at {p}: duplicate key with a different value")
            return
        atomic_write_text(p, text)
        manifest = self._dir(exp) / "config.json"
        if not manifest.exists():
            atomic_write_text(manifest, json.dumps(exp.hash_dict(), indent=1) + "\n")

    def get_baseline(self, exp: Experiment, seed: int) -> Baseline | None:
        p = self.baseline_path(exp, seed)
        if not p.exists():
            return None
        net, opt = load_checkpoint(p)
        return Baseline(net, opt)

    def put_baseline(self, exp: Experiment, seed: int, base: Baseline) -> None:
        save_checkpoint(self.baseline_path(exp, seed), base.net, base.opt)


class SweepResult(list):
    """Coalition results sorted by (seed, mask), plus how many were trained."""

    def __init__(self, results: Iterable[CoalitionResult], trained_jobs: int = 0,
                 baseline_jobs: int = 0):
        super().__init__(sorted(results, key=lambda r: (r.seed, r.mask)))
        self.trained_jobs = trained_jobs
        self.baseline_jobs = baseline_jobs


def _baseline_job(exp: Experiment, seed: int) -> Baseline:
    train, val, _ = _datasets(exp, seed)
    return pretrain_baseline(exp.problem(), train, val, exp.protocol, seed, exp.net_spec())


def _finetune_job(exp: Experiment, seed: int, mask: int, baseline: Baseline) -> CoalitionResult:
    train, val, test = _datasets(exp, seed)
    rules = exp.rules()
    return finetune_coalition(
        baseline, Coalition(mask, len(rules)), rules, exp.colloc_table(), train, val, test,
        exp.protocol, seed, exp.config_hash,
    )


def default_workers() -> int:
    env = os.environ.get("RULEWORTH_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _executor(workers: int):
    ctx = multiprocessing.get_context("spawn")
    return cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx)


def _run_jobs(fn, arg_list: list, workers: int, on_done=None) -> list:
    """Run ``fn(*args)`` for each entry; exceptions are returned, not raised.

    ``on_done(k, result)`` fires as each job finishes, so results can be
    persisted before the whole batch completes.
    """
    out = [None] * len(arg_list)

    def done(k, value):
        out[k] = value
        if on_done is not None and not isinstance(value, Exception):
            on_done(k, value)

    if workers <= 1 or len(arg_list) <= 1:
        for k, args in enumerate(arg_list):
            try:
                value = fn(*args)
            except Exception as exc:  # noqa: BLE001 - isolated per job
                value = exc
            done(k, value)
        return out
    with _executor(min(workers, len(arg_list))) as pool:
        futures = {pool.submit(fn, *args): k for k, args in enumerate(arg_list)}
        for fut in cf.as_completed(futures):
            try:
                value = fut.result()
            except Exception as exc:  # noqa: BLE001
                value = exc
            done(futures[fut], value)
    return out


def run_coalition_sweep(exp: Experiment, coalitions: Sequence[Coalition] | None = None,
                        cache: ResultCache | None = None, workers: int = 1,
                        seeds: Sequence[int] | None = None) -> SweepResult:
    """One result per (coalition, seed), trained on demand and cached."""
    n = len(exp.rules())
    coalitions = list(coalitions) if coalitions is not None else enumerate_coalitions(n)
    seeds = tuple(seeds) if seeds is not None else exp.protocol.seeds
    found, todo = [], []
    for seed in seeds:
        for c in coalitions:
            hit = cache.get(exp, c.mask, seed) if cache else None
            if hit is not None:
                found.append(hit)
            else:
                todo.append((seed, c.mask))
    if not todo:
        return SweepResult(found)

    need_seeds = sorted({s for s, _ in todo})
    baselines, missing = {}, []
    for s in need_seeds:
        b = cache.get_baseline(exp, s) if cache else None
        if b is None:
            missing.append(s)
        else:
            baselines[s] = b
    def keep_baseline(k, b):
        if cache:
            cache.put_baseline(exp, missing[k], b)

    outcomes = _run_jobs(_baseline_job, [(exp, s) for s in missing], workers, keep_baseline)
    errors = []
    for s, b in zip(missing, outcomes):
        if isinstance(b, Exception):
            errors.append(b)
            continue
        baselines[s] = b

    def keep(k, res):
        if cache:
            cache.put(exp, res)

    jobs = [(exp, s, m, baselines[s]) for s, m in todo if s in baselines]
    outcomes = _run_jobs(_finetune_job, jobs, workers, keep)
    fresh = []
    for (_, s, m, _), res in zip(jobs, outcomes):
        if isinstance(res, Exception):
            log.error("job mask=%d seed=%d failed: %s", m, s, res)
            errors.append(res)
            continue
        fresh.append(res)
    out = SweepResult(found + fresh, trained_jobs=len(fresh), baseline_jobs=len(missing))
    if errors:
        err = TrainingError(f"{len(errors)} job(s) failed in sweep {exp.config_hash}: {errors[0]}")
        err.partial = out
        raise err from errors[0]
    return out
