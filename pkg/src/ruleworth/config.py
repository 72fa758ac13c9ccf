"""Strict JSON experiment configuration.

Every section and key is checked against the dataclasses below; anything
unrecognised aborts before compute.  See docs/config_schema.md.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ruleworth.autodiff import Activation, NetworkSpec
from ruleworth.errors import ConfigError
from ruleworth.importance import TAU_FLAG
from ruleworth.io import digest
from ruleworth.lab import Experiment, ResultCache, TrainProtocol, default_workers
from ruleworth.problems import ProblemId, SplitMode, SplitSpec


@dataclass(frozen=True)
class ProblemSection:
    id: str
    options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DataSection:
    path: str | None = None


@dataclass(frozen=True)
class RulesSection:
    weights: dict = field(default_factory=dict)
    drop: list = field(default_factory=list)
    perturb: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CollocationSection:
    shape: list | None = None
    face_points: int = 256


@dataclass(frozen=True)
class NetworkSection:
    hidden_layers: int | None = None
    hidden_width: int | None = None
    activation: str | None = None


@dataclass(frozen=True)
class ImportanceSection:
    method: str = "exact"
    samples: int = 64
    tau: float = TAU_FLAG


@dataclass(frozen=True)
class StudySection:
    volumes: list = field(default_factory=lambda: [0, 10, 100, 1000, 10000])
    noise_levels: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    colloc_sizes: list = field(default_factory=lambda: [10, 50, 100, 200, 500])
    perturbations: list = field(default_factory=list)
    max_iters: int = 10
    tune_method: str = "auto"


@dataclass(frozen=True)
class OutputSection:
    dir: str = "results"
    csv_only: bool = False


_SECTIONS = {
    "problem": ProblemSection,
    "data": DataSection,
    "split": SplitSpec,
    "protocol": TrainProtocol,
    "rules": RulesSection,
    "collocation": CollocationSection,
    "network": NetworkSection,
    "importance": ImportanceSection,
    "study": StudySection,
    "output": OutputSection,
}
_SCALARS = ("workers", "cache_dir")


def _strict(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSection
    data: DataSection = DataSection()
    split: SplitSpec = SplitSpec()
    protocol: TrainProtocol = TrainProtocol()
    rules: RulesSection = RulesSection()
    collocation: CollocationSection = CollocationSection()
    network: NetworkSection = NetworkSection()
    importance: ImportanceSection = ImportanceSection()
    study: StudySection = StudySection()
    output: OutputSection = OutputSection()
    workers: int | None = None
    cache_dir: str | None = None
    source: str | None = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, raw: dict, source: str | None = None) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        extra = sorted(set(raw) - set(_SECTIONS) - set(_SCALARS))
        if extra:
            raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
        if "problem" not in raw:
            raise ConfigError("missing required section 'problem'")
        kw: dict[str, Any] = {}
        for name, sec in _SECTIONS.items():
            if name in raw:
                kw[name] = _strict(sec, raw[name], name)
        for name in _SCALARS:
            if name in raw:
                kw[name] = raw[name]
        cfg = cls(**kw, source=source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(raw, str(path))

    def validate(self):
        try:
            ProblemId(self.problem.id)
        except ValueError:
            raise ConfigError(f"unknown problem {self.problem.id!r}") from None
        if self.importance.method not in ("exact", "monte_carlo"):
            raise ConfigError("importance.method must be 'exact' or 'monte_carlo'")
        if self.importance.samples < 1:
            raise ConfigError("importance.samples must be >= 1")
        if self.study.tune_method not in ("auto", "exact", "monte_carlo"):
            raise ConfigError("study.tune_method must be 'auto', 'exact' or 'monte_carlo'")
        if self.workers is not None and (not isinstance(self.workers, int) or self.workers < 1):
            raise ConfigError("workers must be a positive integer")
        if self.network.activation is not None:
            try:
                Activation(self.network.activation)
            except ValueError:
                raise ConfigError(f"unknown activation {self.network.activation!r}") from None
        for lo in (self.study.volumes, self.study.colloc_sizes):
            if any((not isinstance(v, int)) or v < 0 for v in lo):
                raise ConfigError("study volumes and collocation sizes must be non-negative integers")
        for p in self.study.perturbations:
            if not (isinstance(p, list) and len(p) == 2 and isinstance(p[1], str)):
                raise ConfigError("each study.perturbations entry is [rule, expression]")
        try:
            self.experiment().rules()
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid rule overrides: {exc}") from exc

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            d[name] = dataclasses.asdict(sec)
        d["split"]["mode"] = self.split.mode.value
        d["protocol"]["seeds"] = list(self.protocol.seeds)
        d["workers"] = self.workers
        d["cache_dir"] = self.cache_dir
        return d

    @property
    def config_hash(self) -> str:
        return digest(self.to_dict())

    def net_spec(self) -> NetworkSpec | None:
        n = self.network
        if n.hidden_layers is None and n.hidden_width is None and n.activation is None:
            return None
        from ruleworth.problems import get_problem

        base = get_problem(self.problem.id, **self.problem.options).default_net
        return dataclasses.replace(
            base,
            hidden_layers=n.hidden_layers if n.hidden_layers is not None else base.hidden_layers,
            hidden_width=n.hidden_width if n.hidden_width is not None else base.hidden_width,
            activation=Activation(n.activation) if n.activation else base.activation,
        )

    def experiment(self, **split_changes) -> Experiment:
        split = dataclasses.replace(self.split, **split_changes) if split_changes else self.split
        r = self.rules
        shape = tuple(self.collocation.shape) if self.collocation.shape else None
        return Experiment(
            problem_id=ProblemId(self.problem.id).value,
            split=split,
            protocol=self.protocol,
            colloc_shape=shape,
            face_points=self.collocation.face_points,
            net=self.net_spec(),
            weights=tuple(sorted((int(k), float(v)) for k, v in r.weights.items())),
            drop=tuple(int(k) for k in r.drop),
            perturb=tuple(sorted((int(k), str(v)) for k, v in r.perturb.items())),
            problem_options=tuple(sorted((k, str(v)) for k, v in self.problem.options.items())),
            data_path=self.data.path,
        )

    def resolved_workers(self, override: int | None = None) -> int:
        if override is not None:
            return override
        if os.environ.get("RULEWORTH_WORKERS"):
            return default_workers()
        return self.workers or default_workers()

    def cache(self, override: str | None = None) -> ResultCache:
        root = override or os.environ.get("RULEWORTH_CACHE_DIR") or self.cache_dir or ".ruleworth_cache"
        return ResultCache(root)

    @property
    def split_mode(self) -> SplitMode:
        return self.split.mode
