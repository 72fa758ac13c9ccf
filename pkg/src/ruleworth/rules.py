"""Rules as weighted pointwise residual losses, and coalition bookkeeping.

A rule is written as ``lhs = rhs`` in a small expression language over the
problem's input names, output names and derivative symbols.  ``u_xx`` is the
second x-derivative of output ``u``; ``u_tyyy`` mixes orders freely (total
order <= 4).  ``<out>_mirror`` evaluates an output on the mirrored face,
which is how periodic conditions are stated.
"""

from __future__ import annotations

import ast
import enum
import functools
import itertools
import math
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import jax.numpy as jnp
import numpy as np

from ruleworth.autodiff import NetworkState, Surrogate, check_orders, forward, unflatten

MAX_RULES = 20


class RuleKind(str, enum.Enum):
    PDE = "pde"
    INITIAL = "initial"
    BOUNDARY = "boundary"
    ALGEBRAIC = "algebraic"
    INEQUALITY = "inequality"


class Scope(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


_DEFAULT_SCOPE = {
    RuleKind.PDE: Scope.GLOBAL,
    RuleKind.INITIAL: Scope.LOCAL,
    RuleKind.BOUNDARY: Scope.LOCAL,
    RuleKind.ALGEBRAIC: Scope.GLOBAL,
    RuleKind.INEQUALITY: Scope.GLOBAL,
}


# --------------------------------------------------------------------------
# expressions

_FUNCS = {
    "sin": jnp.sin,
    "cos": jnp.cos,
    "tan": jnp.tan,
    "tanh": jnp.tanh,
    "exp": jnp.exp,
    "log": jnp.log,
    "sqrt": jnp.sqrt,
    "abs": jnp.abs,
}
_CONSTS = {"pi": math.pi}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


class ExpressionError(ValueError):
    pass


@functools.lru_cache(maxsize=None)
def _parse(text: str):
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {text!r}: {exc.msg}") from None
    names = set()
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ExpressionError(f"unsupported syntax {type(node).__name__} in {text!r}")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ExpressionError(f"unknown function in {text!r}")
            if node.keywords or len(node.args) != 1:
                raise ExpressionError(f"functions take exactly one argument: {text!r}")
        elif isinstance(node, ast.Name) and node.id not in _FUNCS:
            names.add(node.id)
        elif isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ExpressionError(f"only numeric constants are allowed: {text!r}")
    return compile(tree, "<rule>", "eval"), frozenset(names)


@dataclass(frozen=True)
class Symbol:
    output: int
    multi_index: tuple[int, ...]
    mirror: bool = False


def resolve_symbol(name: str, inputs: Sequence[str], outputs: Sequence[str]):
    """Return ``('input', j)``, ``('const', v)`` or ``('field', Symbol)``."""
    if name in _CONSTS:
        return "const", _CONSTS[name]
    if name in inputs:
        return "input", list(inputs).index(name)
    if name in outputs:
        return "field", Symbol(list(outputs).index(name), (0,) * len(inputs))
    m = re.fullmatch(r"(\w+?)_(mirror|[A-Za-z]+)", name)
    if m and m.group(1) in outputs:
        out = list(outputs).index(m.group(1))
        if m.group(2) == "mirror":
            return "field", Symbol(out, (0,) * len(inputs), mirror=True)
        letters = m.group(2)
        if all(ch in inputs for ch in letters):
            mi = tuple(letters.count(v) for v in inputs)
            return "field", Symbol(out, mi)
    raise ExpressionError(f"unknown name {name!r} (inputs {list(inputs)}, outputs {list(outputs)})")


def expression_symbols(text: str, inputs, outputs) -> list:
    _, names = _parse(text)
    return [resolve_symbol(n, inputs, outputs) for n in sorted(names)]


def evaluate_expression(text: str, inputs, outputs, x, fields: Mapping, mirror_fields=None):
    """Evaluate ``text`` on points ``x`` given derivative arrays keyed by multi-index."""
    code, names = _parse(text)
    env = dict(_FUNCS)
    for name in names:
        kind, ref = resolve_symbol(name, inputs, outputs)
        if kind == "const":
            env[name] = ref
        elif kind == "input":
            env[name] = x[:, ref]
        else:
            source = mirror_fields if ref.mirror else fields
            if source is None:
                raise ExpressionError(f"{name!r} needs a mirrored face")
            env[name] = source[ref.multi_index][:, ref.output]
    value = eval(code, {"__builtins__": {}}, env)
    return value + jnp.zeros(x.shape[0], dtype=x.dtype)


# --------------------------------------------------------------------------
# regions and collocation


@dataclass(frozen=True)
class Region:
    """Axis-aligned box; an axis with ``lo == hi`` is pinned (a face or line)."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        for lo, hi in b:
            if not lo <= hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        object.__setattr__(self, "bounds", b)

    @property
    def free_axes(self) -> tuple[int, ...]:
        return tuple(j for j, (lo, hi) in enumerate(self.bounds) if hi > lo)

    @property
    def is_face(self) -> bool:
        return len(self.free_axes) < len(self.bounds)

    def contains(self, pts, atol: float = 1e-12) -> np.ndarray:
        pts = np.asarray(pts)
        ok = np.ones(len(pts), dtype=bool)
        for j, (lo, hi) in enumerate(self.bounds):
            ok &= (pts[:, j] >= lo - atol) & (pts[:, j] <= hi + atol)
        return ok

    def pin(self, axis: int, value: float) -> Region:
        b = list(self.bounds)
        b[axis] = (value, value)
        return Region(tuple(b))


class Layout(str, enum.Enum):
    FULL_GRID = "full_grid"
    FACE_GRID = "face_grid"


@dataclass(frozen=True)
class CollocationSet:
    points: np.ndarray = field(compare=False, repr=False)
    layout: Layout
    grid_shape: tuple[int, ...]

    def __len__(self):
        return len(self.points)


def grid_points(region: Region, shape: Sequence[int]) -> np.ndarray:
    """Tensor grid with endpoints; ``shape`` lists counts for the free axes."""
    free = region.free_axes
    if len(shape) != len(free):
        raise ValueError(f"grid shape {tuple(shape)} does not match {len(free)} free axes")
    if any(int(n) < 1 for n in shape):
        raise ValueError("grid counts must be >= 1")
    axes = []
    k = 0
    for j, (lo, hi) in enumerate(region.bounds):
        if j in free:
            axes.append(np.linspace(lo, hi, int(shape[k])))
            k += 1
        else:
            axes.append(np.array([lo]))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def make_collocation(region: Region, shape: Sequence[int]) -> CollocationSet:
    layout = Layout.FACE_GRID if region.is_face else Layout.FULL_GRID
    return CollocationSet(grid_points(region, shape), layout, tuple(int(n) for n in shape))


# --------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class RuleSpec:
    index: int
    name: str
    kind: RuleKind
    lhs: str
    region: Region
    rhs: str = "0"
    weight: float = 1.0
    scope: Scope | None = None
    mirror_axis: int | None = None
    mirror_value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if self.scope is None:
            object.__setattr__(self, "scope", _DEFAULT_SCOPE[self.kind])
        object.__setattr__(self, "scope", Scope(self.scope))
        if self.weight < 0 or not math.isfinite(self.weight):
            raise ValueError(f"rule weight must be finite and >= 0, got {self.weight}")
        if self.kind is RuleKind.PDE and self.scope is not Scope.GLOBAL:
            raise ValueError("PDE rules are global")
        if self.kind in (RuleKind.INITIAL, RuleKind.BOUNDARY) and self.scope is not Scope.LOCAL:
            raise ValueError("initial/boundary rules are local")

    @property
    def label(self) -> str:
        return f"rule {self.index} ({self.name})"

    def terms(self) -> list[str]:
        """Inequality rules hold several ``>= 0`` expressions separated by ';'."""
        return [t.strip() for t in self.lhs.split(";")]

    def needs(self, inputs, outputs) -> tuple[frozenset, frozenset]:
        """Multi-indices required on the rule's own points and on its mirror."""
        own, mirror = set(), set()
        texts = self.terms() + ([self.rhs] if self.kind is not RuleKind.INEQUALITY else [])
        for text in texts:
            for kind, ref in expression_symbols(text, inputs, outputs):
                if kind == "field":
                    (mirror if ref.mirror else own).add(ref.multi_index)
        return frozenset(own), frozenset(mirror)

    def perturbed(self, expression: str) -> RuleSpec:
        if self.kind is RuleKind.INEQUALITY:
            raise ExpressionError("inequality rules cannot be perturbed by a target expression")
        _parse(expression)
        return replace(self, rhs=expression)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[RuleSpec, ...]
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if not 1 <= len(self.rules) <= MAX_RULES:
            raise ValueError(f"need 1..{MAX_RULES} rules, got {len(self.rules)}")
        for r in self.rules:
            r.needs(self.input_names, self.output_names)

    def __len__(self):
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def __getitem__(self, k: int) -> RuleSpec:
        return self.rules[k]

    @property
    def weights(self) -> np.ndarray:
        return np.array([r.weight for r in self.rules])

    @property
    def labels(self) -> list[int]:
        return [r.index for r in self.rules]

    def position(self, index: int) -> int:
        for k, r in enumerate(self.rules):
            if r.index == index:
                return k
        raise KeyError(f"no rule with index {index}")

    def with_weights(self, weights: Sequence[float]) -> RuleSet:
        if len(weights) != len(self.rules):
            raise ValueError("one weight per rule required")
        return replace(
            self, rules=tuple(replace(r, weight=float(w)) for r, w in zip(self.rules, weights))
        )

    def drop(self, index: int) -> RuleSet:
        k = self.position(index)
        return replace(self, rules=self.rules[:k] + self.rules[k + 1 :])

    def perturb(self, index: int, expression: str) -> RuleSet:
        k = self.position(index)
        rules = list(self.rules)
        rules[k] = rules[k].perturbed(expression)
        return replace(self, rules=tuple(rules))


def rule_collocation(rule: RuleSpec, full_shape, face_points: int) -> CollocationSet:
    if rule.region.is_face:
        shape = [face_points] * len(rule.region.free_axes)
    else:
        shape = list(full_shape)
    return make_collocation(rule.region, shape)


def default_colloc_table(rules: RuleSet, full_shape, face_points: int = 256) -> tuple:
    return tuple(rule_collocation(r, full_shape, face_points) for r in rules)


def _mirror_points(rule: RuleSpec, x):
    return x.at[:, rule.mirror_axis].set(rule.mirror_value)


def rule_residual(rule: RuleSpec, surrogate: Surrogate, x, inputs, outputs, fields=None):
    """Residual at ``x``; ``fields`` may hold derivatives already computed there."""
    own, mirror = rule.needs(inputs, outputs)
    if fields is None:
        fields = surrogate.derivatives(x, own) if own else {}
    mirror_fields = None
    if mirror:
        if rule.mirror_axis is None:
            raise ExpressionError(f"{rule.label} uses a mirror symbol but defines no mirror")
        mirror_fields = surrogate.derivatives(_mirror_points(rule, x), mirror)
    if rule.kind is RuleKind.INEQUALITY:
        vals = [evaluate_expression(t, inputs, outputs, x, fields) for t in rule.terms()]
        return jnp.stack(vals, axis=1)
    lhs = evaluate_expression(rule.lhs, inputs, outputs, x, fields, mirror_fields)
    rhs = evaluate_expression(rule.rhs, inputs, outputs, x, fields, mirror_fields)
    return lhs - rhs


def traced_rule_loss(rule: RuleSpec, surrogate: Surrogate, x, inputs, outputs, fields=None):
    res = rule_residual(rule, surrogate, x, inputs, outputs, fields)
    if rule.kind is RuleKind.INEQUALITY:
        return jnp.mean(jnp.maximum(0.0, -res) ** 2)
    return jnp.mean(res**2)


def rule_loss(rule: RuleSpec, net: NetworkState, colloc: CollocationSet,
              inputs: Sequence[str], outputs: Sequence[str]) -> float:
    if len(colloc) == 0:
        raise ValueError("empty collocation set")
    own, mirror = rule.needs(inputs, outputs)
    check_orders(net.spec, own | mirror)
    sur = Surrogate(net.spec, unflatten(net.spec, jnp.asarray(net.params)))
    return float(traced_rule_loss(rule, sur, jnp.asarray(colloc.points), inputs, outputs))


def composite_loss(rules: RuleSet, coalition: Coalition, net: NetworkState,
                   colloc_table: Sequence[CollocationSet], train) -> float:
    """Data MSE plus the weighted losses of the rules active in ``coalition``."""
    if len(colloc_table) != len(rules):
        raise ValueError("colloc_table must hold one collocation set per rule")
    if coalition.n != len(rules):
        raise ValueError("coalition size does not match the rule set")
    total = 0.0
    if train is not None and len(train) > 0:
        pred = forward(net, train.inputs)
        total += float(np.mean((pred - train.outputs) ** 2))
    for k in coalition.members():
        r = rules[k]
        total += r.weight * rule_loss(r, net, colloc_table[k], rules.input_names, rules.output_names)
    return total


# --------------------------------------------------------------------------
# coalitions


@dataclass(frozen=True, order=True)
class Coalition:
    """Subset of rule positions ``0..n-1``; bit k set means position k is active."""

    mask: int
    n: int

    def __post_init__(self):
        if self.n < 0 or self.n > MAX_RULES:
            raise ValueError(f"N must be in 0..{MAX_RULES}")
        if self.mask < 0 or self.mask >> self.n:
            raise ValueError(f"mask {self.mask:b} has bits beyond N={self.n}")

    @classmethod
    def of(cls, members: Sequence[int], n: int) -> Coalition:
        mask = 0
        for k in members:
            mask |= 1 << k
        return cls(mask, n)

    @classmethod
    def from_rules(cls, rules: Sequence[int], n: int) -> Coalition:
        return cls.of([r - 1 for r in rules], n)

    def members(self) -> list[int]:
        """Active bit positions (0-based)."""
        return [k for k in range(self.n) if self.mask >> k & 1]

    def rules(self) -> list[int]:
        """Active rule numbers (1-based)."""
        return [k + 1 for k in self.members()]

    def __contains__(self, k: int) -> bool:
        return bool(self.mask >> k & 1)

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def without(self, k: int) -> Coalition:
        return Coalition(self.mask & ~(1 << k), self.n)

    def with_(self, k: int) -> Coalition:
        return Coalition(self.mask | (1 << k), self.n)

    @property
    def bits(self) -> str:
        """Rule 1 first, e.g. '101' = rules 1 and 3 of three."""
        return "".join("1" if k in self else "0" for k in range(self.n))

    def __str__(self):
        return "{" + ",".join(str(k + 1) for k in self.members()) + "}"


def _check_n(n: int):
    if not 0 <= n <= MAX_RULES:
        raise ValueError(f"N must be in 0..{MAX_RULES}, got {n}")


def enumerate_coalitions(n: int) -> list[Coalition]:
    _check_n(n)
    return [Coalition(m, n) for m in range(1 << n)]


def _check_rule(rule: int, n: int):
    _check_n(n)
    if not 1 <= rule <= n:
        raise ValueError(f"rule {rule} out of range for N={n}")


def coalitions_containing(rule: int, n: int) -> list[Coalition]:
    """All coalitions holding ``rule`` (numbered from 1)."""
    _check_rule(rule, n)
    bit = 1 << (rule - 1)
    return [Coalition(m, n) for m in range(1 << n) if m & bit]


def relying_groups(rule: int, n: int, r: int) -> list[Coalition]:
    """Coalitions holding ``rule`` plus exactly ``r`` other rules."""
    _check_rule(rule, n)
    if not 0 <= r <= n - 1:
        raise ValueError(f"r must be in 0..{n - 1}, got {r}")
    others = [k for k in range(n) if k != rule - 1]
    groups = [Coalition.of((rule - 1, *combo), n) for combo in itertools.combinations(others, r)]
    return sorted(groups)
