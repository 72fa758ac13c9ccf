"""Dense surrogate networks with exact input derivatives up to fourth order.

Input derivatives are obtained by pushing truncated multivariate Taylor
coefficients through every layer; parameter gradients come from reverse
accumulation (``jax.grad``) over the whole computation, so residual losses
that contain high-order derivatives are differentiated exactly.

Coefficients are stored normalised, ``c_alpha = d^alpha f / alpha!``, which
turns the product rule into a plain truncated Cauchy product.
"""

from __future__ import annotations

import enum
import functools
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from ruleworth.errors import DerivativeOrderError
from ruleworth.io import atomic_write_text

MAX_ORDER = 4

MultiIndex = tuple[int, ...]


class Activation(str, enum.Enum):
    SIN = "sin"
    TANH = "tanh"
    RELU = "relu"

    @property
    def max_order(self) -> int:
        return 1 if self is Activation.RELU else MAX_ORDER


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_width: int
    activation: Activation = Activation.TANH

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        for name in ("input_dim", "output_dim", "hidden_layers", "hidden_width"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *([self.hidden_width] * self.hidden_layers), self.output_dim)

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "activation": self.activation.value,
        }


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got shape {self.params.shape}"
            )

    def copy(self) -> NetworkState:
        return replace(self, params=self.params.copy())

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.spec, self.params)


@dataclass(frozen=True)
class DerivativeRequest:
    multi_index: MultiIndex
    output_index: int = 0

    def __post_init__(self):
        mi = tuple(int(k) for k in self.multi_index)
        if any(k < 0 for k in mi):
            raise ValueError(f"negative derivative order in {mi}")
        if sum(mi) > MAX_ORDER:
            raise DerivativeOrderError(f"total order {sum(mi)} exceeds {MAX_ORDER}")
        object.__setattr__(self, "multi_index", mi)

    @property
    def order(self) -> int:
        return sum(self.multi_index)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), **kwargs)

    def copy(self) -> AdamState:
        return replace(
            self,
            first_moment=self.first_moment.copy(),
            second_moment=self.second_moment.copy(),
        )


def unflatten(spec: NetworkSpec, flat) -> list:
    """Split a flat vector into per-layer ``(W, b)`` with ``W`` of shape (fan_in, fan_out)."""
    sizes = spec.layer_sizes
    out, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def init_network(spec: NetworkSpec, seed: int) -> NetworkState:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return NetworkState(spec, np.concatenate(chunks), rng_seed=seed)


# --------------------------------------------------------------------------
# truncated multivariate Taylor arithmetic


@dataclass(frozen=True)
class TaylorPlan:
    """Coefficient layout for a downward-closed set of multi-indices."""

    input_dim: int
    indices: tuple[MultiIndex, ...]
    # for each target coefficient: pairs (a, b) with indices[a] + indices[b] == target, b != 0
    pairs: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)
    max_order: int = 0

    def position(self, mi: MultiIndex) -> int:
        return self.indices.index(tuple(mi))


@functools.lru_cache(maxsize=None)
def taylor_plan(input_dim: int, requested: frozenset) -> TaylorPlan:
    closure = {tuple([0] * input_dim)}
    for mi in requested:
        if len(mi) != input_dim:
            raise ValueError(f"multi-index {mi} does not match input_dim={input_dim}")
        closure.update(itertools.product(*(range(k + 1) for k in mi)))
    indices = tuple(sorted(closure, key=lambda m: (sum(m), tuple(-k for k in m))))
    lookup = {m: i for i, m in enumerate(indices)}
    pairs = []
    for target in indices:
        row = []
        for b, mb in enumerate(indices):
            if b == 0:
                continue
            ma = tuple(t - k for t, k in zip(target, mb))
            if min(ma) >= 0 and ma in lookup:
                row.append((lookup[ma], b))
        pairs.append(tuple(row))
    max_order = max(sum(m) for m in indices)
    return TaylorPlan(input_dim, indices, tuple(pairs), max_order)


def _activation_derivatives(z, activation: Activation, order: int) -> list:
    if activation is Activation.SIN:
        s, c = jnp.sin(z), jnp.cos(z)
        return [s, c, -s, -c, s][: order + 1]
    if activation is Activation.TANH:
        t = jnp.tanh(z)
        s = 1.0 - t * t
        return [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0), 8.0 * t * s * (2.0 - 3.0 * t * t)][
            : order + 1
        ]
    if order > 1:
        raise DerivativeOrderError("ReLU supports input derivatives of order <= 1 only")
    return [jnp.maximum(z, 0.0), (z > 0).astype(z.dtype)][: order + 1]


def _taylor_activation(coeffs: list, plan: TaylorPlan, activation: Activation) -> list:
    # Horner in the perturbation h = z - z0, which has a zero constant term.
    m = plan.max_order
    derivs = _activation_derivatives(coeffs[0], activation, m)
    if m == 0:
        return [derivs[0]]
    poly = [derivs[m] / math.factorial(m)] + [None] * (len(coeffs) - 1)
    for k in range(m - 1, -1, -1):
        new = []
        for row in plan.pairs:
            acc = None
            for a, b in row:
                if poly[a] is None:
                    continue
                term = poly[a] * coeffs[b]
                acc = term if acc is None else acc + term
            new.append(acc)
        const = derivs[k] / math.factorial(k)
        new[0] = const if new[0] is None else new[0] + const
        poly = new
    return [c if c is not None else jnp.zeros_like(coeffs[0]) for c in poly]


def taylor_forward(layers: Sequence, x, plan: TaylorPlan, activation: Activation) -> list:
    """Normalised Taylor coefficients of every output, one ``(B, out)`` array per index."""
    x = jnp.asarray(x)
    coeffs = [x]
    for mi in plan.indices[1:]:
        if sum(mi) == 1:
            coeffs.append(jnp.broadcast_to(jnp.asarray(mi, dtype=x.dtype), x.shape))
        else:
            coeffs.append(jnp.zeros_like(x))
    n_layers = len(layers)
    for depth, (w, b) in enumerate(layers):
        coeffs = [c @ w for c in coeffs]
        coeffs[0] = coeffs[0] + b
        if depth < n_layers - 1:
            coeffs = _taylor_activation(coeffs, plan, activation)
    return coeffs


def _plain_forward(layers: Sequence, x, activation: Activation):
    h = jnp.asarray(x)
    for depth, (w, b) in enumerate(layers):
        h = h @ w + b
        if depth < len(layers) - 1:
            h = _activation_derivatives(h, activation, 0)[0]
    return h


class Surrogate:
    """Traceable functional view of a network, handed to loss builders.

    Every method is pure in ``(layers, x)`` and safe to use inside ``jax.grad``.
    """

    def __init__(self, spec: NetworkSpec, layers: Sequence):
        self.spec = spec
        self.layers = layers

    def forward(self, x):
        return _plain_forward(self.layers, x, self.spec.activation)

    def derivatives(self, x, multi_indices: Iterable[MultiIndex]) -> dict:
        """Map each multi-index (and the zero index) to ``(B, out)`` derivative arrays."""
        requested = frozenset(tuple(m) for m in multi_indices)
        check_orders(self.spec, requested)
        plan = taylor_plan(self.spec.input_dim, requested)
        coeffs = taylor_forward(self.layers, x, plan, self.spec.activation)
        out = {}
        for mi, c in zip(plan.indices, coeffs):
            scale = math.prod(math.factorial(k) for k in mi)
            out[mi] = c * scale if scale != 1 else c
        return out

    def derivative(self, x, req: DerivativeRequest):
        return self.derivatives(x, [req.multi_index])[req.multi_index][:, req.output_index]


def check_orders(spec: NetworkSpec, multi_indices: Iterable[MultiIndex]) -> None:
    for mi in multi_indices:
        order = sum(mi)
        if order > MAX_ORDER:
            raise DerivativeOrderError(f"total order {order} exceeds {MAX_ORDER}")
        if order > spec.activation.max_order:
            raise DerivativeOrderError(
                f"{spec.activation.value} activation cannot provide order-{order} derivatives"
            )


def _check_points(spec: NetworkSpec, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, spec.input_dim) if spec.input_dim > 1 else pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != spec.input_dim:
        raise ValueError(f"points must have shape (B, {spec.input_dim}), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite input point")
    return pts


def forward(net: NetworkState, points) -> np.ndarray:
    pts = _check_points(net.spec, points)
    return np.asarray(_jit_forward(net.spec, jnp.asarray(net.params), pts))


def input_derivative(net: NetworkState, points, req: DerivativeRequest) -> np.ndarray:
    pts = _check_points(net.spec, points)
    if len(req.multi_index) != net.spec.input_dim:
        raise ValueError("multi-index length must equal input_dim")
    if not 0 <= req.output_index < net.spec.output_dim:
        raise ValueError(f"output_index {req.output_index} out of range")
    check_orders(net.spec, [req.multi_index])
    return np.asarray(_jit_derivative(net.spec, req, jnp.asarray(net.params), pts))


@functools.partial(jax.jit, static_argnums=0)
def _jit_forward(spec, flat, pts):
    return Surrogate(spec, unflatten(spec, flat)).forward(pts)


@functools.partial(jax.jit, static_argnums=(0, 1))
def _jit_derivative(spec, req, flat, pts):
    return Surrogate(spec, unflatten(spec, flat)).derivative(pts, req)


def loss_gradient(
    net: NetworkState, loss: Callable[[Surrogate], object]
) -> tuple[float, np.ndarray]:
    """Value and parameter gradient of ``loss(surrogate)``."""

    def scalar(flat):
        return loss(Surrogate(net.spec, unflatten(net.spec, flat)))

    value, grad = jax.value_and_grad(scalar)(jnp.asarray(net.params))
    value = float(value)
    if not math.isfinite(value):
        raise FloatingPointError(f"loss is not finite: {value}")
    return value, np.asarray(grad)


# --------------------------------------------------------------------------
# Adam


def adam_update(params, m, v, step, grad, lr, beta1, beta2, eps_hat):
    """One bias-corrected Adam update; ``step`` is the post-increment count."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    params = params - lr * m_hat / (jnp.sqrt(v_hat) + eps_hat)
    return params, m, v


def adam_step(
    net: NetworkState, opt: AdamState, gradient
) -> tuple[NetworkState, AdamState]:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != net.params.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {net.params.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entry")
    step = opt.step + 1
    p, m, v = adam_update(
        jnp.asarray(net.params),
        jnp.asarray(opt.first_moment),
        jnp.asarray(opt.second_moment),
        step,
        jnp.asarray(g),
        opt.lr,
        opt.beta1,
        opt.beta2,
        opt.eps_hat,
    )
    new_opt = replace(opt, first_moment=np.asarray(m), second_moment=np.asarray(v), step=step)
    return replace(net, params=np.asarray(p)), new_opt


# --------------------------------------------------------------------------
# checkpoints


def _fmt(values: np.ndarray) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in values) + "]"


def save_checkpoint(path, net: NetworkState, opt: AdamState | None = None) -> Path:
    spec = json.dumps(net.spec.to_dict())
    parts = [
        "{",
        f'  "spec": {spec},',
        f'  "rng_seed": {int(net.rng_seed)},',
        f'  "parameters": {_fmt(net.params)}',
    ]
    if opt is not None:
        parts[-1] += ","
        hyper = json.dumps(
            {"step": opt.step, "lr": opt.lr, "beta1": opt.beta1,
             "beta2": opt.beta2, "eps_hat": opt.eps_hat}
        )
        parts += [
            f'  "adam": {hyper},',
            f'  "first_moment": {_fmt(opt.first_moment)},',
            f'  "second_moment": {_fmt(opt.second_moment)}',
        ]
    parts.append("}")
    return atomic_write_text(path, "\n".join(parts) + "\n")


def load_checkpoint(path) -> tuple[NetworkState, AdamState | None]:
    doc = json.loads(Path(path).read_text())
    spec = NetworkSpec(**doc["spec"])
    net = NetworkState(spec, np.array(doc["parameters"], dtype=np.float64), doc["rng_seed"])
    opt = None
    if "adam" in doc:
        opt = AdamState(
            np.array(doc["first_moment"], dtype=np.float64),
            np.array(doc["second_moment"], dtype=np.float64),
            **doc["adam"],
        )
    return net, opt
