"""Finite-difference check of the Taylor-mode input derivatives and of parameter gradients.

The reference network here is plain numpy and shares no code with the JAX
surrogate apart from the flat parameter layout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np

from ruleworth.autodiff import (
    Activation,
    DerivativeRequest,
    NetworkState,
    forward,
    init_network,
    input_derivative,
    loss_gradient,
)
from ruleworth.problems import ProblemId, get_problem

# Second-order accurate central stencils: offsets -> coefficients, scaled by h**-k.
STENCILS = {
    0: {0: 1.0},
    1: {-1: -0.5, 1: 0.5},
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
    3: {-2: -0.5, -1: 1.0, 1: -1.0, 2: 0.5},
    4: {-2: 1.0, -1: -4.0, 0: 6.0, 1: -4.0, 2: 1.0},
}
STEP = {1: 1e-4, 2: 1e-3, 3: 1e-2, 4: 2e-2}
TOL = {1: 1e-4, 2: 1e-4, 3: 1e-2, 4: 1e-2}
GRAD_TOL = 1e-4


def reference_forward(net: NetworkState, x: np.ndarray) -> np.ndarray:
    sizes = net.spec.layer_sizes
    p = np.asarray(net.params, dtype=np.float64)
    h = np.asarray(x, dtype=np.float64)
    off = 0
    n_layers = len(sizes) - 1
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = p[off : off + a * b].reshape(a, b)
        off += a * b
        bias = p[off : off + b]
        off += b
        h = h @ w + bias
        if k < n_layers - 1:
            act = net.spec.activation
            if act is Activation.TANH:
                h = np.tanh(h)
            elif act is Activation.SIN:
                h = np.sin(h)
            else:
                h = np.maximum(h, 0.0)
    return h


def fd_derivative(f, x: np.ndarray, multi_index, h: float) -> np.ndarray:
    """Tensor-product central difference of ``f`` at the rows of ``x``."""
    axes = [(j, k) for j, k in enumerate(multi_index) if k > 0]
    total = 0.0
    for combo in itertools.product(*(STENCILS[k].items() for _, k in axes)):
        shift = np.zeros(x.shape[1])
        coef = 1.0
        for (j, _), (o, c) in zip(axes, combo):
            shift[j] = o * h
            coef *= c
        total = total + coef * f(x + shift)
    return total / h ** sum(multi_index)


def multi_indices(dim: int, order: int):
    return [mi for mi in itertools.product(range(order + 1), repeat=dim) if sum(mi) == order]


def normwise_error(a: np.ndarray, ref: np.ndarray) -> float:
    denom = np.linalg.norm(ref)
    diff = np.linalg.norm(a - ref)
    return float(diff / denom) if denom > 0 else float(diff)


@dataclass(frozen=True)
class CheckRow:
    architecture: str
    quantity: str
    order: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _sample(problem, n, rng):
    lo = np.array([b[0] for b in problem.domain.bounds])
    hi = np.array([b[1] for b in problem.domain.bounds])
    return lo + (hi - lo) * rng.random((n, len(lo)))


def check_architecture(pid: ProblemId, points: int = 100, seed: int = 0) -> list[CheckRow]:
    problem = get_problem(pid)
    spec = problem.default_net
    net = init_network(spec, seed)
    rng = np.random.default_rng(seed)
    x = _sample(problem, points, rng)
    rows = []
    name = f"{pid.value}:{spec.activation.value}{spec.hidden_layers}x{spec.hidden_width}"
    ref_out = reference_forward(net, x)
    ad_out = forward(net, x)
    rows.append(CheckRow(name, "value", 0, normwise_error(ad_out, ref_out), 1e-12))
    for order in range(1, spec.activation.max_order + 1):
        worst = 0.0
        for mi in multi_indices(spec.input_dim, order):
            for c in range(spec.output_dim):
                ad = np.ravel(input_derivative(net, x, DerivativeRequest(mi, c)))
                fd = fd_derivative(lambda z: reference_forward(net, z)[:, c], x, mi, STEP[order])
                worst = max(worst, normwise_error(ad, fd))
        rows.append(CheckRow(name, "input derivative", order, worst, TOL[order]))
    rows.append(CheckRow(name, "parameter gradient", 1, gradient_error(net, x, rng), GRAD_TOL))
    return rows


def gradient_error(net: NetworkState, x: np.ndarray, rng, directions: int = 4,
                   h: float = 1e-5) -> float:
    """Directional derivatives of a data loss: reverse mode against central differences."""
    y = rng.standard_normal((x.shape[0], net.spec.output_dim))

    def ref_loss(params):
        return float(np.mean((reference_forward(NetworkState(net.spec, params), x) - y) ** 2))

    def loss(sur):
        return jnp.mean((sur.forward(jnp.asarray(x)) - y) ** 2)

    _, g = loss_gradient(net, loss)
    g = np.asarray(g)
    ad, fd = [], []
    for _ in range(directions):
        d = rng.standard_normal(net.params.shape)
        d /= np.linalg.norm(d)
        ad.append(g @ d)
        fd.append((ref_loss(net.params + h * d) - ref_loss(net.params - h * d)) / (2 * h))
    return normwise_error(np.array(ad), np.array(fd))


def validate_all(points: int = 100, seed: int = 0) -> list[CheckRow]:
    rows = []
    for pid in ProblemId:
        rows.extend(check_architecture(pid, points, seed))
    return rows
