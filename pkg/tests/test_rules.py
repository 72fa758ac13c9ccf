import math

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ruleworth.problems import ProblemId, get_problem, multivar_exact
from ruleworth.rules import (
    Coalition,
    ExpressionError,
    Region,
    RuleKind,
    RuleSpec,
    Symbol,
    coalitions_containing,
    default_colloc_table,
    enumerate_coalitions,
    evaluate_expression,
    grid_points,
    relying_groups,
    resolve_symbol,
    rule_residual,
    traced_rule_loss,
)


class ExactField:
    """Stands in for a network: returns analytic derivatives keyed by multi-index."""

    def __init__(self, fn):
        self.fn = fn

    def derivatives(self, x, mis):
        out = {tuple(0 for _ in range(x.shape[1])): self.fn(x, (0,) * x.shape[1])}
        for mi in mis:
            out[tuple(mi)] = self.fn(x, tuple(mi))
        return out


def pde2d_derivative(x, mi):
    a, b = mi
    xs = [x[:, 0] ** 2, 2 * x[:, 0], 2 + 0 * x[:, 0]]
    px = xs[a] if a < 3 else 0 * x[:, 0]
    return jnp.asarray((px * (-1) ** b * jnp.exp(-x[:, 1]))[:, None])


def multivar_field(x, mi):
    assert sum(mi) == 0
    return jnp.asarray(multivar_exact(np.asarray(x[:, 0]), np.asarray(x[:, 1])))


@pytest.mark.parametrize(
    "pid, field", [(ProblemId.PDE2D, pde2d_derivative), (ProblemId.MULTIVAR, multivar_field)]
)
def test_exact_solution_satisfies_every_rule(pid, field):
    problem = get_problem(pid)
    rs = problem.rule_set
    table = default_colloc_table(rs, (9, 9), 7)
    for rule, colloc in zip(rs, table):
        x = jnp.asarray(colloc.points)
        loss = traced_rule_loss(rule, ExactField(field), x, rs.input_names, rs.output_names)
        assert float(loss) < 1e-24, rule.label


def test_perturbed_rule_is_violated_by_exact_solution():
    rs = get_problem(ProblemId.PDE2D).rule_set.perturb(6, "0.1")
    rule = rs[rs.position(6)]
    x = jnp.asarray(grid_points(rule.region, [11]))
    res = rule_residual(rule, ExactField(pde2d_derivative), x, rs.input_names, rs.output_names)
    np.testing.assert_allclose(np.asarray(res), -0.1)


def test_symbol_resolution():
    ins, outs = ("x", "y"), ("u",)
    assert resolve_symbol("u_xx", ins, outs) == ("field", Symbol(0, (2, 0)))
    assert resolve_symbol("u_xyy", ins, outs) == ("field", Symbol(0, (1, 2)))
    assert resolve_symbol("u_yyyy", ins, outs) == ("field", Symbol(0, (0, 4)))
    assert resolve_symbol("u_mirror", ins, outs) == ("field", Symbol(0, (0, 0), mirror=True))
    assert resolve_symbol("y", ins, outs) == ("input", 1)
    assert resolve_symbol("pi", ins, outs) == ("const", math.pi)
    # 'e' is an output of the multi-variable problem, not Euler's number
    assert resolve_symbol("e", ("a", "b"), ("c", "d", "e", "f")) == ("field", Symbol(2, (0, 0)))
    with pytest.raises(ExpressionError):
        resolve_symbol("e", ins, outs)
    with pytest.raises(ExpressionError):
        resolve_symbol("u_zz", ins, outs)


@pytest.mark.parametrize(
    "text",
    ["__import__('os')", "x.real", "[x]", "lambda: 1", "sin(x, y)", "open(x)", "'a'", "x if y else 1",
     "x +", "sin(x=1)"],
)
def test_unsafe_or_invalid_expressions_rejected(text):
    with pytest.raises(ExpressionError):
        evaluate_expression(text, ("x", "y"), ("u",), jnp.zeros((2, 2)), {})


def test_expression_values():
    x = jnp.asarray([[0.5, 2.0], [1.0, -1.0]])
    v = evaluate_expression("sqrt(abs(y)) * exp(-x) + pi", ("x", "y"), ("u",), x, {})
    want = np.sqrt(np.abs([2.0, -1.0])) * np.exp([-0.5, -1.0]) + np.pi
    np.testing.assert_allclose(np.asarray(v), want)
    c = evaluate_expression("3", ("x", "y"), ("u",), x, {})
    assert c.shape == (2,)


def test_inequality_loss_penalises_negative_part_only():
    rule = RuleSpec(1, "pos", RuleKind.INEQUALITY, "e; f", Region(((0, 1), (0, 1))))
    vals = {(0, 0): jnp.asarray([[0, 0, -2.0, 1.0], [0, 0, 3.0, -1.0]])}

    class Fixed:
        def derivatives(self, x, mis):
            return vals

    loss = traced_rule_loss(rule, Fixed(), jnp.zeros((2, 2)), ("a", "b"), ("c", "d", "e", "f"))
    assert float(loss) == pytest.approx((4.0 + 1.0) / 4)
    with pytest.raises(ExpressionError):
        rule.perturbed("1")


def test_rule_validation():
    box = Region(((0, 1),))
    with pytest.raises(ValueError):
        RuleSpec(1, "p", RuleKind.PDE, "u_x", box, scope="local")
    with pytest.raises(ValueError):
        RuleSpec(1, "b", RuleKind.BOUNDARY, "u", box.pin(0, 0), scope="global")
    with pytest.raises(ValueError):
        RuleSpec(1, "p", RuleKind.PDE, "u_x", box, weight=-1)
    with pytest.raises(ValueError):
        Region(((1, 0),))


def test_ruleset_edits():
    rs = get_problem(ProblemId.PDE2D).rule_set
    dropped = rs.drop(3)
    assert dropped.labels == [1, 2, 4, 5, 6, 7]
    assert rs.with_weights([2.0] * 7).weights.tolist() == [2.0] * 7
    assert rs.perturb(6, "0.1")[5].rhs == "0.1"
    with pytest.raises(KeyError):
        rs.drop(9)
    with pytest.raises(ExpressionError):
        rs.perturb(6, "import os")


def test_grid_points_on_faces():
    box = Region(((0, 2), (0, 1)))
    pts = grid_points(box, (3, 2))
    assert pts.shape == (6, 2) and pts[:, 0].max() == 2.0
    face = grid_points(box.pin(1, 0), (5,))
    assert face.shape == (5, 2) and np.all(face[:, 1] == 0)
    with pytest.raises(ValueError):
        grid_points(box, (3,))


@given(st.integers(1, 10), st.data())
def test_coalition_enumerators(n, data):
    rule = data.draw(st.integers(1, n))
    holding = coalitions_containing(rule, n)
    assert len(holding) == 2 ** (n - 1)
    groups = [relying_groups(rule, n, r) for r in range(n)]
    assert [len(g) for g in groups] == [math.comb(n - 1, r) for r in range(n)]
    assert sorted(c.mask for g in groups for c in g) == [c.mask for c in holding]
    for r, g in enumerate(groups):
        assert all(len(c) == r + 1 and (rule - 1) in c for c in g)


@given(st.integers(1, 12), st.data())
def test_coalition_algebra(n, data):
    mask = data.draw(st.integers(0, (1 << n) - 1))
    c = Coalition(mask, n)
    k = data.draw(st.integers(0, n - 1))
    assert c.with_(k).without(k) == c.without(k)
    assert Coalition.from_rules(c.rules(), n) == c
    assert len(c.bits) == n and c.bits.count("1") == len(c)
    assert str(c) == "{" + ",".join(map(str, c.rules())) + "}"


def test_coalition_guards():
    with pytest.raises(ValueError):
        Coalition(4, 2)
    with pytest.raises(ValueError):
        enumerate_coalitions(21)
    with pytest.raises(ValueError):
        relying_groups(1, 3, 3)
    assert [c.mask for c in enumerate_coalitions(2)] == [0, 1, 2, 3]
