import json

import numpy as np
import pytest
import sympy

from fexpide.expression import (
    BINARY_OPS,
    UNARY_OPS,
    Expression,
    GroupedLeafParams,
    LeafParams,
    OperatorSet,
    StructureError,
    TreeTemplate,
    build_expression,
    derivatives,
    evaluate,
    to_string,
    variable_names,
)

D2 = TreeTemplate.depth2()
PLUS, MINUS, TIMES = 0, 1, 2
ZERO, ONE, X, X2, X3, X4, EXP, SIN, COS = range(9)


def linear_leaf(weights, beta=0.0):
    return LeafParams(np.asarray(weights, dtype=float), beta)


def sum_of_leaves(dim, left, right, op=PLUS, left_op=X, right_op=ZERO, scale=1.0, bias=0.0):
    return Expression(D2, (op, left_op, right_op), dim, (left, right), [scale], [bias])


def sqnorm_mean(dim):
    alpha = np.r_[0.0, np.full(dim, 1.0 / dim)]
    return sum_of_leaves(dim, linear_leaf(alpha), linear_leaf(np.zeros(dim + 1)), left_op=X2)


def fd_derivatives(expr, t, x, h=1e-5):
    """Central differences of evaluate(); an independent route to the jet."""
    d = expr.dim
    f = lambda tt, xx: evaluate(expr, tt, xx)
    dt = (f(t + h, x) - f(t - h, x)) / (2 * h)
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        grad[i] = (f(t, x + e) - f(t, x - e)) / (2 * h)
    hh = 1e-4
    for i in range(d):
        for j in range(d):
            ei, ej = np.zeros(d), np.zeros(d)
            ei[i], ej[j] = hh, hh
            hess[i, j] = (f(t, x + ei + ej) - f(t, x + ei - ej) - f(t, x - ei + ej) + f(t, x - ei - ej)) / (4 * hh * hh)
    return dt, grad, hess


class TestOperatorSet:
    def test_default_tables(self):
        assert BINARY_OPS == ("+", "-", "*")
        assert UNARY_OPS == ("0", "1", "x", "x^2", "x^3", "x^4", "exp", "sin", "cos")
        assert len(OperatorSet().unary_ops) == 9

    def test_unknown_tag_rejected(self):
        with pytest.raises(StructureError):
            OperatorSet(("+", "/"), UNARY_OPS)

    def test_subset_global_ids(self):
        ops = OperatorSet(("*",), ("x", "sin"))
        assert ops.global_id("binary", 0) == 2
        assert ops.global_id("leaf", 1) == UNARY_OPS.index("sin")


class TestTemplate:
    def test_depth2_shape(self):
        assert D2.kinds == ("binary", "leaf", "leaf")
        assert D2.depth == 2 and D2.leaves == (1, 2) and D2.internals == (0,)

    def test_depth3_shape(self):
        t = TreeTemplate.depth3()
        assert t.depth == 4 and len(t.leaves) == 3 and len(t.internals) == 3

    @pytest.mark.parametrize(
        "kinds, children",
        [
            (("binary", "leaf"), ((1,), ())),
            (("leaf", "leaf"), ((), ())),
            (("binary", "leaf", "leaf"), ((1, 1), (), ())),
            (("unary", "leaf"), ((0,), ())),
        ],
    )
    def test_invalid_trees(self, kinds, children):
        with pytest.raises(StructureError):
            TreeTemplate(kinds, children)

    def test_dict_round_trip(self):
        t = TreeTemplate.depth3()
        assert TreeTemplate.from_dict(json.loads(json.dumps(t.to_dict()))) == t


class TestBuild:
    def test_parameter_count_d1(self):
        e = build_expression(D2, (TIMES, X, X), 1, rng_seed=0)
        assert e.n_params == 8 and len(e.theta) == 8

    def test_alpha_length(self):
        e = build_expression(D2, (PLUS, X2, ONE), 10, rng_seed=3)
        assert all(len(leaf.alpha) == 11 for leaf in e.leaves)

    def test_seeded(self):
        a = build_expression(D2, (PLUS, X2, ONE), 4, rng_seed=5)
        b = build_expression(D2, (PLUS, X2, ONE), 4, rng_seed=5)
        c = build_expression(D2, (PLUS, X2, ONE), 4, rng_seed=6)
        assert np.array_equal(a.theta, b.theta)
        assert not np.array_equal(a.theta, c.theta)

    def test_weight_range(self):
        e = build_expression(D2, (PLUS, X, X), 50, rng_seed=1)
        alphas = np.concatenate([leaf.alpha for leaf in e.leaves])
        assert np.all(np.abs(alphas) <= 1.0)

    @pytest.mark.parametrize("ops", [(3, X, X), (PLUS, 9, X), (PLUS, X)])
    def test_bad_ops(self, ops):
        with pytest.raises(StructureError):
            build_expression(D2, ops, 1, 0)


class TestEvaluate:
    def test_identity_leaf(self):
        e = sum_of_leaves(1, linear_leaf([0.0, 1.0]), linear_leaf([0.0, 0.0]))
        assert evaluate(e, 0.5, [0.3]) == pytest.approx(0.3, abs=1e-15)

    def test_zero_leaf_gives_bias(self):
        e = sum_of_leaves(1, linear_leaf([7.0, -3.0], beta=0.25), linear_leaf([1.0, 1.0]), left_op=ZERO)
        assert evaluate(e, 0.9, [0.4]) == pytest.approx(0.25, abs=1e-15)

    def test_grouped_square_leaf(self):
        left = GroupedLeafParams(np.array([0, 0]), np.array([0.5]), 0.0)
        e = sum_of_leaves(1, left, linear_leaf([0.0, 0.0]), left_op=X2)
        assert evaluate(e, 1.0, [2.0]) == pytest.approx(2.5, abs=1e-14)

    @pytest.mark.parametrize("op, fn", [
        (X3, lambda z: z**3), (X4, lambda z: z**4), (EXP, np.exp), (SIN, np.sin), (COS, np.cos), (ONE, np.ones_like),
    ])
    def test_unary_tables(self, op, fn):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, 3)
        e = sum_of_leaves(2, linear_leaf(a, 0.1), linear_leaf(np.zeros(3)), left_op=op)
        t, x = 0.3, np.array([0.2, -0.7])
        expected = float(np.sum(a * fn(np.r_[t, x]))) + 0.1
        assert evaluate(e, t, x) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("op, combine", [
        (PLUS, lambda a, b: a + b), (MINUS, lambda a, b: a - b), (TIMES, lambda a, b: a * b),
    ])
    def test_binary_root(self, op, combine):
        left, right = linear_leaf([0.5, 1.0], 0.1), linear_leaf([-1.0, 2.0], 0.3)
        e = sum_of_leaves(1, left, right, op=op, right_op=SIN, scale=1.5, bias=-0.2)
        t, x = 0.4, 0.7
        a = 0.5 * t + 1.0 * x + 0.1
        b = -np.sin(t) + 2.0 * np.sin(x) + 0.3
        assert evaluate(e, t, [x]) == pytest.approx(1.5 * combine(a, b) - 0.2, rel=1e-14)

    def test_batch_matches_scalar(self):
        e = build_expression(TreeTemplate.depth3(), (TIMES, SIN, MINUS, X2, COS, EXP), 3, 7)
        rng = np.random.default_rng(1)
        t, x = rng.uniform(size=5), rng.uniform(size=(5, 3))
        batch = evaluate(e, t, x)
        assert batch.shape == (5,)
        for k in range(5):
            assert batch[k] == evaluate(e, t[k], x[k])

    def test_bitwise_repeatable(self):
        e = build_expression(D2, (TIMES, EXP, COS), 4, 2)
        x = np.linspace(0, 1, 4)
        assert evaluate(e, 0.3, x) == evaluate(e, 0.3, x)

    def test_overflow_is_not_an_exception(self):
        e = sum_of_leaves(1, linear_leaf([0.0, 1.0]), linear_leaf([0.0, 0.0]), left_op=EXP)
        assert not np.isfinite(evaluate(e, 0.0, [1000.0]))


class TestDerivatives:
    def test_identity(self):
        e = sum_of_leaves(1, linear_leaf([0.0, 1.0]), linear_leaf([0.0, 0.0]))
        for t, x in [(0.0, 0.3), (0.7, -2.0)]:
            jet = derivatives(e, t, [x], [(0, 0)])
            assert jet.value == pytest.approx(x)
            assert jet.dt == 0.0 and jet.grad.tolist() == [1.0] and jet.hess[(0, 0)] == 0.0

    def test_sqnorm_mean(self):
        d = 5
        e = sqnorm_mean(d)
        x = np.array([0.1, 0.5, 0.9, 0.3, 0.7])
        pairs = [(i, i) for i in range(d)] + [(0, 1), (2, 4)]
        jet = derivatives(e, 0.2, x, pairs)
        np.testing.assert_allclose(jet.grad, 2 * x / d, rtol=1e-14)
        for i in range(d):
            assert jet.hess[(i, i)] == pytest.approx(2.0 / d, rel=1e-14)
        assert jet.hess[(0, 1)] == 0.0 and jet.hess[(2, 4)] == 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        template = TreeTemplate.depth3() if seed % 2 else D2
        ops = [int(rng.integers(3)) if k != "leaf" and k != "unary" else int(rng.integers(2, 9))
               for k in template.kinds]
        e = build_expression(template, ops, 4, seed)
        t, x = float(rng.uniform()), rng.uniform(size=4)
        pairs = [(i, j) for i in range(4) for j in range(i, 4)]
        jet = derivatives(e, t, x, pairs)
        dt, grad, hess = fd_derivatives(e, t, x)
        scale = max(1.0, abs(jet.value))
        assert abs(jet.dt - dt) <= 1e-5 * scale
        np.testing.assert_allclose(jet.grad, grad, atol=1e-5 * scale)
        for (i, j), v in jet.hess.items():
            assert abs(v - hess[i, j]) <= 1e-5 * max(scale, abs(hess).max())

    def test_param_tangents_match_fd(self):
        e = build_expression(D2, (TIMES, SIN, X2), 2, 4)
        t, x = 0.3, np.array([0.4, 0.8])
        jet = derivatives(e, t, x, [(0, 1), (1, 1)], with_params=True)
        theta = e.theta
        h = 1e-6
        for k in range(e.n_params):
            up, dn = theta.copy(), theta.copy()
            up[k] += h
            dn[k] -= h
            ju = derivatives(e.with_theta(up), t, x, [(0, 1), (1, 1)])
            jd = derivatives(e.with_theta(dn), t, x, [(0, 1), (1, 1)])
            assert jet.param_tangents["value"][k] == pytest.approx((ju.value - jd.value) / (2 * h), abs=1e-7)
            np.testing.assert_allclose(jet.param_tangents["grad"][:, k], (ju.grad - jd.grad) / (2 * h), atol=1e-7)
            fd = (ju.hess[(0, 1)] - jd.hess[(0, 1)]) / (2 * h)
            assert jet.param_tangents["hess"][(0, 1)][k] == pytest.approx(fd, abs=1e-6)

    def test_bad_pair(self):
        with pytest.raises(StructureError):
            derivatives(sqnorm_mean(2), 0.0, [0.1, 0.2], [(0, 2)])


class TestParameters:
    def test_theta_round_trip(self):
        e = build_expression(TreeTemplate.depth3(), (PLUS, COS, TIMES, X, X2, ONE), 3, 11)
        theta = np.random.default_rng(0).normal(size=e.n_params)
        assert np.array_equal(e.with_theta(theta).theta, theta)

    def test_grouped_parameter_count(self):
        e = sqnorm_mean(6)
        left = GroupedLeafParams(np.array([0, 1, 1, 1, 1, 1, 1]), np.array([0.0, 1 / 6]), 0.0)
        g = e.with_leaves([left, e.leaves[1]])
        assert g.n_params == (2 + 1) + (7 + 1) + 2
        assert g.grouped and not e.grouped

    def test_ungrouped_equivalent(self):
        left = GroupedLeafParams(np.array([0, 1, 0]), np.array([0.3, -1.2]), 0.5)
        e = sum_of_leaves(2, left, linear_leaf([0.1, 0.2, 0.3]), op=TIMES, left_op=SIN, right_op=X2)
        x = np.array([[0.1, 0.9], [0.5, 0.5]])
        assert np.array_equal(evaluate(e, [0.2, 0.8], x), evaluate(e.ungrouped(), [0.2, 0.8], x))

    def test_bad_assignment(self):
        with pytest.raises(StructureError):
            GroupedLeafParams(np.array([0, 2]), np.array([1.0, 2.0]), 0.0)


class TestSerialization:
    @pytest.mark.parametrize("grouped", [False, True])
    def test_json_round_trip(self, grouped):
        e = build_expression(TreeTemplate.depth3(), (MINUS, EXP, PLUS, X, X3, COS), 3, 9)
        if grouped:
            e = e.with_leaves([GroupedLeafParams(np.array([0, 0, 1, 1]), np.array([0.1, 0.2]), 0.3)] + list(e.leaves[1:]))
        back = Expression.from_json(e.to_json())
        assert back.ops == e.ops and back.template == e.template and back.opset == e.opset
        assert np.array_equal(back.theta, e.theta)
        assert str(back) == str(e)

    def test_custom_opset_round_trip(self):
        opset = OperatorSet(("*", "+"), ("x", "cos"))
        e = build_expression(D2, (0, 1, 0), 2, 1, opset)
        back = Expression.from_dict(json.loads(json.dumps(e.to_dict())))
        assert back.op_names() == ["*", "cos", "x"]


class TestToString:
    def test_zero_expression(self):
        e = sum_of_leaves(1, linear_leaf([0.0, 0.0]), linear_leaf([0.0, 0.0]))
        assert to_string(e) == "0"

    def test_affine_solution_form(self):
        e = sum_of_leaves(1, linear_leaf([0.0, 0.9999997]), linear_leaf([0.0, 0.0], 0.0000837))
        assert to_string(e) == "0.9999997*x + 0.0000837"

    def test_grouped_parenthesized(self):
        left = GroupedLeafParams(np.array([0, 1, 1]), np.array([0.0, 0.5]), 0.0)
        e = sum_of_leaves(2, left, linear_leaf([0.0, 0.0, 0.0]), left_op=X)
        assert to_string(e) == "0.5*(x1 + x2)"

    def test_variable_names(self):
        assert variable_names(1) == ["t", "x"]
        assert variable_names(3) == ["t", "x1", "x2", "x3"]

    @pytest.mark.parametrize("seed", range(8))
    def test_sympy_reparse_matches_evaluate(self, seed):
        rng = np.random.default_rng(seed)
        template = TreeTemplate.depth3() if seed % 2 else D2
        ops = [int(rng.integers(3)) if k == "binary" else int(rng.integers(9)) for k in template.kinds]
        d = 1 + seed % 3
        e = build_expression(template, ops, d, seed)
        names = variable_names(d)
        symbols = sympy.symbols(names)
        fn = sympy.lambdify(symbols, sympy.sympify(to_string(e), locals=dict(zip(names, symbols))), "numpy")
        t, x = 0.37, rng.uniform(size=d)
        want = evaluate(e, t, x)
        # seven printed digits per coefficient
        assert float(fn(t, *x)) == pytest.approx(want, rel=1e-5, abs=1e-5)
