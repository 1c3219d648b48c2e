import numpy as np
import pytest

from fexpide.expression import Expression, LeafParams, TreeTemplate, build_expression, evaluate
from fexpide.problems import (
    BUILTINS,
    ProblemError,
    builtin_problem,
    loss,
    loss_parts,
    make_problem,
    relative_error,
    residual,
    sample_points,
    true_values,
)

D2 = TreeTemplate.depth2()


def two_leaf(dim, left_w, left_op, left_beta=0.0, scale=1.0):
    zero = LeafParams(np.zeros(dim + 1), 0.0)
    return Expression(D2, (0, left_op, 0), dim, (LeafParams(np.asarray(left_w, float), left_beta), zero), [scale], [0.0])


def truth(problem):
    d = problem.d
    if problem.true_solution == "sum":
        return two_leaf(d, np.r_[0.0, np.ones(d)], 2)
    return two_leaf(d, np.r_[0.0, np.full(d, 1.0 / d)], 3)


def zero_expr(d):
    return two_leaf(d, np.zeros(d + 1), 0)


class TestBuiltins:
    def test_names(self):
        assert BUILTINS == ("ex1-1d", "ex2-1d", "ex1-hd", "ex2-hd")

    def test_true_solution_at_ones(self):
        p = builtin_problem("ex1-hd", 100)
        assert true_values(p, [0.0], np.ones((1, 100)))[0] == pytest.approx(1.0, rel=1e-15)

    def test_ex1_1d_data(self):
        p = builtin_problem("ex1-1d")
        assert p.rhs_const == 0.0 and p.rhs_lin == 0.0 and p.terminal == "sum"
        assert p.rule.method == "trapezoid" and p.rule.grid_points == 50
        assert (p.jump.lam, p.jump.mu, p.jump.sigma2) == (0.3, 0.4, 0.0625)

    def test_ex2_hd_rhs_constant(self):
        d = 25
        p = builtin_problem("ex2-hd", d)
        assert p.rhs_const == pytest.approx(0.3 * (1.0 + 1e-8) + (2 * d - 1) / d * 0.04, rel=1e-15)
        assert p.hess_pairs == tuple((i, i + 1) for i in range(d - 1))

    def test_unknown(self):
        with pytest.raises(ProblemError):
            builtin_problem("ex3", 2)

    def test_1d_only(self):
        with pytest.raises(ProblemError):
            builtin_problem("ex1-1d", 3)

    def test_taylor_rejected_for_multiplicative(self):
        with pytest.raises(ProblemError):
            builtin_problem("ex1-1d", integral="taylor")

    def test_hashable(self):
        # problems are static jit arguments
        assert hash(builtin_problem("ex1-hd", 4)) == hash(builtin_problem("ex1-hd", 4))


class TestSampling:
    def test_domain(self):
        p = builtin_problem("ex2-hd", 7)
        b = sample_points(p, 500, 100, 3)
        assert b.t.min() >= 0 and b.t.max() <= p.T
        assert b.x.min() >= 0 and b.x.max() <= 1 and b.x.shape == (500, 7)
        assert b.x_terminal.shape == (100, 7)

    def test_seeded(self):
        p = builtin_problem("ex1-hd", 3)
        a, b, c = (sample_points(p, 50, 10, s) for s in (1, 1, 2))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.t, b.t) and np.array_equal(a.x_terminal, b.x_terminal)
        assert not np.array_equal(a.x, c.x)

    def test_sizes(self):
        with pytest.raises(ProblemError):
            sample_points(builtin_problem("ex1-1d"), 0, 5, 0)


class TestResidual:
    @pytest.mark.parametrize("name, d, tol", [
        ("ex1-1d", 1, 1e-6), ("ex2-1d", 1, 1e-6), ("ex1-hd", 3, 1e-10), ("ex1-hd", 40, 1e-10),
        ("ex2-hd", 2, 1e-10), ("ex2-hd", 25, 1e-10),
    ])
    def test_truth(self, name, d, tol):
        p = builtin_problem(name, d)
        b = sample_points(p, 1000, 1, 11)
        r = residual(p, truth(p), b.t, b.x)
        assert np.max(np.abs(r)) <= tol

    def test_zero_expression_ex1_hd(self):
        p = builtin_problem("ex1-hd", 6)
        want = -(0.3 * (1.0 + 1e-4) + 0.09)
        assert residual(p, zero_expr(6), 0.4, np.full(6, 0.5)) == pytest.approx(want, rel=1e-14)

    def test_ex2_hd_needs_the_corrected_constant(self):
        # the truth has zero residual only with (2d - 1)/d theta^2 in the rhs
        d = 10
        p = builtin_problem("ex2-hd", d)
        r = residual(p, truth(p), 0.5, np.full(d, 0.5))
        assert abs(r) < 1e-12
        assert abs(r + 0.04 / d) > 1e-4

    def test_variance_override_keeps_truth(self):
        for s2 in (0.001, 0.01, 0.1, 1.0):
            p = builtin_problem("ex1-hd", 10, sigma2=s2)
            b = sample_points(p, 200, 1, 0)
            assert np.max(np.abs(residual(p, truth(p), b.t, b.x))) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(ProblemError):
            residual(builtin_problem("ex1-hd", 3), zero_expr(2), 0.0, [0.1, 0.2])


class TestLoss:
    def test_truth_small(self):
        p = builtin_problem("ex1-hd", 10)
        assert loss(p, truth(p), sample_points(p, 2000, 500, 0)) <= 1e-12

    def test_zero_expression_formula(self):
        p = builtin_problem("ex1-hd", 1)
        b = sample_points(p, 300, 200, 5)
        want = (0.3 * (1 + 1e-4) + 0.09) ** 2 + np.mean(b.x_terminal[:, 0] ** 4)
        assert loss(p, zero_expr(1), b) == pytest.approx(want, rel=1e-13)

    def test_decomposition(self):
        p = builtin_problem("ex2-hd", 4)
        e = build_expression(D2, (2, 7, 3), 4, 1)
        b = sample_points(p, 100, 50, 2)
        total, interior, terminal = loss_parts(p, e, b)
        assert interior >= 0 and terminal >= 0
        assert total == pytest.approx(interior + terminal, rel=1e-15)
        assert interior == pytest.approx(np.mean(residual(p, e, b.t, b.x) ** 2), rel=1e-12)
        gap = evaluate(e, np.ones(50), b.x_terminal) - true_values(p, None, b.x_terminal)
        assert terminal == pytest.approx(np.mean(gap**2), rel=1e-12)

    def test_terminal_only_empty(self):
        p = builtin_problem("ex1-hd", 2)
        b = sample_points(p, 40, 10, 1)
        e = build_expression(D2, (0, 3, 2), 2, 0)
        from fexpide.problems import SampleBatch

        alone = loss_parts(p, e, SampleBatch(b.t, b.x, np.zeros((0, 2))))
        assert alone[2] == 0.0 and alone[0] == pytest.approx(loss_parts(p, e, b)[1], rel=1e-15)

    def test_nonfinite_is_inf(self):
        p = builtin_problem("ex1-1d")
        e = two_leaf(1, [0.0, 1e200], 2)
        assert loss(p, e, sample_points(p, 10, 10, 0)) == np.inf


class TestRelativeError:
    def test_truth(self):
        p = builtin_problem("ex1-hd", 5)
        assert relative_error(truth(p), p) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("delta", [1e-6, 0.01, -0.3])
    def test_scaling(self, delta):
        p = builtin_problem("ex2-hd", 3)
        e = truth(p)
        scaled = e.with_theta(np.r_[e.theta[:-2], 1.0 + delta, 0.0])
        assert relative_error(scaled, p, n_test=1000, rng_seed=4) == pytest.approx(abs(delta), rel=1e-9)

    def test_no_truth(self):
        p = make_problem("custom", 1, terminal="sum")
        with pytest.raises(ProblemError):
            relative_error(zero_expr(1), p)


class TestCustom:
    def test_matches_builtin(self):
        ref = builtin_problem("ex1-hd", 3)
        p = make_problem("custom", 3, lam=0.3, mu=1.0, sigma2=1e-4, drift="linear", diffusion="scalar",
                         diffusion_coef=0.3, rhs_const=0.3 * (1 + 1e-4) + 0.09, terminal="sqnorm_mean",
                         true_solution="sqnorm_mean")
        b = sample_points(p, 50, 20, 0)
        e = build_expression(D2, (2, 3, 7), 3, 2)
        assert loss(p, e, b) == pytest.approx(loss(ref, e, b), rel=1e-14)

    def test_unknown_key(self):
        with pytest.raises(ProblemError):
            make_problem("custom", 1, volatility=2.0)
