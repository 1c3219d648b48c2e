"""Built-in oracle checks run by ``fexpide validate``.

Each check computes the same quantity two independent ways (or against a
closed form) and reports pass/fail with the worst discrepancy seen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.cluster.hierarchy import fcluster, linkage

from fexpide.expression import (
    UNARY_OPS,
    Expression,
    GroupedLeafParams,
    LeafParams,
    OperatorSet,
    TreeTemplate,
    build_expression,
    evaluate,
)
from fexpide.grouping import cluster_weights, regroup_expression
from fexpide.integral import JumpSpec, expected_shift_taylor
from fexpide.optim import grad_loss
from fexpide.problems import ProblemSpec, builtin_problem, loss, residual, sample_points, test_points
from fexpide.search import Candidate, ControllerState, Pool, policy_gradient, pool_insert, sample_sequences, update_controller


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def true_expression(problem: ProblemSpec) -> Expression:
    """The closed-form solution written on the depth-2 tree as (+, f, 0)."""
    tpl = TreeTemplate.depth2()
    d = problem.d
    if problem.true_solution == "sum":
        op, w = UNARY_OPS.index("x"), 1.0
    elif problem.true_solution == "sqnorm_mean":
        op, w = UNARY_OPS.index("x^2"), 1.0 / d
    else:
        raise ValueError(f"problem {problem.name!r} has no closed-form solution")
    expr = build_expression(tpl, (0, op, 0), d, 0)
    alpha = np.full(d + 1, w)
    alpha[0] = 0.0
    return expr.with_leaves([LeafParams(alpha, 0.0), LeafParams(np.zeros(d + 1), 0.0)])


def check_residual_at_truth(seed: int = 0, n: int = 1000) -> CheckResult:
    worst = {}
    ok = True
    cases = [("ex1-1d", 1, 1e-6), ("ex2-1d", 1, 1e-6), ("ex1-hd", 10, 1e-10), ("ex2-hd", 10, 1e-10)]
    for name, d, tol in cases:
        p = builtin_problem(name, d)
        t, x = test_points(p, n, seed)
        r = float(np.max(np.abs(residual(p, true_expression(p), t, x))))
        worst[name] = r
        ok &= r <= tol
    return CheckResult("residual at the true solution", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def _random_expression(rng, d: int, grouped: bool) -> Expression:
    tpl = TreeTemplate.depth2() if rng.random() < 0.7 else TreeTemplate.depth3()
    opset = OperatorSet()
    ops = [int(rng.integers(len(opset.ops_for(k)))) for k in tpl.kinds]
    expr = build_expression(tpl, ops, d, int(rng.integers(2**31)))
    theta = expr.theta * 0.5 + rng.normal(0.0, 0.3, expr.n_params)
    expr = expr.with_theta(theta)
    if grouped:
        expr = regroup_expression(expr, 0.5, int(rng.integers(2**31)))
    return expr


def fd_gradient(problem, expr, batch, h: float = 1e-6) -> np.ndarray:
    theta = expr.theta
    g = np.empty_like(theta)
    for k in range(len(theta)):
        step = h * max(1.0, abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += step
        dn[k] -= step
        g[k] = (loss(problem, expr.with_theta(up), batch) - loss(problem, expr.with_theta(dn), batch)) / (2 * step)
    return g


def check_gradients(seed: int = 0, n_cases: int = 200, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    problems = [builtin_problem("ex1-1d"), builtin_problem("ex2-1d"), builtin_problem("ex1-hd", 3),
                builtin_problem("ex2-hd", 3)]
    batches = [sample_points(p, 48, 16, seed) for p in problems]
    worst, done = 0.0, 0
    while done < n_cases:
        k = int(rng.integers(len(problems)))
        p, b = problems[k], batches[k]
        expr = _random_expression(rng, p.d, grouped=bool(done % 2))
        value = loss(p, expr, b)
        if not np.isfinite(value) or value > 1e8:
            continue  # overflowing draws say nothing about derivative code
        ad = grad_loss(p, expr, b)
        fd = fd_gradient(p, expr, b)
        err = np.linalg.norm(ad - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, err)
        done += 1
    return CheckResult("parameter gradient vs central differences", worst <= tol, f"{n_cases} cases, worst relative {worst:.1e}")


def _hermite_expectation(expr, t, x, jump: JumpSpec, order: int = 4) -> float:
    """E[u(t, x + z)] with z ~ N(mu, sigma2 I) by a tensor Gauss-Hermite rule."""
    nodes, weights = hermegauss(order)
    weights = weights / weights.sum()
    d = len(x)
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    shifts = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(jump.sigma2) + jump.mu
    w = np.ones(1)
    for _ in range(d):
        w = np.multiply.outer(w, weights).ravel()
    vals = evaluate(expr, np.full(len(shifts), t), x[None, :] + shifts)
    return float(w @ vals)


def check_taylor_exact(seed: int = 0, n_cases: int = 30, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    names = ["0", "1", "x", "x^2"]
    opset = OperatorSet(unary_ops=tuple(names))
    worst = 0.0
    for case in range(n_cases):
        d = int(rng.integers(1, 4))
        # '*' of two affine leaves or '+'/'-' of quadratic leaves stays degree <= 2
        if case % 2:
            ops = (2, int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        else:
            ops = (int(rng.integers(0, 2)), int(rng.integers(0, 4)), int(rng.integers(0, 4)))
        expr = build_expression(TreeTemplate.depth2(), ops, d, int(rng.integers(2**31)), opset)
        expr = expr.with_theta(rng.normal(0.0, 1.0, expr.n_params))
        jump = JumpSpec(0.3, float(rng.uniform(-1, 1)), float(rng.uniform(0.01, 1.0)))
        t, x = float(rng.uniform()), rng.uniform(-1, 1, d)
        exact = _hermite_expectation(expr, t, x, jump)
        approx = expected_shift_taylor(expr, t, x, jump)
        worst = max(worst, abs(approx - exact) / max(abs(exact), 1e-300))
    return CheckResult("Taylor jump estimate on quadratics", worst <= tol, f"{n_cases} cases, worst relative {worst:.1e}")


def check_clustering(seed: int = 0, n_cases: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok, msgs = True, []
    for _ in range(n_cases):
        n = int(rng.integers(2, 40))
        a = rng.normal(0, 1, n) * rng.choice([0.01, 0.1, 1.0])
        etas = np.sort(rng.uniform(1e-4, 2.0, 6))
        counts = [int(cluster_weights(a, e).max()) + 1 for e in etas]
        if any(c2 > c1 for c1, c2 in zip(counts, counts[1:])):
            ok = False
            msgs.append("group count increased with eta")
        ref = fcluster(linkage(a[:, None], method="single"), t=etas[2], criterion="distance")
        ours = cluster_weights(a, etas[2])
        if not _same_partition(ours, ref):
            ok = False
            msgs.append("partition differs from scipy single linkage")
    # grouping equivalence: shared weights equal to the ungrouped values evaluate identically
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 8))
        expr = build_expression(TreeTemplate.depth2(), (int(rng.integers(3)), int(rng.integers(9)), int(rng.integers(9))),
                                d, int(rng.integers(2**31)))
        leaves = []
        for leaf in expr.leaves:
            assign = rng.integers(0, max(1, d // 2), d + 1)
            _, assign = np.unique(assign, return_inverse=True)
            leaves.append(GroupedLeafParams(assign, rng.uniform(-1, 1, assign.max() + 1), leaf.beta))
        grouped = expr.with_leaves(leaves)
        t, x = rng.uniform(size=20), rng.uniform(size=(20, d))
        worst = max(worst, float(np.max(np.abs(evaluate(grouped, t, x) - evaluate(grouped.ungrouped(), t, x)))))
    ok &= worst <= 1e-12
    detail = "; ".join(sorted(set(msgs))) or f"{n_cases} threshold sweeps, equivalence gap {worst:.1e}"
    return CheckResult("clustering monotonicity and grouping equivalence", ok, detail)


def _same_partition(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return all(len(set(b[a == g])) == 1 for g in set(a)) and len(set(a)) == len(set(b))


def _dummy(ops, score) -> Candidate:
    expr = build_expression(TreeTemplate.depth2(), ops, 1, 0)
    return Candidate(tuple(ops), score, 1.0 / score - 1.0 if score > 0 else np.inf, expr)


def check_pool(seed: int = 0, n_cases: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    pool = Pool(2)
    for ops, s in [((0, 2, 2), 0.3), ((0, 3, 2), 0.5), ((0, 4, 2), 0.4)]:
        pool = pool_insert(pool, _dummy(ops, s))
    ok = pool.scores() == [0.5, 0.4]
    for _ in range(n_cases):
        k = int(rng.integers(1, 6))
        pool, best = Pool(k), {}
        for _ in range(int(rng.integers(1, 25))):
            ops = (int(rng.integers(2)), int(rng.integers(3)), 2)
            s = float(rng.choice([0.1, 0.2, 0.5, 0.9, rng.uniform()]))
            pool = pool_insert(pool, _dummy(ops, s))
            ok &= pool.scores() == sorted(pool.scores(), reverse=True) and len(pool) <= k
            ok &= len({c.ops for c in pool.entries}) == len(pool)
            best[ops] = max(best.get(ops, 0.0), s)
        # the top score overall must always be retained
        ok &= pool.scores()[0] == max(best.values())
    return CheckResult("pool top-K semantics", bool(ok), f"{n_cases} random insert sequences")


def check_risk_seeking(seed: int = 0, n_cases: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    tpl = TreeTemplate.depth2()
    ok = True
    for _ in range(n_cases):
        ctrl = ControllerState.uniform(tpl, nu=float(rng.uniform(0.1, 0.9)))
        ctrl = ControllerState(tuple(rng.normal(0, 1, len(l)) for l in ctrl.logits), nu=ctrl.nu)
        seqs = sample_sequences(ctrl, tpl, 10, int(rng.integers(2**31)))
        scores = rng.uniform(size=10).round(2)
        thr = np.sort(scores)[::-1][int(np.ceil(ctrl.nu * 10)) - 1]
        g = policy_gradient(ctrl, list(zip(seqs, scores)))
        # swapping the operators of every below-threshold sequence must not matter
        moved = [s if sc >= thr else tuple((o + 1) % len(l) for o, l in zip(s, ctrl.logits)) for s, sc in zip(seqs, scores)]
        g2 = policy_gradient(ctrl, list(zip(moved, scores)))
        ok &= all(np.array_equal(a, b) for a, b in zip(g, g2))
        flat = [(s, 0.5) for s in seqs]
        ok &= all(not np.any(a) for a in policy_gradient(ctrl, flat))
    return CheckResult("no gradient from sequences below the quantile", bool(ok), f"{n_cases} random batches")


def check_bandit(seed: int = 0, updates: int = 200, lr: float = 1.0, nu: float = 0.95) -> CheckResult:
    tpl = TreeTemplate(("leaf",), ((),), name="single")
    ctrl = ControllerState((np.zeros(2),), learning_rate=lr, epsilon=0.0, nu=nu)
    for it in range(updates):
        seqs = sample_sequences(ctrl, tpl, 10, [seed, it])
        ctrl = update_controller(ctrl, [(s, 1.0 if s[0] == 0 else 0.0) for s in seqs])
    p = float(ctrl.probs()[0][0])
    return CheckResult("two-armed bandit concentrates", p >= 0.95, f"p(winner) = {p:.4f} after {updates} updates")


CHECKS = (
    check_residual_at_truth,
    check_gradients,
    check_taylor_exact,
    check_clustering,
    check_pool,
    check_risk_seeking,
    check_bandit,
)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [check(seed) for check in CHECKS]
