import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage

from fexpide.expression import Expression, GroupedLeafParams, TreeTemplate, build_expression, evaluate
from fexpide.grouping import cluster_weights, regroup_expression
from fexpide.optim import score_from_loss
from fexpide.search import Candidate, ControllerState, Pool, policy_gradient, pool_insert

SETTINGS = settings(max_examples=60, deadline=None)
weights = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30).map(np.array)
etas = st.floats(1e-4, 5.0)


def n_groups(a):
    return int(a.max()) + 1


@SETTINGS
@given(weights, etas, etas)
def test_groups_monotone_in_eta(alpha, e1, e2):
    lo, hi = sorted((e1, e2))
    assert n_groups(cluster_weights(alpha, hi)) <= n_groups(cluster_weights(alpha, lo))


@SETTINGS
@given(weights, etas, st.randoms(use_true_random=False))
def test_permutation_equivariance(alpha, eta, rnd):
    perm = np.arange(len(alpha))
    rnd.shuffle(perm)
    a, b = cluster_weights(alpha, eta), cluster_weights(alpha[perm], eta)
    # same partition up to relabeling
    for i in range(len(alpha)):
        for j in range(len(alpha)):
            assert (a[perm[i]] == a[perm[j]]) == (b[i] == b[j])


@SETTINGS
@given(weights, etas)
def test_labels_by_first_occurrence(alpha, eta):
    a = cluster_weights(alpha, eta)
    firsts = [int(np.flatnonzero(a == g)[0]) for g in range(n_groups(a))]
    assert firsts == sorted(firsts) and set(a.tolist()) == set(range(n_groups(a)))


@SETTINGS
@given(weights)
def test_eta_extremes(alpha):
    spread = float(alpha.max() - alpha.min())
    assert n_groups(cluster_weights(alpha, spread + 1e-9)) == 1
    distinct = np.unique(alpha)
    if len(distinct) == len(alpha) and len(alpha) > 1:
        gap = float(np.min(np.diff(distinct)))
        if gap > 0:
            assert n_groups(cluster_weights(alpha, gap / 2)) == len(alpha)


@SETTINGS
@given(weights.filter(lambda a: len(a) > 1), etas)
def test_matches_scipy_single_linkage(alpha, eta):
    ref = fcluster(linkage(alpha[:, None], method="single"), t=eta, criterion="distance")
    ours = cluster_weights(alpha, eta)
    assert all((ref[i] == ref[j]) == (ours[i] == ours[j]) for i in range(len(alpha)) for j in range(len(alpha)))


@SETTINGS
@given(st.floats(allow_nan=True, allow_infinity=True))
def test_score_range(value):
    s = score_from_loss(value)
    assert 0.0 <= s <= 1.0
    if np.isfinite(value) and value >= 0:
        assert s == 1.0 / (1.0 + value)


_EXPRS = {}


def _dummy(ops, score):
    if ops not in _EXPRS:
        _EXPRS[ops] = build_expression(TreeTemplate.depth2(), ops, 1, 0)
    return Candidate(ops, score, 1.0 / score - 1.0, _EXPRS[ops])


inserts = st.lists(
    st.tuples(st.tuples(st.integers(0, 2), st.integers(0, 3), st.just(2)), st.floats(0.01, 1.0)), max_size=40
)


@SETTINGS
@given(st.integers(1, 6), inserts)
def test_pool_invariants(k, items):
    pool, best = Pool(k), {}
    for ops, s in items:
        pool = pool_insert(pool, _dummy(ops, s))
        best[ops] = max(best.get(ops, 0.0), s)
        scores = pool.scores()
        assert scores == sorted(scores, reverse=True)
        assert len(pool) == min(k, len(best))
        assert len({c.ops for c in pool.entries}) == len(pool)
        assert scores[0] == max(best.values())
        # every held entry carries its best score so far
        assert all(c.score == best[c.ops] for c in pool.entries)
    assert pool.scores() == sorted(best.values(), reverse=True)[:k]


@SETTINGS
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12), st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
def test_policy_gradient_rows_sum_to_zero(scores, nu, seed):
    rng = np.random.default_rng(seed)
    ctrl = ControllerState(tuple(rng.normal(size=n) for n in (3, 9, 9)), nu=nu)
    batch = [(tuple(int(rng.integers(len(l))) for l in ctrl.logits), s) for s in scores]
    for g in policy_gradient(ctrl, batch):
        assert abs(g.sum()) < 1e-12


@st.composite
def expressions(draw):
    depth = draw(st.sampled_from([2, 3]))
    template = TreeTemplate.from_depth(depth)
    dim = draw(st.integers(1, 4))
    ops = tuple(draw(st.integers(0, 2 if k == "binary" else 8)) for k in template.kinds)
    expr = build_expression(template, ops, dim, draw(st.integers(0, 1000)))
    theta = np.array(draw(st.lists(st.floats(-2, 2), min_size=expr.n_params, max_size=expr.n_params)))
    return expr.with_theta(theta)


@SETTINGS
@given(expressions())
def test_json_round_trip(expr):
    back = Expression.from_json(expr.to_json())
    assert back.ops == expr.ops and back.dim == expr.dim
    assert np.array_equal(back.theta, expr.theta)
    assert str(back) == str(expr)


@SETTINGS
@given(expressions(), st.floats(0.05, 2.0), st.integers(0, 100))
def test_grouping_equivalence(expr, eta, seed):
    grouped = regroup_expression(expr, eta, seed)
    assert grouped.ops == expr.ops and grouped.template == expr.template
    # copying the group values back into a flat layout changes nothing
    flat = grouped.ungrouped()
    rng = np.random.default_rng(seed)
    t, x = rng.uniform(size=8), rng.uniform(size=(8, expr.dim))
    np.testing.assert_allclose(evaluate(grouped, t, x), evaluate(flat, t, x), rtol=1e-13, atol=1e-13)
    back = Expression.from_json(grouped.to_json())
    assert back.grouped and all(
        np.array_equal(a.assignment, b.assignment) for a, b in zip(back.leaves, grouped.leaves)
        if isinstance(a, GroupedLeafParams)
    )
