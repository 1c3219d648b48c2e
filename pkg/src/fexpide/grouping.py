"""Parameter grouping: merge nearly equal leaf weights into shared ones."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from fexpide.expression import Expression, GroupedLeafParams
from fexpide.optim import OptimizerConfig, adam_on_problem, batch_objective, frozen_batch
from fexpide.problems import ProblemSpec


def default_eta(dim: int) -> float:
    return 1.0 / dim


def cluster_weights(alpha, eta: float) -> np.ndarray:
    """Single-linkage clustering of scalars cut at cophenetic distance ``eta``.

    For 1-D data single linkage merges exactly the neighbours (in sorted
    order) that are at most ``eta`` apart, so the clusters are the runs
    between gaps larger than ``eta``.  Ids are 0..g-1 in order of first
    occurrence.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    a = np.asarray(alpha, dtype=np.float64).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError("weights must be finite")
    if a.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(a, kind="stable")
    run = np.concatenate([[0], np.cumsum(np.diff(a[order]) > eta)])
    raw = np.empty_like(run)
    raw[order] = run
    _, first = np.unique(raw, return_index=True)
    # rank of each run's first index becomes its label
    relabel = np.argsort(np.argsort(first))
    return relabel[raw].astype(np.int64)


def regroup_expression(expr: Expression, eta: float, rng_seed: int, warm_start: bool = False) -> Expression:
    """Cluster every leaf's weights and rebuild the leaves with shared weights.

    Shared weights and leaf biases are redrawn from U[-1, 1] unless
    ``warm_start`` is set, in which case each group starts at the mean of its
    members and the bias is kept.  Internal node parameters are untouched.
    """
    rng = np.random.default_rng(rng_seed)
    leaves = []
    for leaf in expr.ungrouped().leaves:
        assignment = cluster_weights(leaf.alpha, eta)
        g = int(assignment.max()) + 1
        if warm_start:
            coeffs = np.array([leaf.alpha[assignment == k].mean() for k in range(g)])
            beta = leaf.beta
        else:
            coeffs = rng.uniform(-1.0, 1.0, g)
            beta = float(rng.uniform(-1.0, 1.0))
        leaves.append(GroupedLeafParams(assignment, coeffs, beta))
    return expr.with_leaves(leaves)


class RescoreResult(NamedTuple):
    expr: Expression
    loss: float
    accepted: bool


def group_rescore(
    problem: ProblemSpec,
    expr: Expression,
    cfg: OptimizerConfig,
    rng_seed: int,
    recorded_loss: float | None = None,
    eta: float | None = None,
    warm_start: bool = False,
) -> RescoreResult:
    """Regroup, run T3 Adam steps, and keep the result only if it is better.

    Both expressions are compared on one common batch.  When the grouped
    version does not improve, the original expression and ``recorded_loss``
    come back with ``accepted=False``.
    """
    eta = default_eta(problem.d) if eta is None else eta
    batch = frozen_batch(problem, cfg, rng_seed)
    before, _ = batch_objective(problem, expr, batch)(expr.theta)
    if recorded_loss is None:
        recorded_loss = before
    rejected = RescoreResult(expr, float(recorded_loss), False)
    grouped = regroup_expression(expr, eta, rng_seed, warm_start)
    grouped, trace = adam_on_problem(problem, grouped, cfg.T3, cfg.adam_lr_medium, cfg, rng_seed)
    if trace.failed:
        return rejected
    after, _ = batch_objective(problem, grouped, batch)(grouped.theta)
    if not np.isfinite(after) or not after < before:
        return rejected
    return RescoreResult(grouped, float(after), True)
