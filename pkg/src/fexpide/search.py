"""Operator-sequence search with a risk-seeking policy gradient.

A tabular controller holds one logit vector per tree node.  Each search
iteration samples sequences, scores them by coarse parameter tuning,
regroups the best one, updates the controller from the top of the score
distribution and keeps the best sequences in a bounded pool.  ``solve``
then fine-tunes every pooled candidate.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from fexpide.expression import Expression, OperatorSet, TreeTemplate
from fexpide.grouping import default_eta, group_rescore
from fexpide.optim import LossTrace, OptimizerConfig, ScoreResult, finetune, score_from_loss, score_sequence
from fexpide.problems import ProblemSpec, loss, relative_error, sample_points

OpSeq = tuple[int, ...]


# -- controller -------------------------------------------------------------


@dataclass(frozen=True)
class ControllerState:
    logits: tuple[np.ndarray, ...]
    learning_rate: float = 0.01
    epsilon: float = 0.1
    nu: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "logits", tuple(np.asarray(l, dtype=np.float64) for l in self.logits))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 < self.nu < 1.0:
            raise ValueError("nu must lie in (0, 1)")

    @classmethod
    def uniform(cls, template: TreeTemplate, opset: OperatorSet | None = None, **kw) -> "ControllerState":
        opset = opset or OperatorSet()
        return cls(tuple(np.zeros(len(opset.ops_for(k))) for k in template.kinds), **kw)

    def probs(self) -> list[np.ndarray]:
        out = []
        for l in self.logits:
            e = np.exp(l - l.max())
            out.append(e / e.sum())
        return out


def sample_sequences(ctrl: ControllerState, template: TreeTemplate, n: int, rng_seed) -> list[OpSeq]:
    """n sequences; each node is uniform with probability epsilon, else softmax."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if len(ctrl.logits) != template.size:
        raise ValueError("controller does not match the template")
    rng = np.random.default_rng(rng_seed)
    probs = ctrl.probs()
    seqs = []
    for _ in range(n):
        seq = []
        for p in probs:
            if rng.random() < ctrl.epsilon:
                seq.append(int(rng.integers(len(p))))
            else:
                seq.append(int(rng.choice(len(p), p=p)))
        seqs.append(tuple(seq))
    return seqs


def quantile_threshold(scores, nu: float) -> float:
    """Score of the ceil(nu * N)-th best entry."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    return float(s[math.ceil(nu * len(s)) - 1])


def policy_gradient(ctrl: ControllerState, batch: Sequence[tuple[OpSeq, float]]) -> list[np.ndarray]:
    """Risk-seeking REINFORCE estimate, one array per node.

    Sequences scoring below the threshold contribute nothing; the rest are
    weighted by (score - threshold) and averaged.  log p uses the softmax
    part of the sampling distribution only.
    """
    if not batch:
        raise ValueError("empty batch")
    scores = np.array([s for _, s in batch], dtype=np.float64)
    thr = quantile_threshold(scores, ctrl.nu)
    kept = [(seq, s - thr) for seq, s in batch if s >= thr]
    probs = ctrl.probs()
    grads = [np.zeros_like(p) for p in probs]
    for seq, adv in kept:
        for j, op in enumerate(seq):
            grads[j] -= adv * probs[j]
            grads[j][op] += adv
    return [g / len(kept) for g in grads]


def update_controller(ctrl: ControllerState, batch: Sequence[tuple[OpSeq, float]]) -> ControllerState:
    grads = policy_gradient(ctrl, batch)
    logits = tuple(l + ctrl.learning_rate * g for l, g in zip(ctrl.logits, grads))
    return replace(ctrl, logits=logits)


# -- candidate pool ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Candidate:
    ops: OpSeq
    score: float
    loss: float
    expr: Expression

    @property
    def theta(self) -> np.ndarray:
        return self.expr.theta

    @property
    def grouping(self) -> tuple[np.ndarray, ...] | None:
        if not self.expr.grouped:
            return None
        return tuple(leaf.index for leaf in self.expr.leaves)

    def to_dict(self) -> dict:
        g = self.grouping
        return {
            "ops": list(self.ops),
            "op_names": self.expr.op_names(),
            "score": self.score,
            "loss": self.loss,
            "grouping": None if g is None else [a.tolist() for a in g],
            "expression": self.expr.to_dict(),
        }


@dataclass(frozen=True)
class Pool:
    capacity: int
    entries: tuple[Candidate, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("pool capacity must be positive")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def best(self) -> Candidate | None:
        return self.entries[0] if self.entries else None

    def scores(self) -> list[float]:
        return [c.score for c in self.entries]


def pool_insert(pool: Pool, cand: Candidate) -> Pool:
    """Top-K insert.  A sequence already present is replaced only by a
    strictly better score; a full pool admits only a score above its minimum."""
    entries = list(pool.entries)
    for i, c in enumerate(entries):
        if c.ops == cand.ops:
            if cand.score <= c.score:
                return pool
            del entries[i]
            break
    else:
        if len(entries) >= pool.capacity:
            if cand.score <= entries[-1].score:
                return pool
            entries.pop()
    # insert after equal scores so earlier arrivals keep their rank
    pos = 0
    while pos < len(entries) and entries[pos].score >= cand.score:
        pos += 1
    entries.insert(pos, cand)
    return Pool(pool.capacity, tuple(entries))


# -- search loop ------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    T: int = 50
    N: int = 10
    K: int = 10
    epsilon: float = 0.1
    nu: float = 0.5
    learning_rate: float = 0.01
    eta_cluster: float | None = None  # None: 1/d
    use_grouping: bool | None = None  # None: only when d > 1
    warm_start: bool = False
    tree_depth: int = 2
    workers: int = 1
    finetune_all: bool = False  # False: stop after the first candidate that early-stops
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.T < 0 or self.N < 1 or self.K < 1 or self.workers < 1:
            raise ValueError("T must be nonnegative; N, K and workers positive")
        if self.eta_cluster is not None and self.eta_cluster <= 0:
            raise ValueError("eta_cluster must be positive")
        ControllerState((np.zeros(1),), self.learning_rate, self.epsilon, self.nu)

    def template(self) -> TreeTemplate:
        return TreeTemplate.from_depth(self.tree_depth)

    def grouping_on(self, dim: int) -> bool:
        return dim > 1 if self.use_grouping is None else self.use_grouping

    def eta(self, dim: int) -> float:
        return default_eta(dim) if self.eta_cluster is None else self.eta_cluster

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(*parts: int) -> int:
    """Stable 31-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] >> 1)


@dataclass
class SearchResult:
    pool: Pool
    trace: list[dict]
    scores: list[dict]
    controller: ControllerState

    @property
    def best_losses(self) -> list[float]:
        return [row["best_pool_loss"] for row in self.trace]


_ROOT, _ITER, _FINE, _EVAL = 0, 1, 2, 3


def search(
    problem: ProblemSpec,
    cfg: SearchConfig = SearchConfig(),
    rng_seed: int = 0,
    progress: Callable[[dict], None] | None = None,
) -> SearchResult:
    template = cfg.template()
    opt = cfg.optimizer
    ctrl = ControllerState.uniform(template, learning_rate=cfg.learning_rate, epsilon=cfg.epsilon, nu=cfg.nu)
    pool = Pool(cfg.K)
    trace: list[dict] = []
    scores: list[dict] = []
    grouping = cfg.grouping_on(problem.d)
    eta = cfg.eta(problem.d)

    def score_one(item):
        k, (seq, seed) = item
        return score_sequence(problem, template, seq, opt, seed)

    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(cfg.T):
            seqs = sample_sequences(ctrl, template, cfg.N, derive_seed(rng_seed, _ROOT, it))
            seeds = [derive_seed(rng_seed, _ITER, it, k) for k in range(cfg.N)]
            items = list(enumerate(zip(seqs, seeds)))
            results: list[ScoreResult] = list(executor.map(score_one, items) if executor else map(score_one, items))
            exprs = [r.expr for r in results]
            losses = [r.loss for r in results]
            best = int(np.argmin(losses))
            accepted = False
            if grouping and np.isfinite(losses[best]):
                rr = group_rescore(problem, exprs[best], opt, seeds[best], losses[best], eta, cfg.warm_start)
                accepted = rr.accepted
                exprs[best], losses[best] = rr.expr, rr.loss
            batch_scores = [score_from_loss(l) for l in losses]
            ctrl = update_controller(ctrl, list(zip(seqs, batch_scores)))
            for k, (seq, s, l, e) in enumerate(zip(seqs, batch_scores, losses, exprs)):
                if s > 0.0:
                    pool = pool_insert(pool, Candidate(seq, s, l, e))
                scores.append({
                    "iteration": it,
                    "index": k,
                    "ops": " ".join(e.op_names()),
                    "score": s,
                    "loss": l,
                    "grouped": bool(k == best and accepted),
                })
            top = pool.best
            row = {
                "iteration": it,
                "best_pool_loss": top.loss if top else math.inf,
                "best_pool_score": top.score if top else 0.0,
                "best_pool_ops": " ".join(top.expr.op_names()) if top else "",
                "iteration_best_loss": losses[best],
                "grouping_accepted": accepted,
            }
            trace.append(row)
            if progress:
                progress(row)
    finally:
        if executor:
            executor.shutdown()
    return SearchResult(pool, trace, scores, ctrl)


# -- full solve -------------------------------------------------------------


@dataclass
class FinetunedCandidate:
    rank: int
    search: Candidate
    expr: Expression
    trace: LossTrace
    eval_loss: float
    relative_error: float | None

    def summary(self) -> dict:
        return {
            "rank": self.rank,
            "ops": " ".join(self.expr.op_names()),
            "search_score": self.search.score,
            "search_loss": self.search.loss,
            "grouped": self.expr.grouped,
            "finetune_steps": self.trace.steps,
            "early_stopped": self.trace.early_stopped,
            "eval_loss": self.eval_loss,
            "relative_error": self.relative_error,
            "expression": str(self.expr),
        }


@dataclass
class SolveReport:
    problem: str
    dim: int
    seed: int
    status: str
    expression: str | None
    expression_data: dict | None
    score: float | None
    loss: float | None
    relative_error: float | None
    finetune_trace: LossTrace
    search: SearchResult
    candidates: list[FinetunedCandidate]
    config: dict
    wall_time: dict = field(default_factory=dict)
    best_rank: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def best(self) -> FinetunedCandidate | None:
        return None if self.best_rank is None else self.candidates[self.best_rank]

    def to_dict(self) -> dict:
        trace = self.finetune_trace
        return {
            "problem": self.problem,
            "dim": self.dim,
            "seed": self.seed,
            "status": self.status,
            "expression": self.expression,
            "expression_data": self.expression_data,
            "score": self.score,
            "loss": self.loss,
            "relative_error": self.relative_error,
            "best_rank": self.best_rank,
            "finetune_steps": trace.steps,
            "early_stopped": trace.early_stopped,
            "candidates": [c.summary() for c in self.candidates],
            "pool": [c.to_dict() for c in self.search.pool.entries],
            "config": self.config,
            "wall_time": self.wall_time,
        }


def solve(
    problem: ProblemSpec,
    cfg: SearchConfig = SearchConfig(),
    rng_seed: int = 0,
    progress: Callable[[dict], None] | None = None,
) -> SolveReport:
    """Search, then fine-tune the pooled candidates and keep the best.

    Candidates are fine-tuned in pool order (best score first) and compared
    by their loss on one shared evaluation batch.  Unless cfg.finetune_all
    is set, the remaining candidates are skipped once one of them
    early-stops on the loss threshold.
    """
    opt = cfg.optimizer
    t0 = time.perf_counter()
    result = search(problem, cfg, rng_seed, progress)
    t1 = time.perf_counter()
    eval_batch = sample_points(problem, opt.batch_n, max(opt.batch_m, 1), derive_seed(rng_seed, _EVAL))
    has_truth = problem.true_solution is not None
    tuned: list[FinetunedCandidate] = []
    for rank, cand in enumerate(result.pool.entries):
        expr, trace = finetune(problem, cand.expr, opt, derive_seed(rng_seed, _FINE, rank))
        value = loss(problem, expr, eval_batch)
        rel = relative_error(expr, problem, opt.n_test) if has_truth and np.isfinite(value) else None
        tuned.append(FinetunedCandidate(rank, cand, expr, trace, value, rel))
        if progress:
            progress({"finetuned": rank, "steps": trace.steps, "eval_loss": value, "relative_error": rel})
        if trace.early_stopped and not cfg.finetune_all:
            break
    t2 = time.perf_counter()
    finite = [c for c in tuned if np.isfinite(c.eval_loss)]
    config = {"search": cfg.to_dict(), "problem": problem.describe()}
    wall = {"search_s": t1 - t0, "finetune_s": t2 - t1, "total_s": t2 - t0}
    if not finite:
        return SolveReport(problem.name, problem.d, rng_seed, "failed", None, None, None, None, None,
                           LossTrace(), result, tuned, config, wall)
    best = min(finite, key=lambda c: c.eval_loss)
    return SolveReport(
        problem.name,
        problem.d,
        rng_seed,
        "ok",
        str(best.expr),
        best.expr.to_dict(),
        best.search.score,
        best.eval_loss,
        best.relative_error,
        best.trace,
        result,
        tuned,
        config,
        wall,
        best.rank,
    )
