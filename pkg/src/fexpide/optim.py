"""Parameter optimization for a fixed operator sequence.

Adam and BFGS are written out here.  The generic ``run_adam``/``run_bfgs``
take any ``theta -> (value, gradient)`` callable.  The PIDE-specific paths
run Adam inside a jitted scan with the batch drawn in-loop, which is about
a third cheaper per step than calling the loss from Python.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from fexpide.expression import Expression, OperatorSet, TreeTemplate, build_expression
from fexpide.problems import (
    ProblemSpec,
    SampleBatch,
    _check_dim,
    _stochastic,
    draw_batch,
    loss_and_grad_jit,
    relative_error,
)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerConfig:
    T1: int = 20
    T2: int = 20
    T3: int = 100
    T4: int = 20000
    adam_lr_coarse: float = 1e-2
    adam_lr_fine: float = 1e-3
    # step size for the T3 retune after regrouping: the regrouped weights
    # start from scratch and get only T3 steps
    adam_lr_medium: float = 1e-1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bfgs_contraction: float = 0.5
    bfgs_slope: float = 1e-4
    bfgs_max_backtracks: int = 40
    bfgs_curvature_eps: float = 1e-12
    bfgs_c2: float = 0.9
    bfgs_max_expand: int = 10
    early_stop_threshold: float = 1.5e-14
    early_stop_window: int = 5
    batch_n: int = 2000
    batch_m: int = 500
    # steps per jitted Adam chunk; also the granularity of relative-error logging
    chunk: int = 20
    trace_every: int = 100
    n_test: int = 10000

    def __post_init__(self):
        for name in ("T1", "T2", "T3", "T4", "early_stop_window", "batch_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_n < 1 or self.chunk < 1 or self.trace_every < 1:
            raise ValueError("batch_n, chunk and trace_every must be positive")
        if not 0.0 < self.bfgs_contraction < 1.0:
            raise ValueError("bfgs_contraction must lie in (0, 1)")
        if not 0.0 < self.bfgs_slope < self.bfgs_c2 < 1.0:
            raise ValueError("need 0 < bfgs_slope < bfgs_c2 < 1")

    def to_dict(self) -> dict:
        return asdict(self)


def score_from_loss(loss: float) -> float:
    """S = 1 / (1 + L); non-finite or negative losses score 0."""
    if not np.isfinite(loss) or loss < 0:
        return 0.0
    return 1.0 / (1.0 + loss)


# -- generic optimizers ----------------------------------------------------


def _adam_update(theta, m, v, g, k, lr, b1, b2, eps, xp=np):
    """One Adam step; k is the 1-based step count used for bias correction."""
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * g * g
    mhat = m / (1.0 - b1**k)
    vhat = v / (1.0 - b2**k)
    return theta - lr * mhat / (xp.sqrt(vhat) + eps), m, v


def run_adam(objective: Objective, theta0, steps: int, lr: float, cfg: OptimizerConfig = OptimizerConfig()):
    """Adam with bias correction.

    Returns (theta, losses) where losses[k] is the objective at the k-th
    iterate before its update.  A non-finite value or gradient stops the
    run and the lowest-loss iterate seen so far is returned.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    theta = np.array(theta0, dtype=np.float64)
    m, v = np.zeros_like(theta), np.zeros_like(theta)
    best, best_f = theta.copy(), np.inf
    trace: list[float] = []
    for k in range(1, steps + 1):
        f, g = objective(theta)
        g = np.asarray(g, dtype=np.float64)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return best, trace
        trace.append(float(f))
        if f < best_f:
            best, best_f = theta.copy(), f
        theta, m, v = _adam_update(theta, m, v, g, k, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return theta, trace


def run_bfgs(objective: Objective, theta0, steps: int, cfg: OptimizerConfig = OptimizerConfig()):
    """BFGS on the inverse Hessian with Armijo backtracking.

    The inverse Hessian starts at the identity; pairs with
    y's <= bfgs_curvature_eps are skipped.  When the unit step passes the
    Armijo test but the slope along the direction is still steep
    (g_new'p < c2 g'p), the step is doubled while the loss keeps dropping,
    so short quasi-Newton steps on flat valleys do not stall the run.
    The accepted step is then refined once by the secant estimate of the
    line minimum, kept only if it lowers the loss further.
    Returns (best theta, losses); losses[0] is the value at theta0.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    theta = np.array(theta0, dtype=np.float64)
    if steps == 0:
        return theta, []
    f, g = objective(theta)
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return theta, []
    n = theta.size
    H = np.eye(n)
    trace = [float(f)]
    for _ in range(steps):
        if not np.any(g):
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            # lost positive definiteness numerically; fall back to steepest descent
            H = np.eye(n)
            p, slope = -g, -float(g @ g)
        step = 1.0
        for _ in range(cfg.bfgs_max_backtracks):
            cand = theta + step * p
            f_new, g_new = objective(cand)
            g_new = np.asarray(g_new, dtype=np.float64)
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)) and f_new <= f + cfg.bfgs_slope * step * slope:
                break
            step *= cfg.bfgs_contraction
        else:
            break
        if step == 1.0:
            for _ in range(cfg.bfgs_max_expand):
                if float(g_new @ p) >= cfg.bfgs_c2 * slope:
                    break
                far = theta + 2.0 * step * p
                f_far, g_far = objective(far)
                g_far = np.asarray(g_far, dtype=np.float64)
                ok = np.isfinite(f_far) and np.all(np.isfinite(g_far))
                if not (ok and f_far < f_new and f_far <= f + cfg.bfgs_slope * 2.0 * step * slope):
                    break
                step, cand, f_new, g_new = 2.0 * step, far, f_far, g_far
        # one secant step on the directional derivative: the exact line
        # minimum when the loss is quadratic along p
        d_new = float(g_new @ p)
        if d_new != slope:
            alt = step * slope / (slope - d_new)
            if 0.0 < alt <= 4.0 * step and abs(alt / step - 1.0) > 0.1:
                near = theta + alt * p
                f_alt, g_alt = objective(near)
                g_alt = np.asarray(g_alt, dtype=np.float64)
                ok = np.isfinite(f_alt) and np.all(np.isfinite(g_alt))
                if ok and f_alt < f_new and f_alt <= f + cfg.bfgs_slope * alt * slope:
                    cand, f_new, g_new = near, f_alt, g_alt
        s, y = cand - theta, g_new - g
        ys = float(y @ s)
        if ys > cfg.bfgs_curvature_eps:
            rho = 1.0 / ys
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        theta, f, g = cand, float(f_new), g_new
        trace.append(f)
    # Armijo acceptance makes the last accepted iterate the best one seen
    return theta, trace


# -- fused Adam on the stochastic PIDE loss ---------------------------------


class AdamCarry(NamedTuple):
    theta: jax.Array
    m: jax.Array
    v: jax.Array
    k: jax.Array  # evaluated steps so far
    below: jax.Array  # consecutive losses under the early-stop threshold
    done: jax.Array
    failed: jax.Array
    best_theta: jax.Array
    best_loss: jax.Array


def _adam_carry(theta) -> AdamCarry:
    theta = jnp.asarray(theta, dtype=jnp.float64)
    z = jnp.zeros_like(theta)
    return AdamCarry(theta, z, z, jnp.int32(0), jnp.int32(0), jnp.bool_(False), jnp.bool_(False), theta, jnp.float64(jnp.inf))


@partial(jax.jit, static_argnums=(0, 1, 2, 3, 4))
def _adam_chunk(problem, template, n, m, length, carry, idx, ops, key, lr, hyper, limit):
    b1, b2, eps, threshold, window = hyper
    vg = jax.value_and_grad(_stochastic, argnums=4)

    def body(c: AdamCarry, _):
        active = (~c.done) & (c.k < limit)
        loss, g = vg(problem, template, n, m, c.theta, idx, ops, jax.random.fold_in(key, c.k))
        finite = jnp.isfinite(loss) & jnp.all(jnp.isfinite(g))
        below = jnp.where(loss < threshold, c.below + 1, 0)
        stop = below >= window
        ok = active & finite
        theta, mm, vv = _adam_update(c.theta, c.m, c.v, g, (c.k + 1).astype(jnp.float64), lr, b1, b2, eps, jnp)
        # Below the stop level the parameters are held and re-checked on fresh
        # batches: near zero loss the normalized Adam step has size lr no
        # matter how small the gradient is, and would walk away from a fit
        # that is already good enough.
        upd = ok & ~(loss < threshold)
        better = ok & (loss < c.best_loss)
        new = AdamCarry(
            jnp.where(upd, theta, c.theta),
            jnp.where(upd, mm, c.m),
            jnp.where(upd, vv, c.v),
            c.k + ok.astype(jnp.int32),
            jnp.where(ok, below, c.below),
            c.done | (active & (~finite | stop)),
            c.failed | (active & ~finite),
            jnp.where(better, c.theta, c.best_theta),
            jnp.where(better, loss, c.best_loss),
        )
        return new, (loss, ok)

    return jax.lax.scan(body, carry, None, length=length)


@dataclass
class LossTrace:
    """Per-step losses plus relative errors sampled every few steps."""

    loss: list[float] = field(default_factory=list)
    relative_error: dict[int, float] = field(default_factory=dict)
    early_stopped: bool = False
    failed: bool = False

    @property
    def steps(self) -> int:
        return len(self.loss)

    def rows(self):
        for k, value in enumerate(self.loss):
            yield k, value, self.relative_error.get(k)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "relative_error"])
            for k, value, rel in self.rows():
                w.writerow([k, repr(float(value)), "" if rel is None else repr(float(rel))])


def adam_on_problem(
    problem: ProblemSpec,
    expr: Expression,
    steps: int,
    lr: float,
    cfg: OptimizerConfig,
    rng_seed: int,
    early_stop: bool = False,
    track_error: bool = False,
    specialize: bool = False,
) -> tuple[Expression, LossTrace]:
    """Adam on the resampled loss; step k uses the batch keyed by (seed, k).

    ``specialize`` compiles a kernel for this expression's leaf op families,
    which pays off only for long runs.
    """
    _check_dim(problem, expr)
    trace = LossTrace()
    if steps <= 0:
        return expr, trace
    theta0, idx, ops = expr.packed()
    template = expr.template.specialized(ops) if specialize else expr.template
    carry = _adam_carry(theta0)
    key = jax.random.PRNGKey(rng_seed)
    threshold = cfg.early_stop_threshold if early_stop else -np.inf
    window = cfg.early_stop_window if early_stop else np.iinfo(np.int32).max
    hyper = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, threshold, jnp.int32(window))
    want_err = track_error and problem.true_solution is not None
    chunk = cfg.chunk
    done = 0
    while done < steps:
        if want_err and done % cfg.trace_every == 0:
            snap = expr.with_theta(np.asarray(carry.theta)[: expr.n_params])
            trace.relative_error[done] = relative_error(snap, problem, cfg.n_test)
        carry, (losses, ok) = _adam_chunk(
            problem, template, cfg.batch_n, cfg.batch_m, chunk, carry, idx, ops, key, lr, hyper, jnp.int32(steps)
        )
        losses, ok = np.asarray(losses), np.asarray(ok)
        trace.loss.extend(float(v) for v in losses[ok])
        done += chunk
        if bool(carry.done):
            break
    trace.failed = bool(carry.failed)
    trace.early_stopped = bool(carry.done) and not trace.failed
    theta = carry.best_theta if trace.failed else carry.theta
    out = expr.with_theta(np.asarray(theta)[: expr.n_params])
    if want_err:
        trace.relative_error[max(trace.steps - 1, 0)] = relative_error(out, problem, cfg.n_test)
    return out, trace


# -- problem-level operations ----------------------------------------------


def grad_loss(problem: ProblemSpec, expr: Expression, batch: SampleBatch) -> np.ndarray:
    """d loss / d theta for the expression's own (possibly grouped) parameters.

    Non-finite results come back as an all-NaN vector.
    """
    _check_dim(problem, expr)
    theta, idx, ops = expr.packed()
    value, g = loss_and_grad_jit(problem, expr.template, theta, idx, ops, batch.t, batch.x, batch.x_terminal)
    g = np.asarray(g)[: expr.n_params]
    if not (np.isfinite(float(value)) and np.all(np.isfinite(g))):
        return np.full(expr.n_params, np.nan)
    return g


def batch_objective(problem: ProblemSpec, expr: Expression, batch: SampleBatch) -> Objective:
    """theta -> (loss, gradient) on a frozen batch, in the expression's own layout."""
    _, idx, ops = expr.packed()
    t, x, xT = (jnp.asarray(a) for a in (batch.t, batch.x, batch.x_terminal))
    n, full = expr.n_params, expr.max_params

    def objective(theta):
        padded = np.zeros(full)
        padded[:n] = theta
        value, g = loss_and_grad_jit(problem, expr.template, padded, idx, ops, t, x, xT)
        return float(value), np.asarray(g)[:n]

    return objective


def frozen_batch(problem: ProblemSpec, cfg: OptimizerConfig, rng_seed: int) -> SampleBatch:
    key = jax.random.fold_in(jax.random.PRNGKey(rng_seed), 2**30)
    t, x, xT = draw_batch(key, problem, cfg.batch_n, cfg.batch_m)
    return SampleBatch(np.asarray(t), np.asarray(x), np.asarray(xT), rng_seed)


class ScoreResult(NamedTuple):
    score: float
    expr: Expression
    loss: float


def coarse_tune(problem: ProblemSpec, expr: Expression, cfg: OptimizerConfig, rng_seed: int) -> tuple[Expression, float]:
    """T1 Adam steps on resampled batches, then T2 BFGS steps on one frozen batch.

    Returns the tuned expression and its loss on the frozen batch (+inf when
    the candidate blew up).
    """
    expr, trace = adam_on_problem(problem, expr, cfg.T1, cfg.adam_lr_coarse, cfg, rng_seed)
    if trace.failed:
        return expr, np.inf
    batch = frozen_batch(problem, cfg, rng_seed)
    objective = batch_objective(problem, expr, batch)
    if cfg.T2 > 0:
        theta, losses = run_bfgs(objective, expr.theta, cfg.T2, cfg)
        if not losses:
            return expr, np.inf
        return expr.with_theta(theta), losses[-1]
    value, _ = objective(expr.theta)
    return expr, value if np.isfinite(value) else np.inf


def score_sequence(
    problem: ProblemSpec,
    template: TreeTemplate,
    ops,
    cfg: OptimizerConfig = OptimizerConfig(),
    rng_seed: int = 0,
    opset: OperatorSet | None = None,
) -> ScoreResult:
    """Fresh parameters, coarse tuning, and the score 1 / (1 + L)."""
    expr = build_expression(template, ops, problem.d, rng_seed, opset)
    expr, value = coarse_tune(problem, expr, cfg, rng_seed)
    return ScoreResult(score_from_loss(value), expr, float(value))


def finetune(
    problem: ProblemSpec,
    expr: Expression,
    cfg: OptimizerConfig = OptimizerConfig(),
    rng_seed: int = 0,
    track_error: bool = True,
) -> tuple[Expression, LossTrace]:
    """Up to T4 Adam steps at the fine rate, stopping once the last
    ``early_stop_window`` losses all fall below ``early_stop_threshold``."""
    return adam_on_problem(
        problem, expr, cfg.T4, cfg.adam_lr_fine, cfg, rng_seed, early_stop=True, track_error=track_error, specialize=True
    )
