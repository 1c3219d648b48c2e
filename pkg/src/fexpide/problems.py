"""Benchmark PIDEs, collocation sampling and the least-squares functional.

Every problem has the form

    u_t + b(x) . grad u + 1/2 Tr(S H(u)) + A u = rhs(t, x),   u(T, x) = g(x)

with S = sigma sigma^T, and the residual D(u) is the left side minus the
right side.  Drift, diffusion, right-hand side and terminal data are chosen
from a small set of tagged closed forms so that problems stay hashable and
can be compiled once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from fexpide.expression import Expression, _as_batch, tree_jet, tree_values
from fexpide.integral import JumpSpec, QuadratureRule, check_compatible, levy_batch

DRIFTS = ("zero", "linear", "norm_linear")
DIFFUSIONS = ("scalar", "bidiagonal")
CLOSED_FORMS = ("sum", "sqnorm_mean")
BUILTINS = ("ex1-1d", "ex2-1d", "ex1-hd", "ex2-hd")


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemSpec:
    """One PIDE instance.

    drift:      ``zero``; ``linear`` b = c x; ``norm_linear`` b = c |x| x
                with c = ``drift_coef``.
    diffusion:  ``scalar`` sigma = theta I; ``bidiagonal`` sigma = theta B with
                ones on the diagonal and the subdiagonal; theta = ``diffusion_coef``.
    rhs:        rhs_const + rhs_lin * sum(x) + rhs_sq |x|^2 + rhs_cube |x|^3.
    terminal / true_solution: ``sum`` (sum of x) or ``sqnorm_mean`` (|x|^2 / d).
    """

    name: str
    d: int
    jump: JumpSpec
    rule: QuadratureRule = QuadratureRule()
    T: float = 1.0
    x_lo: float = 0.0
    x_hi: float = 1.0
    drift: str = "zero"
    drift_coef: float = 0.0
    diffusion: str = "scalar"
    diffusion_coef: float = 0.0
    rhs_const: float = 0.0
    rhs_lin: float = 0.0
    rhs_sq: float = 0.0
    rhs_cube: float = 0.0
    terminal: str = "sum"
    true_solution: str | None = None
    constants: tuple[tuple[str, float], ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.d < 1 or self.T <= 0 or self.x_hi <= self.x_lo:
            raise ProblemError("need d >= 1, T > 0 and a nonempty x-domain")
        if self.drift not in DRIFTS:
            raise ProblemError(f"unknown drift {self.drift!r}")
        if self.diffusion not in DIFFUSIONS:
            raise ProblemError(f"unknown diffusion {self.diffusion!r}")
        if self.terminal not in CLOSED_FORMS or self.true_solution not in CLOSED_FORMS + (None,):
            raise ProblemError("terminal data and true solution must be one of " + ", ".join(CLOSED_FORMS))
        try:
            check_compatible(self.jump, self.rule, self.d)
        except ValueError as exc:
            raise ProblemError(str(exc)) from exc

    @property
    def hess_pairs(self) -> tuple[tuple[int, int], ...]:
        """Off-diagonal Hessian entries the diffusion term needs."""
        if self.diffusion == "bidiagonal" and self.diffusion_coef != 0.0:
            return tuple((i, i + 1) for i in range(self.d - 1))
        return ()

    def describe(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k not in ("jump", "rule", "constants")}
        out["jump"] = dict(self.jump.__dict__)
        out["rule"] = dict(self.rule.__dict__)
        out["constants"] = dict(self.constants)
        return out


def _closed_form(tag: str, x):
    if tag == "sum":
        return jnp.sum(x, axis=1)
    return jnp.sum(x * x, axis=1) / x.shape[1]


def builtin_problem(
    name: str,
    d: int = 1,
    *,
    lam: float | None = None,
    mu: float | None = None,
    sigma2: float | None = None,
    eps: float | None = None,
    theta: float | None = None,
    integral: str | None = None,
    grid_points: int | None = None,
) -> ProblemSpec:
    """The four benchmark problems; keyword overrides keep the rhs consistent
    with the closed-form true solution."""
    if name in ("ex1-1d", "ex2-1d"):
        if d != 1:
            raise ProblemError(f"{name} is one-dimensional")
        lam = 0.3 if lam is None else lam
        mu = 0.4 if mu is None else mu
        sigma2 = 0.25**2 if sigma2 is None else sigma2
        eps = (0.0 if name == "ex1-1d" else 0.25) if eps is None else eps
        theta = 0.0 if theta is None else theta
        rule = QuadratureRule(integral or "trapezoid", 0.0, 1.0, grid_points or 50)
        jump = JumpSpec(lam, mu, sigma2, "multiplicative")
        # u = x: drift eps*x*u_x = eps*x, diffusion vanishes, jump term cancels
        return ProblemSpec(
            name, 1, jump, rule,
            drift="linear", drift_coef=eps,
            diffusion="scalar", diffusion_coef=theta,
            rhs_lin=eps,
            terminal="sum", true_solution="sum",
            constants=(("lam", lam), ("mu", mu), ("sigma2", sigma2), ("eps", eps), ("theta", theta)),
        )
    if name == "ex1-hd":
        lam = 0.3 if lam is None else lam
        mu = 1.0 if mu is None else mu
        sigma2 = 1e-4 if sigma2 is None else sigma2
        eps = 0.0 if eps is None else eps
        theta = 0.3 if theta is None else theta
        rule = QuadratureRule(integral or "taylor", 0.0, 1.0, grid_points or 50)
        return ProblemSpec(
            name, d, JumpSpec(lam, mu, sigma2, "additive"), rule,
            drift="linear", drift_coef=eps / 2,
            diffusion="scalar", diffusion_coef=theta,
            rhs_const=lam * (mu**2 + sigma2) + theta**2,
            rhs_sq=eps / 2,
            terminal="sqnorm_mean", true_solution="sqnorm_mean",
            constants=(("lam", lam), ("mu", mu), ("sigma2", sigma2), ("eps", eps), ("theta", theta)),
        )
    if name == "ex2-hd":
        lam = 0.3 if lam is None else lam
        mu = 1.0 if mu is None else mu
        sigma2 = 1e-8 if sigma2 is None else sigma2
        eps = 0.05 if eps is None else eps
        theta = 0.2 if theta is None else theta
        rule = QuadratureRule(integral or "taylor", 0.0, 1.0, grid_points or 50)
        # 1/2 Tr(theta^2 B B^T * 2I/d) = theta^2 (2d - 1) / d for u = |x|^2 / d
        return ProblemSpec(
            name, d, JumpSpec(lam, mu, sigma2, "additive"), rule,
            drift="norm_linear", drift_coef=eps / 2,
            diffusion="bidiagonal", diffusion_coef=theta,
            rhs_const=lam * (mu**2 + sigma2) + (2 * d - 1) / d * theta**2,
            rhs_cube=eps / d,
            terminal="sqnorm_mean", true_solution="sqnorm_mean",
            constants=(("lam", lam), ("mu", mu), ("sigma2", sigma2), ("eps", eps), ("theta", theta)),
        )
    raise ProblemError(f"unknown problem {name!r}; choose from {', '.join(BUILTINS)}")


# -- sampling --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleBatch:
    t: np.ndarray           # (N,)
    x: np.ndarray           # (N, d)
    x_terminal: np.ndarray  # (M, d); paired with t = T
    rng_seed: int | None = None

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.t), len(self.x_terminal)


def draw_batch(key, problem: ProblemSpec, n: int, m: int):
    kt, kx, kT = jax.random.split(key, 3)
    t = jax.random.uniform(kt, (n,), minval=0.0, maxval=problem.T, dtype=jnp.float64)
    x = jax.random.uniform(kx, (n, problem.d), minval=problem.x_lo, maxval=problem.x_hi, dtype=jnp.float64)
    xT = jax.random.uniform(kT, (m, problem.d), minval=problem.x_lo, maxval=problem.x_hi, dtype=jnp.float64)
    return t, x, xT


@partial(jax.jit, static_argnums=(1, 2, 3))
def _draw_jit(key, problem, n, m):
    return draw_batch(key, problem, n, m)


def sample_points(problem: ProblemSpec, N: int, M: int, rng_seed: int) -> SampleBatch:
    """Uniform interior points (t, x) and terminal points (T, x), seeded."""
    if N < 1 or M < 1:
        raise ProblemError("N and M must be positive")
    t, x, xT = _draw_jit(jax.random.PRNGKey(rng_seed), problem, int(N), int(M))
    return SampleBatch(np.asarray(t), np.asarray(x), np.asarray(xT), rng_seed)


# -- residual and loss -----------------------------------------------------


def rhs_batch(problem: ProblemSpec, t, x):
    out = jnp.full(t.shape, problem.rhs_const)
    if problem.rhs_lin:
        out = out + problem.rhs_lin * jnp.sum(x, axis=1)
    if problem.rhs_sq or problem.rhs_cube:
        sq = jnp.sum(x * x, axis=1)
        out = out + problem.rhs_sq * sq
        if problem.rhs_cube:
            out = out + problem.rhs_cube * sq * jnp.sqrt(sq)
    return out


def residual_batch(problem: ProblemSpec, template, theta, idx, ops, t, x):
    jet = tree_jet(template, theta, idx, ops, t, x, problem.hess_pairs)
    r = jet.vt
    if problem.drift != "zero" and problem.drift_coef != 0.0:
        flow = jnp.sum(x * jet.g, axis=1)
        if problem.drift == "norm_linear":
            flow = flow * jnp.sqrt(jnp.sum(x * x, axis=1))
        r = r + problem.drift_coef * flow
    th2 = problem.diffusion_coef**2
    if th2:
        if problem.diffusion == "scalar":
            r = r + 0.5 * th2 * jnp.sum(jet.hd, axis=1)
        else:
            w = np.full(problem.d, 2.0)
            w[0] = 1.0
            r = r + 0.5 * th2 * (jet.hd @ w + 2.0 * jnp.sum(jet.ho, axis=1))
    r = r + levy_batch(template, theta, idx, ops, t, x, jet.v, jet.g, problem.jump, problem.rule)
    return r - rhs_batch(problem, t, x)


def loss_batch(problem: ProblemSpec, template, theta, idx, ops, t, x, xT):
    """Interior mean-square residual plus terminal mean-square mismatch.

    Returns (total, interior, terminal); non-finite totals become +inf.
    """
    r = residual_batch(problem, template, theta, idx, ops, t, x)
    interior = jnp.mean(r * r)
    if xT.shape[0]:
        tT = jnp.full((xT.shape[0],), problem.T)
        gap = tree_values(template, theta, idx, ops, tT, xT) - _closed_form(problem.terminal, xT)
        terminal = jnp.mean(gap * gap)
    else:
        terminal = jnp.zeros(())
    total = interior + terminal
    return jnp.where(jnp.isfinite(total), total, jnp.inf), interior, terminal


@partial(jax.jit, static_argnums=(0, 1))
def _residual_jit(problem, template, theta, idx, ops, t, x):
    return residual_batch(problem, template, theta, idx, ops, t, x)


@partial(jax.jit, static_argnums=(0, 1))
def _loss_parts_jit(problem, template, theta, idx, ops, t, x, xT):
    return loss_batch(problem, template, theta, idx, ops, t, x, xT)


def _loss_total(problem, template, theta, idx, ops, t, x, xT):
    return loss_batch(problem, template, theta, idx, ops, t, x, xT)[0]


loss_and_grad_jit = jax.jit(jax.value_and_grad(_loss_total, argnums=2), static_argnums=(0, 1))


def _stochastic(problem, template, n, m, theta, idx, ops, key):
    t, x, xT = draw_batch(key, problem, n, m)
    return _loss_total(problem, template, theta, idx, ops, t, x, xT)


stochastic_loss_and_grad_jit = jax.jit(jax.value_and_grad(_stochastic, argnums=4), static_argnums=(0, 1, 2, 3))


def residual(problem: ProblemSpec, expr: Expression, t, x):
    """D(u)(t, x); scalar for a single point, array for batches."""
    _check_dim(problem, expr)
    t_arr, x_arr, scalar = _as_batch(expr.dim, t, x)
    theta, idx, ops = expr.packed()
    out = np.asarray(_residual_jit(problem, expr.template, theta, idx, ops, t_arr, x_arr))
    return float(out[0]) if scalar else out


def loss_parts(problem: ProblemSpec, expr: Expression, batch: SampleBatch) -> tuple[float, float, float]:
    _check_dim(problem, expr)
    theta, idx, ops = expr.packed()
    parts = _loss_parts_jit(problem, expr.template, theta, idx, ops, batch.t, batch.x, batch.x_terminal)
    return tuple(float(p) for p in parts)


def loss(problem: ProblemSpec, expr: Expression, batch: SampleBatch) -> float:
    """Sampled least-squares functional; +inf when anything is non-finite."""
    return loss_parts(problem, expr, batch)[0]


def true_values(problem: ProblemSpec, t, x) -> np.ndarray:
    if problem.true_solution is None:
        raise ProblemError(f"problem {problem.name!r} has no closed-form solution")
    x = np.asarray(x, dtype=np.float64).reshape(-1, problem.d)
    return np.asarray(_closed_form(problem.true_solution, jnp.asarray(x)))


def test_points(problem: ProblemSpec, n_test: int, rng_seed: int):
    t, x, _ = _draw_jit(jax.random.PRNGKey(rng_seed), problem, int(n_test), 0)
    return np.asarray(t), np.asarray(x)


def relative_error(expr: Expression, problem: ProblemSpec, n_test: int = 10000, rng_seed: int = 0) -> float:
    """sqrt(sum (u~ - u)^2 / sum u^2) over uniform space-time points."""
    from fexpide.expression import evaluate

    _check_dim(problem, expr)
    t, x = test_points(problem, n_test, rng_seed)
    exact = true_values(problem, t, x)
    approx = evaluate(expr, t, x)
    return float(np.sqrt(np.sum((approx - exact) ** 2) / np.sum(exact**2)))


def _check_dim(problem: ProblemSpec, expr: Expression) -> None:
    if expr.dim != problem.d:
        raise ProblemError(f"expression has dim {expr.dim}, problem has d={problem.d}")


def make_problem(
    name: str = "custom",
    d: int = 1,
    *,
    lam: float = 0.0,
    mu: float = 0.0,
    sigma2: float = 0.0,
    jump_form: str = "additive",
    integral: str = "taylor",
    grid_lo: float = 0.0,
    grid_hi: float = 1.0,
    grid_points: int = 50,
    **fields,
) -> ProblemSpec:
    """Custom problem from flat keyword constants (as read from a config file)."""
    jump = JumpSpec(lam, mu, sigma2, jump_form)
    rule = QuadratureRule(integral, grid_lo, grid_hi, grid_points)
    allowed = set(ProblemSpec.__dataclass_fields__) - {"name", "d", "jump", "rule", "constants"}
    unknown = set(fields) - allowed
    if unknown:
        raise ProblemError(f"unknown problem keys: {sorted(unknown)}")
    constants = (("lam", lam), ("mu", mu), ("sigma2", sigma2))
    return ProblemSpec(name, d, jump, rule, constants=constants, **fields)


def with_rule(problem: ProblemSpec, rule: QuadratureRule) -> ProblemSpec:
    return replace(problem, rule=rule)
