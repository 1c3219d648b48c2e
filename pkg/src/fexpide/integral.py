"""Nonlocal jump operator for normally distributed jumps.

With a Levy measure ``lam * N(mu, sigma2)`` the jump term reduces to

    A u(t, x) = lam * (E[u(t, x + G)] - u(t, x) - E[G] . grad u(t, x))

and only ``E[u(t, x + G)]`` needs approximating.  Two rules are provided: a
second-order Taylor estimate around the mean shift (any d, additive jumps)
and a 1-D trapezoid rule on a truncated grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import norm

from fexpide.expression import Expression, _as_batch, tree_jet, tree_values

METHODS = ("taylor", "trapezoid")
G_FORMS = ("additive", "multiplicative")


class IntegralConfigError(ValueError):
    pass


@dataclass(frozen=True)
class JumpSpec:
    """Compound Poisson jumps: intensity ``lam``, i.i.d. N(mu, sigma2) components.

    ``g_form="additive"`` shifts x to x + z; ``"multiplicative"`` (d = 1)
    moves x to x * exp(z), i.e. G(x, z) = x (e^z - 1).
    """

    lam: float
    mu: float
    sigma2: float
    g_form: str = "additive"

    def __post_init__(self):
        if self.lam < 0 or self.sigma2 < 0:
            raise IntegralConfigError("lam and sigma2 must be nonnegative")
        if self.g_form not in G_FORMS:
            raise IntegralConfigError(f"unknown jump form {self.g_form!r}")


@dataclass(frozen=True)
class QuadratureRule:
    method: str = "taylor"
    grid_lo: float = 0.0
    grid_hi: float = 1.0
    grid_points: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise IntegralConfigError(f"unknown integral method {self.method!r}")
        if self.method == "trapezoid" and (self.grid_points < 2 or self.grid_hi <= self.grid_lo):
            raise IntegralConfigError("trapezoid rule needs at least 2 points on a nonempty grid")


def check_compatible(jump: JumpSpec, rule: QuadratureRule, dim: int) -> None:
    if rule.method == "taylor" and jump.g_form != "additive":
        raise IntegralConfigError("the Taylor estimate only supports additive jumps")
    if rule.method == "trapezoid" and dim != 1:
        raise IntegralConfigError("the trapezoid rule is one-dimensional")
    if jump.g_form == "multiplicative" and dim != 1:
        raise IntegralConfigError("multiplicative jumps are one-dimensional")
    if rule.method == "trapezoid" and jump.sigma2 <= 0:
        raise IntegralConfigError("the trapezoid rule needs a positive jump variance")


def trapezoid_weights(jump: JumpSpec, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    """Nodes z_k and weights w_k with sum_k w_k f(z_k) ~ int f(z) phi(z) dz."""
    z = np.linspace(rule.grid_lo, rule.grid_hi, rule.grid_points)
    h = (rule.grid_hi - rule.grid_lo) / (rule.grid_points - 1)
    w = np.full(rule.grid_points, h)
    w[0] = w[-1] = h / 2
    return z, w * norm.pdf(z, loc=jump.mu, scale=np.sqrt(jump.sigma2))


# -- batched kernels -------------------------------------------------------


def taylor_shift_batch(template, theta, idx, ops, t, x, jump: JumpSpec):
    """u(t, x + mu) + sigma2/2 * trace H(u)(t, x + mu), per point."""
    jet = tree_jet(template, theta, idx, ops, t, x + jump.mu)
    return jet.v + 0.5 * jump.sigma2 * jnp.sum(jet.hd, axis=1)


def trapezoid_shift_batch(template, theta, idx, ops, t, x, jump: JumpSpec, rule: QuadratureRule):
    z, w = trapezoid_weights(jump, rule)
    n, k = t.shape[0], len(z)
    if jump.g_form == "multiplicative":
        moved = x * jnp.exp(jnp.asarray(z))[None, :]
    else:
        moved = x + jnp.asarray(z)[None, :]
    vals = tree_values(template, theta, idx, ops, jnp.repeat(t, k), moved.reshape(-1, 1))
    return vals.reshape(n, k) @ jnp.asarray(w)


def mean_jump_batch(x, jump: JumpSpec, rule: QuadratureRule):
    """E[G(x, z)] per point, shape like x.

    Under the trapezoid rule the same truncated weights are used as for
    E[u], so u = x makes the multiplicative jump term vanish exactly.
    """
    if rule.method == "taylor":
        return jnp.full_like(x, jump.mu)
    z, w = trapezoid_weights(jump, rule)
    if jump.g_form == "multiplicative":
        return x * (float(w @ np.exp(z)) - 1.0)
    return jnp.full_like(x, float(w @ z))


def levy_batch(template, theta, idx, ops, t, x, value, grad, jump: JumpSpec, rule: QuadratureRule):
    """A u at each point given u and grad u there."""
    if jump.lam == 0.0:
        return jnp.zeros_like(value)
    if rule.method == "taylor":
        shifted = taylor_shift_batch(template, theta, idx, ops, t, x, jump)
    else:
        shifted = trapezoid_shift_batch(template, theta, idx, ops, t, x, jump, rule)
    drift = jnp.sum(mean_jump_batch(x, jump, rule) * grad, axis=1)
    return jump.lam * (shifted - value - drift)


@partial(jax.jit, static_argnums=(0, 6))
def _taylor_jit(template, theta, idx, ops, t, x, jump):
    return taylor_shift_batch(template, theta, idx, ops, t, x, jump)


@partial(jax.jit, static_argnums=(0, 6, 7))
def _trapezoid_jit(template, theta, idx, ops, t, x, jump, rule):
    return trapezoid_shift_batch(template, theta, idx, ops, t, x, jump, rule)


@partial(jax.jit, static_argnums=(0, 6, 7))
def _levy_jit(template, theta, idx, ops, t, x, jump, rule):
    jet = tree_jet(template, theta, idx, ops, t, x)
    return levy_batch(template, theta, idx, ops, t, x, jet.v, jet.g, jump, rule)


def _scalar_or_array(out, scalar):
    out = np.asarray(out)
    return float(out[0]) if scalar else out


def expected_shift_taylor(expr: Expression, t, x, jump: JumpSpec):
    """Second-order Taylor estimate of E[u(t, x + z)], z ~ N(mu 1, sigma2 I)."""
    check_compatible(jump, QuadratureRule("taylor"), expr.dim)
    t_arr, x_arr, scalar = _as_batch(expr.dim, t, x)
    theta, idx, ops = expr.packed()
    return _scalar_or_array(_taylor_jit(expr.template, theta, idx, ops, t_arr, x_arr, jump), scalar)


def expected_shift_trapezoid_1d(expr: Expression, t, x, jump: JumpSpec, grid_lo=0.0, grid_hi=1.0, n_points=50):
    """Trapezoid estimate of E[u(t, x (+|*) ...)] over z in [grid_lo, grid_hi]."""
    rule = QuadratureRule("trapezoid", grid_lo, grid_hi, n_points)
    check_compatible(jump, rule, expr.dim)
    t_arr, x_arr, scalar = _as_batch(expr.dim, t, x)
    theta, idx, ops = expr.packed()
    return _scalar_or_array(_trapezoid_jit(expr.template, theta, idx, ops, t_arr, x_arr, jump, rule), scalar)


def levy_operator(expr: Expression, t, x, jump: JumpSpec, method="taylor", grid_lo=0.0, grid_hi=1.0, n_points=50):
    """The jump term A u(t, x) under the chosen expectation rule."""
    rule = QuadratureRule(method, grid_lo, grid_hi, n_points)
    check_compatible(jump, rule, expr.dim)
    t_arr, x_arr, scalar = _as_batch(expr.dim, t, x)
    theta, idx, ops = expr.packed()
    return _scalar_or_array(_levy_jit(expr.template, theta, idx, ops, t_arr, x_arr, jump, rule), scalar)
