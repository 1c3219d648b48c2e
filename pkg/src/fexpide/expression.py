"""Finite expressions on a fixed binary-tree template.

An expression is a tree template, one operator per node and a set of
trainable parameters.  Each leaf applies its unary operator element-wise to
the inputs ``(t, x_1, ..., x_d)`` and returns a weighted sum plus a bias; each
internal node applies its operator to its children and then ``scale * (.) +
bias``.

Values and derivative jets are computed in batch with ``jax.numpy``.  The jet
recursion propagates first- and second-order x-tangents explicitly, so the
same code path gives values, ``du/dt``, the spatial gradient and any
requested Hessian entries; parameter derivatives come from differentiating
that recursion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property, partial
from typing import NamedTuple, Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

UNARY_OPS = ("0", "1", "x", "x^2", "x^3", "x^4", "exp", "sin", "cos")
BINARY_OPS = ("+", "-", "*")


class StructureError(ValueError):
    """Operator sequence or parameters do not fit the tree template."""


# -- operator tables ------------------------------------------------------
# Each unary jet entry returns (f, f', f'') evaluated element-wise.


def _u_zero(z):
    zero = jnp.zeros_like(z)
    return zero, zero, zero


def _u_one(z):
    zero = jnp.zeros_like(z)
    return jnp.ones_like(z), zero, zero


def _u_id(z):
    return z, jnp.ones_like(z), jnp.zeros_like(z)


def _u_sq(z):
    return z * z, 2.0 * z, jnp.full_like(z, 2.0)


def _u_cube(z):
    z2 = z * z
    return z2 * z, 3.0 * z2, 6.0 * z


def _u_quart(z):
    z2 = z * z
    return z2 * z2, 4.0 * z2 * z, 12.0 * z2


def _u_exp(z):
    e = jnp.exp(z)
    return e, e, e


def _u_sin(z):
    s, c = jnp.sin(z), jnp.cos(z)
    return s, c, -s


def _u_cos(z):
    s, c = jnp.sin(z), jnp.cos(z)
    return c, -s, -c


_UNARY_JET = (_u_zero, _u_one, _u_id, _u_sq, _u_cube, _u_quart, _u_exp, _u_sin, _u_cos)

_UNARY_VAL = (
    jnp.zeros_like,
    jnp.ones_like,
    lambda z: z,
    lambda z: z * z,
    lambda z: z * z * z,
    lambda z: (z * z) * (z * z),
    jnp.exp,
    jnp.sin,
    jnp.cos,
)

# Monomial coefficients of the polynomial unary ops ("0" .. "x^4"); the
# transcendental rows stay zero.  A table lookup keeps the leaf kernels free
# of conditionals, which XLA cannot fuse across.
_POLY = np.zeros((len(UNARY_OPS), 5))
for _k in range(1, 6):
    _POLY[_k, _k - 1] = 1.0
_N_POLY = 6
LEAF_KERNELS = ("poly", "trans")


def _poly_jet(op, z):
    c = jnp.asarray(_POLY)[op]
    f = c[0] + z * (c[1] + z * (c[2] + z * (c[3] + z * c[4])))
    f1 = c[1] + z * (2.0 * c[2] + z * (3.0 * c[3] + z * (4.0 * c[4])))
    f2 = 2.0 * c[2] + z * (6.0 * c[3] + z * (12.0 * c[4]))
    return f, f1, f2


def _trans_jet(op, z):
    return lax.switch(jnp.clip(op - _N_POLY, 0, 2), _UNARY_JET[_N_POLY:], z)


def _zero_jet(op, z):
    zero = jnp.zeros_like(z)
    return zero, zero, zero


def leaf_jet(kernel, op, z):
    """(f, f', f'') of leaf op ``op`` on z.  ``kernel`` is a static hint:
    "poly" or "trans" when the op family is known, None otherwise."""
    if kernel == "poly":
        return _poly_jet(op, z)
    if kernel == "trans":
        return _trans_jet(op, z)
    is_trans = op >= _N_POLY
    other = lax.cond(is_trans, _trans_jet, _zero_jet, op, z)
    return tuple(jnp.where(is_trans, b, a) for a, b in zip(_poly_jet(op, z), other))


def leaf_value(kernel, op, z):
    if kernel == "poly":
        c = jnp.asarray(_POLY)[op]
        return c[0] + z * (c[1] + z * (c[2] + z * (c[3] + z * c[4])))
    if kernel == "trans":
        return lax.switch(jnp.clip(op - _N_POLY, 0, 2), _UNARY_VAL[_N_POLY:], z)
    return leaf_jet(None, op, z)[0]


def leaf_kernels_for(global_ops, template) -> tuple[str, ...]:
    return tuple("trans" if int(global_ops[i]) >= _N_POLY else "poly" for i in template.leaves)


@dataclass(frozen=True)
class OperatorSet:
    """Ordered binary and unary operator tags.

    Operator sequences index into these lists, so the order is part of the
    on-disk format.  Tags must come from ``BINARY_OPS`` / ``UNARY_OPS``.
    """

    binary_ops: tuple[str, ...] = BINARY_OPS
    unary_ops: tuple[str, ...] = UNARY_OPS

    def __post_init__(self):
        object.__setattr__(self, "binary_ops", tuple(self.binary_ops))
        object.__setattr__(self, "unary_ops", tuple(self.unary_ops))
        bad = [op for op in self.binary_ops if op not in BINARY_OPS]
        bad += [op for op in self.unary_ops if op not in UNARY_OPS]
        if bad:
            raise StructureError(f"unknown operator tags {bad}")
        if not self.binary_ops or not self.unary_ops:
            raise StructureError("operator sets must be nonempty")

    def ops_for(self, kind: str) -> tuple[str, ...]:
        return self.binary_ops if kind == "binary" else self.unary_ops

    def global_id(self, kind: str, local: int) -> int:
        if kind == "binary":
            return BINARY_OPS.index(self.binary_ops[local])
        return UNARY_OPS.index(self.unary_ops[local])


@dataclass(frozen=True)
class TreeTemplate:
    """Tree shape in preorder: node 0 is the root.

    ``kinds[i]`` is one of ``"binary"``, ``"unary"`` (internal) or ``"leaf"``;
    ``children[i]`` lists the child ids of node i.
    """

    kinds: tuple[str, ...]
    children: tuple[tuple[int, ...], ...]
    name: str = "custom"
    # compile-time hint for the batched kernels; not part of the shape
    leaf_kernels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "children", tuple(tuple(c) for c in self.children))
        n = len(self.kinds)
        if n == 0 or len(self.children) != n:
            raise StructureError("kinds and children must have equal nonzero length")
        arity = {"binary": 2, "unary": 1, "leaf": 0}
        parents = [0] * n
        for i, (kind, kids) in enumerate(zip(self.kinds, self.children)):
            if kind not in arity:
                raise StructureError(f"unknown node kind {kind!r}")
            if len(kids) != arity[kind]:
                raise StructureError(f"node {i} ({kind}) has {len(kids)} children")
            for c in kids:
                if not i < c < n:
                    raise StructureError(f"node {i} has invalid child {c}")
                parents[c] += 1
        if parents[0] != 0 or any(p != 1 for p in parents[1:]):
            raise StructureError("template is not a tree rooted at node 0")
        if self.leaf_kernels is not None:
            object.__setattr__(self, "leaf_kernels", tuple(self.leaf_kernels))
            if len(self.leaf_kernels) != len(self.leaves) or any(k not in LEAF_KERNELS for k in self.leaf_kernels):
                raise StructureError("leaf_kernels needs one of 'poly'/'trans' per leaf")

    @classmethod
    def depth2(cls) -> "TreeTemplate":
        return cls(("binary", "leaf", "leaf"), ((1, 2), (), ()), name="depth2")

    @classmethod
    def depth3(cls) -> "TreeTemplate":
        # binary( unary( binary(leaf, leaf) ), leaf )
        return cls(
            ("binary", "unary", "binary", "leaf", "leaf", "leaf"),
            ((1, 5), (2,), (3, 4), (), (), ()),
            name="depth3",
        )

    @classmethod
    def from_depth(cls, depth: int) -> "TreeTemplate":
        if depth == 2:
            return cls.depth2()
        if depth == 3:
            return cls.depth3()
        raise StructureError(f"no built-in template of depth {depth}")

    @property
    def size(self) -> int:
        return len(self.kinds)

    def plain(self) -> "TreeTemplate":
        return TreeTemplate(self.kinds, self.children, self.name)

    def specialized(self, global_ops) -> "TreeTemplate":
        """Copy whose kernels are compiled for the leaf op families in ``global_ops``."""
        return TreeTemplate(self.kinds, self.children, self.name, leaf_kernels_for(global_ops, self))

    @cached_property
    def depth(self) -> int:
        def rec(i):
            return 1 + max((rec(c) for c in self.children[i]), default=0)

        return rec(0)

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.kinds) if k == "leaf")

    @cached_property
    def internals(self) -> tuple[int, ...]:
        return tuple(i for i, k in enumerate(self.kinds) if k != "leaf")

    def to_dict(self) -> dict:
        return {"name": self.name, "kinds": list(self.kinds), "children": [list(c) for c in self.children]}

    @classmethod
    def from_dict(cls, data: dict) -> "TreeTemplate":
        return cls(tuple(data["kinds"]), tuple(tuple(c) for c in data["children"]), data.get("name", "custom"))


def validate_ops(template: TreeTemplate, ops: Sequence[int], opset: OperatorSet) -> tuple[int, ...]:
    ops = tuple(int(o) for o in ops)
    if len(ops) != template.size:
        raise StructureError(f"operator sequence has length {len(ops)}, template has {template.size} nodes")
    for i, (kind, op) in enumerate(zip(template.kinds, ops)):
        n_ops = len(opset.ops_for(kind))
        if not 0 <= op < n_ops:
            raise StructureError(f"operator index {op} out of range for node {i} ({kind})")
    return ops


@dataclass(frozen=True, eq=False)
class LeafParams:
    """Ungrouped leaf: one weight per input (t first) and a bias."""

    alpha: np.ndarray
    beta: float

    @property
    def free(self) -> np.ndarray:
        return self.alpha

    @property
    def index(self) -> np.ndarray:
        return np.arange(len(self.alpha))


@dataclass(frozen=True, eq=False)
class GroupedLeafParams:
    """Leaf whose input weights are shared within groups.

    ``assignment[k]`` names the group of input k; the effective weight of
    input k is ``coeffs[assignment[k]]``.
    """

    assignment: np.ndarray
    coeffs: np.ndarray
    beta: float

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.min() < 0 or a.max() + 1 != len(self.coeffs):
            raise StructureError("assignment does not match the number of coefficients")
        object.__setattr__(self, "assignment", a)

    @property
    def alpha(self) -> np.ndarray:
        return self.coeffs[self.assignment]

    @property
    def free(self) -> np.ndarray:
        return self.coeffs

    @property
    def index(self) -> np.ndarray:
        return self.assignment


Leaf = Union[LeafParams, GroupedLeafParams]


@dataclass(frozen=True, eq=False)
class Expression:
    """A candidate solution u(t, x; template, ops, parameters)."""

    template: TreeTemplate
    ops: tuple[int, ...]
    dim: int
    leaves: tuple[Leaf, ...]
    scale: np.ndarray
    bias: np.ndarray
    opset: OperatorSet = field(default_factory=OperatorSet)

    def __post_init__(self):
        object.__setattr__(self, "ops", validate_ops(self.template, self.ops, self.opset))
        if self.dim < 1:
            raise StructureError("dim must be at least 1")
        if len(self.leaves) != len(self.template.leaves):
            raise StructureError("one parameter block per leaf is required")
        for leaf in self.leaves:
            if len(leaf.alpha) != self.dim + 1:
                raise StructureError(f"leaf weights must have length dim+1={self.dim + 1}")
        n_int = len(self.template.internals)
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(n_int))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64).reshape(n_int))

    # -- parameter vector ------------------------------------------------

    @property
    def grouped(self) -> bool:
        return any(isinstance(leaf, GroupedLeafParams) for leaf in self.leaves)

    @property
    def n_params(self) -> int:
        return sum(len(leaf.free) + 1 for leaf in self.leaves) + 2 * len(self.template.internals)

    @property
    def max_params(self) -> int:
        # size of the ungrouped layout; grouped vectors are zero-padded to it
        return len(self.leaves) * (self.dim + 2) + 2 * len(self.template.internals)

    @property
    def theta(self) -> np.ndarray:
        parts = []
        for leaf in self.leaves:
            parts.append(np.asarray(leaf.free, dtype=np.float64))
            parts.append([leaf.beta])
        parts.append(np.column_stack([self.scale, self.bias]).ravel())
        return np.concatenate(parts)

    def with_theta(self, theta) -> "Expression":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise StructureError(f"expected {self.n_params} parameters, got {theta.shape}")
        leaves, pos = [], 0
        for leaf in self.leaves:
            g = len(leaf.free)
            free, beta = theta[pos:pos + g].copy(), float(theta[pos + g])
            pos += g + 1
            if isinstance(leaf, GroupedLeafParams):
                leaves.append(GroupedLeafParams(leaf.assignment, free, beta))
            else:
                leaves.append(LeafParams(free, beta))
        sb = theta[pos:].reshape(-1, 2)
        return Expression(self.template, self.ops, self.dim, tuple(leaves), sb[:, 0].copy(), sb[:, 1].copy(), self.opset)

    def with_leaves(self, leaves: Sequence[Leaf]) -> "Expression":
        return Expression(self.template, self.ops, self.dim, tuple(leaves), self.scale, self.bias, self.opset)

    def ungrouped(self) -> "Expression":
        """Equivalent expression with every leaf weight independent."""
        return self.with_leaves([LeafParams(np.array(leaf.alpha, dtype=np.float64), leaf.beta) for leaf in self.leaves])

    @cached_property
    def gather_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Positions of (alpha, beta, scale, bias) inside ``theta``."""
        alpha_idx, beta_idx, pos = [], [], 0
        for leaf in self.leaves:
            alpha_idx.append(pos + leaf.index)
            beta_idx.append(pos + len(leaf.free))
            pos += len(leaf.free) + 1
        n_int = len(self.template.internals)
        scale_idx = pos + 2 * np.arange(n_int)
        return (
            np.asarray(alpha_idx, dtype=np.int32).reshape(len(self.leaves), self.dim + 1),
            np.asarray(beta_idx, dtype=np.int32),
            scale_idx.astype(np.int32),
            (scale_idx + 1).astype(np.int32),
        )

    @cached_property
    def global_ops(self) -> np.ndarray:
        return np.array(
            [self.opset.global_id(k, o) for k, o in zip(self.template.kinds, self.ops)], dtype=np.int32
        )

    def pad(self, theta=None) -> np.ndarray:
        theta = self.theta if theta is None else np.asarray(theta, dtype=np.float64)
        out = np.zeros(self.max_params)
        out[: len(theta)] = theta
        return out

    def packed(self):
        """(padded theta, gather index, global op ids) for the batched kernels."""
        return self.pad(), self.gather_index, self.global_ops

    def op_names(self) -> list[str]:
        return [self.opset.ops_for(k)[o] for k, o in zip(self.template.kinds, self.ops)]

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        leaves = []
        for leaf in self.leaves:
            if isinstance(leaf, GroupedLeafParams):
                leaves.append({"assignment": leaf.assignment.tolist(), "coeffs": leaf.coeffs.tolist(), "beta": leaf.beta})
            else:
                leaves.append({"alpha": leaf.alpha.tolist(), "beta": leaf.beta})
        return {
            "template": self.template.to_dict(),
            "opset": {"binary": list(self.opset.binary_ops), "unary": list(self.opset.unary_ops)},
            "ops": list(self.ops),
            "op_names": self.op_names(),
            "dim": self.dim,
            "leaves": leaves,
            "scale": self.scale.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Expression":
        leaves = []
        for item in data["leaves"]:
            if "assignment" in item:
                leaves.append(GroupedLeafParams(np.array(item["assignment"]), np.array(item["coeffs"], dtype=np.float64), float(item["beta"])))
            else:
                leaves.append(LeafParams(np.array(item["alpha"], dtype=np.float64), float(item["beta"])))
        opset = OperatorSet(tuple(data["opset"]["binary"]), tuple(data["opset"]["unary"]))
        return cls(
            TreeTemplate.from_dict(data["template"]),
            tuple(data["ops"]),
            int(data["dim"]),
            tuple(leaves),
            np.array(data["scale"], dtype=np.float64),
            np.array(data["bias"], dtype=np.float64),
            opset,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Expression":
        return cls.from_dict(json.loads(text))

    def __str__(self) -> str:
        return to_string(self)


def build_expression(
    template: TreeTemplate,
    ops: Sequence[int],
    dim: int,
    rng_seed: int,
    opset: OperatorSet | None = None,
) -> Expression:
    """Fresh expression: leaf weights ~ U[-1, 1], zero biases, identity nodes."""
    opset = opset or OperatorSet()
    ops = validate_ops(template, ops, opset)
    if dim < 1:
        raise StructureError("dim must be at least 1")
    rng = np.random.default_rng(rng_seed)
    leaves = tuple(LeafParams(rng.uniform(-1.0, 1.0, dim + 1), 0.0) for _ in template.leaves)
    n_int = len(template.internals)
    return Expression(template, ops, dim, leaves, np.ones(n_int), np.zeros(n_int), opset)


# -- batched kernels -------------------------------------------------------


class JetArrays(NamedTuple):
    """Batched jet: value, du/dt, grad (n, d), Hessian diagonal (n, d) and
    the off-diagonal entries for a fixed list of pairs (n, p)."""

    v: jax.Array
    vt: jax.Array
    g: jax.Array
    hd: jax.Array
    ho: jax.Array


def _unpack(theta, idx):
    a_idx, b_idx, s_idx, c_idx = idx
    return theta[a_idx], theta[b_idx], theta[s_idx], theta[c_idx]


def tree_values(template: TreeTemplate, theta, idx, ops, t, x):
    """u at each (t[k], x[k]); t has shape (n,), x shape (n, d)."""
    alpha, beta, scale, bias = _unpack(theta, idx)
    z = jnp.concatenate([t[:, None], x], axis=1)
    leaf_pos = {node: k for k, node in enumerate(template.leaves)}
    kernels = template.leaf_kernels or (None,) * len(template.leaves)
    int_pos = {node: k for k, node in enumerate(template.internals)}

    def rec(node):
        kind = template.kinds[node]
        if kind == "leaf":
            k = leaf_pos[node]
            return leaf_value(kernels[k], ops[node], z) @ alpha[k] + beta[k]
        kids = template.children[node]
        if kind == "unary":
            out = lax.switch(ops[node], _UNARY_VAL, rec(kids[0]))
        else:
            a, b = rec(kids[0]), rec(kids[1])
            out = jnp.where(ops[node] == 2, a * b, a + jnp.where(ops[node] == 1, -1.0, 1.0) * b)
        j = int_pos[node]
        return scale[j] * out + bias[j]

    return rec(0)


def tree_jet(template: TreeTemplate, theta, idx, ops, t, x, pairs: tuple[tuple[int, int], ...] = ()) -> JetArrays:
    """Forward propagation of (u, u_t, grad u, diag H, selected H_ij)."""
    alpha, beta, scale, bias = _unpack(theta, idx)
    z = jnp.concatenate([t[:, None], x], axis=1)
    n = t.shape[0]
    ii = np.array([p[0] for p in pairs], dtype=np.int32)
    jj = np.array([p[1] for p in pairs], dtype=np.int32)
    leaf_pos = {node: k for k, node in enumerate(template.leaves)}
    kernels = template.leaf_kernels or (None,) * len(template.leaves)
    int_pos = {node: k for k, node in enumerate(template.internals)}

    def binary(op, a, b):
        # add/sub/mul are all cheap, so select instead of branching; a cond
        # here blocks fusion and doubles the cost of the backward pass.
        sign = jnp.where(op == 1, -1.0, 1.0)
        av, bv = a.v[:, None], b.v[:, None]
        prod = JetArrays(
            a.v * b.v,
            a.vt * b.v + a.v * b.vt,
            a.g * bv + av * b.g,
            a.hd * bv + 2.0 * a.g * b.g + av * b.hd,
            a.ho * bv + a.g[:, ii] * b.g[:, jj] + a.g[:, jj] * b.g[:, ii] + av * b.ho,
        )
        is_mul = op == 2
        return JetArrays(*(jnp.where(is_mul, m, p + sign * q) for m, p, q in zip(prod, a, b)))

    def compose(op, c):
        # Outer derivatives are per-point scalars, so only they go through the switch.
        f, f1, f2 = lax.switch(op, _UNARY_JET, c.v)
        f1c, f2c = f1[:, None], f2[:, None]
        return JetArrays(
            f,
            f1 * c.vt,
            f1c * c.g,
            f2c * c.g * c.g + f1c * c.hd,
            f2c * c.g[:, ii] * c.g[:, jj] + f1c * c.ho,
        )

    def rec(node):
        kind = template.kinds[node]
        if kind == "leaf":
            k = leaf_pos[node]
            a = alpha[k]
            f, f1, f2 = leaf_jet(kernels[k], ops[node], z)
            return JetArrays(
                f @ a + beta[k],
                f1[:, 0] * a[0],
                f1[:, 1:] * a[1:],
                f2[:, 1:] * a[1:],
                jnp.zeros((n, len(pairs)), dtype=z.dtype),
            )
        kids = template.children[node]
        if kind == "unary":
            out = compose(ops[node], rec(kids[0]))
        else:
            out = binary(ops[node], rec(kids[0]), rec(kids[1]))
        j = int_pos[node]
        s = scale[j]
        return JetArrays(s * out.v + bias[j], s * out.vt, s * out.g, s * out.hd, s * out.ho)

    return rec(0)


_values_jit = jax.jit(tree_values, static_argnums=0)
_jet_jit = jax.jit(tree_jet, static_argnums=(0, 6))


def _as_batch(dim: int, t, x):
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x_arr = np.asarray(x, dtype=np.float64)
    scalar = t_arr.shape == (1,) and np.ndim(t) == 0
    x_arr = x_arr.reshape(-1, dim)
    if x_arr.shape[0] != t_arr.shape[0]:
        raise StructureError(f"x must have {dim} coordinates per point")
    return t_arr, x_arr, scalar


def evaluate(expr: Expression, t, x):
    """u(t, x).  Scalar t with a length-d x gives a float; batches give arrays.

    Overflow shows up as inf/nan in the result rather than an exception.
    """
    t_arr, x_arr, scalar = _as_batch(expr.dim, t, x)
    theta, idx, ops = expr.packed()
    out = np.asarray(_values_jit(expr.template, theta, idx, ops, t_arr, x_arr))
    return float(out[0]) if scalar else out


@dataclass
class Jet:
    value: float
    dt: float
    grad: np.ndarray
    hess: dict[tuple[int, int], float]
    param_tangents: dict | None = None


def _split_pairs(dim, hess_pairs):
    pairs = [(int(i), int(j)) for i, j in hess_pairs]
    for i, j in pairs:
        if not (0 <= i < dim and 0 <= j < dim):
            raise StructureError(f"Hessian index pair {(i, j)} out of range for dim {dim}")
    off = tuple(sorted({(min(i, j), max(i, j)) for i, j in pairs if i != j}))
    return pairs, off


def derivatives(expr: Expression, t: float, x, hess_pairs=(), with_params: bool = False) -> Jet:
    """Value, du/dt, spatial gradient and the requested Hessian entries at one point.

    With ``with_params`` the derivative of every returned quantity with
    respect to ``expr.theta`` is attached as ``param_tangents``.
    """
    t_arr, x_arr, _ = _as_batch(expr.dim, t, x)
    if t_arr.shape != (1,):
        raise StructureError("derivatives() takes a single point")
    pairs, off = _split_pairs(expr.dim, hess_pairs)
    _, idx, ops = expr.packed()
    n_free = expr.n_params
    pad = expr.max_params - n_free

    def jet_of(theta_free):
        theta = jnp.concatenate([theta_free, jnp.zeros(pad)])
        return tree_jet(expr.template, theta, idx, ops, jnp.asarray(t_arr), jnp.asarray(x_arr), off)

    theta_free = jnp.asarray(expr.theta)
    if with_params:
        jet = jax.jit(jet_of)(theta_free)
    else:
        jet = _jet_jit(expr.template, expr.pad(), idx, ops, t_arr, x_arr, off)
    jet = JetArrays(*(np.asarray(a)[0] for a in jet))

    def hess_entry(arrs, i, j):
        return arrs.hd[i] if i == j else arrs.ho[off.index((min(i, j), max(i, j)))]

    hess = {(i, j): float(hess_entry(jet, i, j)) for i, j in pairs}
    tangents = None
    if with_params:
        jac = jax.jit(jax.jacfwd(jet_of))(theta_free)
        jac = JetArrays(*(np.asarray(a)[0] for a in jac))
        tangents = {
            "value": jac.v,
            "dt": jac.vt,
            "grad": jac.g,
            "hess": {(i, j): np.asarray(hess_entry(jac, i, j)) for i, j in pairs},
        }
    return Jet(float(jet.v), float(jet.vt), np.asarray(jet.g, dtype=np.float64), hess, tangents)


# -- printing --------------------------------------------------------------


def format_coef(c: float) -> str:
    """Seven significant digits; positional unless very small or large."""
    a = abs(c)
    if a != 0.0 and (a < 1e-5 or a >= 1e7):
        return f"{c:.7g}"
    return np.format_float_positional(c, precision=7, unique=False, fractional=False, trim="-")


class _Lin:
    """Sum of coefficient * term plus a constant, used only for printing."""

    def __init__(self, terms=None, const=0.0):
        self.terms: dict[str, float] = dict(terms or {})
        self.const = float(const)

    def scaled(self, s):
        return _Lin({k: s * v for k, v in self.terms.items()}, s * self.const)

    def plus(self, other, sign=1.0):
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0.0) + sign * v
        return _Lin(terms, self.const + sign * other.const)

    def render(self) -> str:
        parts = []
        for term, c in self.terms.items():
            if c == 0.0:
                continue
            mag = abs(c)
            body = term if mag == 1.0 else f"{format_coef(mag)}*{term}"
            parts.append(("-" if c < 0 else "+", body))
        if self.const != 0.0 or not parts:
            parts.append(("-" if self.const < 0 else "+", format_coef(abs(self.const))))
        out = ("-" if parts[0][0] == "-" else "") + parts[0][1]
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out

    def is_const(self):
        return all(v == 0.0 for v in self.terms.values())


def _apply_unary(name: str, arg: str) -> str | None:
    if name == "0":
        return None
    if name == "1":
        return "1"
    if name == "x":
        return arg
    if name.startswith("x^"):
        wrapped = arg if arg.isidentifier() else f"({arg})"
        return f"{wrapped}**{name[2:]}"
    return f"{name}({arg})"


def variable_names(dim: int) -> list[str]:
    return ["t", "x"] if dim == 1 else ["t"] + [f"x{k}" for k in range(1, dim + 1)]


def to_string(expr: Expression) -> str:
    """Infix rendering with coefficients at 7 significant digits.

    The output is valid Python/SymPy syntax in the variables ``t`` and ``x``
    (d = 1) or ``t, x1..xd``.  Grouped weights are printed once in front of
    a parenthesized sum.
    """
    names = variable_names(expr.dim)
    labels = expr.op_names()
    leaf_pos = {node: k for k, node in enumerate(expr.template.leaves)}
    int_pos = {node: k for k, node in enumerate(expr.template.internals)}

    def leaf_lin(leaf: Leaf, op: str) -> _Lin:
        lin = _Lin(const=leaf.beta)
        if op == "0":
            return lin
        if op == "1":
            lin.const += float(np.sum(leaf.alpha))
            return lin
        groups: dict[int, list[int]] = {}
        for k, gid in enumerate(leaf.index):
            groups.setdefault(int(gid), []).append(k)
        for gid, members in groups.items():
            terms = [_apply_unary(op, names[k]) for k in members]
            key = terms[0] if len(terms) == 1 else "(" + " + ".join(terms) + ")"
            lin.terms[key] = lin.terms.get(key, 0.0) + float(leaf.free[gid])
        return lin

    def rec(node) -> _Lin:
        kind = expr.template.kinds[node]
        op = labels[node]
        if kind == "leaf":
            return leaf_lin(expr.leaves[leaf_pos[node]], op)
        kids = expr.template.children[node]
        if kind == "unary":
            child = rec(kids[0])
            if op == "x":
                out = child
            elif child.is_const() or op in ("0", "1"):
                val = float(np.asarray(_UNARY_VAL[UNARY_OPS.index(op)](jnp.asarray(child.const))))
                out = _Lin(const=val)
            else:
                out = _Lin({_apply_unary(op, child.render()): 1.0})
        else:
            a, b = rec(kids[0]), rec(kids[1])
            if op == "+":
                out = a.plus(b)
            elif op == "-":
                out = a.plus(b, -1.0)
            elif a.is_const():
                out = b.scaled(a.const)
            elif b.is_const():
                out = a.scaled(b.const)
            else:
                out = _Lin({f"({a.render()})*({b.render()})": 1.0})
        j = int_pos[node]
        out = out.scaled(float(expr.scale[j]))
        out.const += float(expr.bias[j])
        return out

    return rec(0).render()
