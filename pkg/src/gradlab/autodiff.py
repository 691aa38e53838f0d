"""Dense tensors with reverse-mode automatic differentiation.

Every operation is a node in an implicit DAG (``op`` name, input tensors,
static attributes).  Adjoint rules are written once against a small "ops
namespace" and run in two modes:

* graph mode -- adjoints are themselves Tensors built from the same
  primitive set, so gradients can be differentiated again (the attack
  optimizes a function of gradients);
* raw mode -- adjoints are plain ndarrays, for the outermost gradient
  where no further differentiation is needed.

Double precision is the default; passing float32 leaves gives a faster
single-precision graph but is excluded from the gradient-check tolerances.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

from .errors import ConfigError, InputError, OracleError, ShapeError, UsageError

_ids = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class Tensor:
    """A dense row-major array plus an optional link to the producing op.

    Leaf tensors have ``op is None``.  ``data`` is treated as immutable
    once wrapped; all primitives allocate fresh outputs.
    """

    __slots__ = ("data", "op", "inputs", "attrs", "tid")

    def __init__(self, data, op=None, inputs=(), attrs=None):
        self.data = data
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        kind = self.op or "leaf"
        return f"Tensor(shape={self.data.shape}, op={kind})"

    # arithmetic sugar used throughout the model/attack code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, dtype=np.float64) -> Tensor:
    """Wrap array-like data as a leaf tensor (contiguous, row-major)."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    return Tensor(arr)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    """A leaf that never receives gradient (detached by construction)."""
    return as_tensor(x)


# ---------------------------------------------------------------------------
# forward evaluation table (single source of truth; replay() reuses it)
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}


def _fwd(name):
    def deco(fn):
        _FORWARD[name] = fn
        return fn

    return deco


@_fwd("add")
def _f_add(v, a):
    return v[0] + v[1]


@_fwd("sub")
def _f_sub(v, a):
    return v[0] - v[1]


@_fwd("mul")
def _f_mul(v, a):
    return v[0] * v[1]


@_fwd("div")
def _f_div(v, a):
    return v[0] / v[1]


@_fwd("neg")
def _f_neg(v, a):
    return -v[0]


@_fwd("maximum")
def _f_maximum(v, a):
    return np.maximum(v[0], v[1])


@_fwd("matmul")
def _f_matmul(v, a):
    return v[0] @ v[1]


@_fwd("exp")
def _f_exp(v, a):
    return np.exp(v[0])


@_fwd("log")
def _f_log(v, a):
    return np.log(v[0])


@_fwd("tanh")
def _f_tanh(v, a):
    return np.tanh(v[0])


@_fwd("erf")
def _f_erf(v, a):
    return _np_erf(v[0])


@_fwd("sqrt")
def _f_sqrt(v, a):
    return np.sqrt(v[0])


@_fwd("sum")
def _f_sum(v, a):
    return np.asarray(np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]))


@_fwd("reshape")
def _f_reshape(v, a):
    return np.ascontiguousarray(v[0]).reshape(a["shape"])


@_fwd("swapaxes")
def _f_swapaxes(v, a):
    return np.swapaxes(v[0], a["a1"], a["a2"])


@_fwd("broadcast_to")
def _f_broadcast_to(v, a):
    return np.broadcast_to(v[0], a["shape"])


@_fwd("getitem")
def _f_getitem(v, a):
    return np.ascontiguousarray(v[0][a["key"]])


@_fwd("pad_at")
def _f_pad_at(v, a):
    out = np.zeros(a["shape"], dtype=v[0].dtype)
    out[a["key"]] = v[0]
    return out


@_fwd("embedding")
def _f_embedding(v, a):
    return np.ascontiguousarray(v[0][a["ids"]])


@_fwd("scatter_rows")
def _f_scatter_rows(v, a):
    out = np.zeros((a["num_rows"],) + v[0].shape[a["ids"].ndim :], dtype=v[0].dtype)
    np.add.at(out, a["ids"], v[0])
    return out


def _make(op: str, inputs: tuple, attrs=None) -> Tensor:
    data = _FORWARD[op](tuple(t.data for t in inputs), attrs)
    return Tensor(data, op, inputs, attrs)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return _make("add", (as_tensor(a), as_tensor(b)))


def sub(a, b) -> Tensor:
    return _make("sub", (as_tensor(a), as_tensor(b)))


def mul(a, b) -> Tensor:
    return _make("mul", (as_tensor(a), as_tensor(b)))


def div(a, b) -> Tensor:
    return _make("div", (as_tensor(a), as_tensor(b)))


def neg(a) -> Tensor:
    return _make("neg", (as_tensor(a),))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    return _make("maximum", (as_tensor(a), as_tensor(b)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return _make("matmul", (a, b))


def exp(a) -> Tensor:
    return _make("exp", (as_tensor(a),))


def log(a) -> Tensor:
    return _make("log", (as_tensor(a),))


def tanh(a) -> Tensor:
    return _make("tanh", (as_tensor(a),))


def erf(a) -> Tensor:
    return _make("erf", (as_tensor(a),))


def sqrt(a) -> Tensor:
    return _make("sqrt", (as_tensor(a),))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    return _make("sum", (a,), {"axis": _norm_axis(axis, a.ndim), "keepdims": keepdims})


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=ax, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    return _make("reshape", (as_tensor(a),), {"shape": tuple(shape)})


def swapaxes(a, a1: int, a2: int) -> Tensor:
    return _make("swapaxes", (as_tensor(a),), {"a1": a1, "a2": a2})


def broadcast_to(a, shape) -> Tensor:
    return _make("broadcast_to", (as_tensor(a),), {"shape": tuple(shape)})


def getitem(a, key) -> Tensor:
    """Static indexing (ints/slices only, so the adjoint is a fixed pad)."""
    a = as_tensor(a)
    return _make("getitem", (a,), {"key": key, "shape": a.shape})


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; adjoint scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    return _make("embedding", (table,), {"ids": ids, "num_rows": table.shape[0]})


def scatter_rows(values, ids, num_rows: int) -> Tensor:
    """Adjoint of embedding: accumulate ``values`` into ``num_rows`` rows."""
    values = as_tensor(values)
    ids = np.asarray(ids)
    return _make("scatter_rows", (values,), {"ids": ids, "num_rows": num_rows})


def stop_gradient(a) -> Tensor:
    """Detach: same values, no link to the producing graph."""
    a = as_tensor(a)
    return Tensor(np.array(a.data, copy=True))


# ---------------------------------------------------------------------------
# ops namespaces: the same adjoint rules drive graph mode and raw mode
# ---------------------------------------------------------------------------


class _GraphOps:
    """Adjoint arithmetic producing recorded Tensors (differentiable)."""

    record = True

    @staticmethod
    def val(t):
        return t

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    div = staticmethod(div)
    neg = staticmethod(neg)
    matmul = staticmethod(lambda a, b: _make("matmul", (a, b)))
    exp = staticmethod(exp)
    sum = staticmethod(tsum)
    reshape = staticmethod(reshape)
    swapaxes = staticmethod(swapaxes)
    broadcast_to = staticmethod(broadcast_to)
    getitem = staticmethod(lambda a, key: getitem(a, key))
    pad_at = staticmethod(
        lambda v, key, shape: _make("pad_at", (v,), {"key": key, "shape": shape})
    )
    embedding = staticmethod(embedding)
    scatter_rows = staticmethod(scatter_rows)
    greater_equal = staticmethod(
        lambda a, b: constant((a.data >= b.data).astype(a.data.dtype))
    )

    @staticmethod
    def shape(x):
        return x.data.shape


class _RawOps:
    """Adjoint arithmetic on bare ndarrays (fast, not differentiable)."""

    record = False

    @staticmethod
    def val(t):
        return t.data

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    div = staticmethod(np.divide)
    neg = staticmethod(np.negative)
    matmul = staticmethod(lambda a, b: a @ b)
    exp = staticmethod(np.exp)

    @staticmethod
    def sum(a, axis=None, keepdims=False):
        return np.asarray(np.sum(a, axis=axis, keepdims=keepdims))

    @staticmethod
    def reshape(a, shape):
        return np.ascontiguousarray(a).reshape(shape)

    swapaxes = staticmethod(np.swapaxes)

    @staticmethod
    def broadcast_to(a, shape):
        return np.broadcast_to(a, shape)

    @staticmethod
    def getitem(a, key):
        return a[key]

    @staticmethod
    def pad_at(v, key, shape):
        out = np.zeros(shape, dtype=v.dtype)
        out[key] = v
        return out

    @staticmethod
    def embedding(table, ids):
        return table[np.asarray(ids)]

    @staticmethod
    def scatter_rows(values, ids, num_rows):
        ids = np.asarray(ids)
        out = np.zeros((num_rows,) + values.shape[ids.ndim :], dtype=values.dtype)
        np.add.at(out, ids, values)
        return out

    @staticmethod
    def greater_equal(a, b):
        return (a >= b).astype(np.result_type(a))

    @staticmethod
    def shape(x):
        return np.shape(x)


def _unbroadcast(o, g, target_shape):
    """Reduce adjoint ``g`` back to ``target_shape`` after broadcasting."""
    gshape = o.shape(g)
    if gshape == tuple(target_shape):
        return g
    extra = len(gshape) - len(target_shape)
    if extra > 0:
        g = o.sum(g, axis=tuple(range(extra)), keepdims=False)
        gshape = o.shape(g)
    squeeze = tuple(
        i for i, (gd, td) in enumerate(zip(gshape, target_shape)) if td == 1 and gd != 1
    )
    if squeeze:
        g = o.sum(g, axis=squeeze, keepdims=True)
    if o.shape(g) != tuple(target_shape):
        g = o.reshape(g, tuple(target_shape))
    return g


# adjoint rules: op name -> fn(ops, node, g) -> tuple of per-input adjoints
_VJP: dict[str, Callable] = {}


def _vjp(name):
    def deco(fn):
        _VJP[name] = fn
        return fn

    return deco


@_vjp("add")
def _b_add(o, n, g):
    a, b = n.inputs
    return (_unbroadcast(o, g, a.shape), _unbroadcast(o, g, b.shape))


@_vjp("sub")
def _b_sub(o, n, g):
    a, b = n.inputs
    return (_unbroadcast(o, g, a.shape), _unbroadcast(o, o.neg(g), b.shape))


@_vjp("mul")
def _b_mul(o, n, g):
    a, b = n.inputs
    return (
        _unbroadcast(o, o.mul(g, o.val(b)), a.shape),
        _unbroadcast(o, o.mul(g, o.val(a)), b.shape),
    )


@_vjp("div")
def _b_div(o, n, g):
    a, b = n.inputs
    ga = o.div(g, o.val(b))
    # d(a/b)/db = -(a/b)/b, reusing the node value
    gb = o.neg(o.div(o.mul(g, o.val(n)), o.val(b)))
    return (_unbroadcast(o, ga, a.shape), _unbroadcast(o, gb, b.shape))


@_vjp("neg")
def _b_neg(o, n, g):
    return (o.neg(g),)


@_vjp("maximum")
def _b_maximum(o, n, g):
    a, b = n.inputs
    mask_a = o.greater_equal(o.val(a), o.val(b))
    ga = o.mul(g, mask_a)
    gb = o.sub(g, ga)
    return (_unbroadcast(o, ga, a.shape), _unbroadcast(o, gb, b.shape))


@_vjp("matmul")
def _b_matmul(o, n, g):
    a, b = n.inputs
    av, bv = o.val(a), o.val(b)
    ga = o.matmul(g, o.swapaxes(bv, -1, -2))
    gb = o.matmul(o.swapaxes(av, -1, -2), g)
    return (_unbroadcast(o, ga, a.shape), _unbroadcast(o, gb, b.shape))


@_vjp("exp")
def _b_exp(o, n, g):
    return (o.mul(g, o.val(n)),)


@_vjp("log")
def _b_log(o, n, g):
    return (o.div(g, o.val(n.inputs[0])),)


@_vjp("tanh")
def _b_tanh(o, n, g):
    y = o.val(n)
    return (o.sub(g, o.mul(o.mul(g, y), y)),)


@_vjp("erf")
def _b_erf(o, n, g):
    x = o.val(n.inputs[0])
    dens = o.mul(_TWO_OVER_SQRT_PI, o.exp(o.neg(o.mul(x, x))))
    return (o.mul(g, dens),)


@_vjp("sqrt")
def _b_sqrt(o, n, g):
    return (o.div(g, o.mul(2.0, o.val(n))),)


@_vjp("sum")
def _b_sum(o, n, g):
    (a,) = n.inputs
    axis, keepdims = n.attrs["axis"], n.attrs["keepdims"]
    if axis is None:
        return (o.broadcast_to(o.reshape(g, (1,) * a.ndim), a.shape),)
    if not keepdims:
        kshape = list(a.shape)
        for ax in axis:
            kshape[ax] = 1
        g = o.reshape(g, tuple(kshape))
    return (o.broadcast_to(g, a.shape),)


@_vjp("reshape")
def _b_reshape(o, n, g):
    return (o.reshape(g, n.inputs[0].shape),)


@_vjp("swapaxes")
def _b_swapaxes(o, n, g):
    return (o.swapaxes(g, n.attrs["a1"], n.attrs["a2"]),)


@_vjp("broadcast_to")
def _b_broadcast_to(o, n, g):
    return (_unbroadcast(o, g, n.inputs[0].shape),)


@_vjp("getitem")
def _b_getitem(o, n, g):
    return (o.pad_at(g, n.attrs["key"], n.attrs["shape"]),)


@_vjp("pad_at")
def _b_pad_at(o, n, g):
    return (o.getitem(g, n.attrs["key"]),)


@_vjp("embedding")
def _b_embedding(o, n, g):
    return (o.scatter_rows(g, n.attrs["ids"], n.attrs["num_rows"]),)


@_vjp("scatter_rows")
def _b_scatter_rows(o, n, g):
    return (o.embedding(g, n.attrs["ids"]),)


# ---------------------------------------------------------------------------
# reverse-mode driver
# ---------------------------------------------------------------------------


def _active_nodes(output: Tensor, wrt: Sequence[Tensor]):
    """Nodes on some path wrt -> ... -> output, in reverse topological order."""
    ancestors: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.tid in ancestors:
            continue
        ancestors[node.tid] = node
        stack.extend(node.inputs)

    wrt_ids = {t.tid for t in wrt}
    active: set[int] = set()
    for tid in sorted(ancestors):  # creation order is topological
        node = ancestors[tid]
        if tid in wrt_ids or any(i.tid in active for i in node.inputs):
            active.add(tid)
    ordered = [ancestors[t] for t in sorted(active, reverse=True)]
    return ordered, active


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each of ``wrt``.

    With ``create_graph=True`` the returned tensors are graph-recorded, so
    ``grad`` may be applied again to scalars computed from them.
    """
    if output.size != 1:
        raise UsageError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    ordered, active = _active_nodes(output, wrt)
    missing = [t for t in wrt if t.tid not in active]
    if missing:
        raise UsageError(
            f"{len(missing)} wrt tensor(s) unreachable from the output graph"
        )

    o = _GraphOps if create_graph else _RawOps
    seed = np.ones_like(output.data)
    adjoint: dict[int, object] = {output.tid: Tensor(seed) if create_graph else seed}
    wrt_ids = {t.tid for t in wrt}
    results: dict[int, object] = {}

    for node in ordered:
        g = adjoint.pop(node.tid, None)
        if g is None:
            continue
        if node.tid in wrt_ids:
            results[node.tid] = g
        if node.op is None:
            continue
        contribs = _VJP[node.op](o, node, g)
        for inp, c in zip(node.inputs, contribs):
            if inp.tid not in active:
                continue
            prev = adjoint.get(inp.tid)
            adjoint[inp.tid] = c if prev is None else o.add(prev, c)

    out = []
    for t in wrt:
        g = results.get(t.tid)
        if g is None:
            # active nodes always receive an adjoint; treat a miss as a bug
            raise UsageError("no gradient accumulated for a wrt tensor")
        out.append(g if isinstance(g, Tensor) else Tensor(g))
    return out


def replay(root: Tensor) -> np.ndarray:
    """Recompute ``root`` from leaf data by replaying recorded primitives.

    Deterministic: identical leaves reproduce bit-identical outputs.
    """
    order: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.tid in order:
            continue
        order[node.tid] = node
        stack.extend(node.inputs)
    values: dict[int, np.ndarray] = {}
    for tid in sorted(order):
        node = order[tid]
        if node.op is None:
            values[tid] = node.data
        else:
            values[tid] = _FORWARD[node.op](
                tuple(values[i.tid] for i in node.inputs), node.attrs
            )
    return values[root.tid]


# ---------------------------------------------------------------------------
# composite operations (adjoints emerge from the primitive compositions)
# ---------------------------------------------------------------------------


def softmax_rowwise(x) -> Tensor:
    """Row-stabilized softmax over the last axis.

    The subtracted row max is detached: softmax is shift-invariant, so the
    detachment is mathematically exact and keeps adjoints clean.
    """
    x = as_tensor(x)
    m = constant(np.max(x.data, axis=-1, keepdims=True))
    e = exp(sub(x, m))
    return div(e, tsum(e, axis=-1, keepdims=True))


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = as_tensor(x)
    phi = mul(add(erf(mul(x, _INV_SQRT2)), 1.0), 0.5)
    return mul(x, phi)


def layer_norm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d < 2:
        raise ConfigError(f"layer_norm needs last-axis size >= 2, got {d}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    xhat = div(xc, sqrt(add(var, eps)))
    return add(mul(xhat, gamma), beta)


def log_softmax_rowwise(x) -> Tensor:
    x = as_tensor(x)
    m = constant(np.max(x.data, axis=-1, keepdims=True))
    z = sub(x, m)
    lse = add(log(tsum(exp(z), axis=-1, keepdims=True)), m)
    return sub(x, lse)


def cross_entropy_with_logits(logits, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise InputError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InputError(f"labels must lie in [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = tsum(mul(log_softmax_rowwise(logits), constant(onehot)))
    return mul(neg(picked), 1.0 / b)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between grad(f) and central differences at ``x``.

    ``indices`` restricts the check to a subset of flat coordinates (the
    full sweep is quadratic in practice for large tensors).
    """
    if h <= 0:
        raise OracleError("finite_diff_check step must be positive")
    base = np.array(x.data, copy=True)
    leaf = Tensor(base)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise OracleError("objective is non-finite at the base point")
    (g,) = grad(out, [leaf])
    analytic = np.array(g.data, copy=True).reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(np.array(base, copy=True))).item()
        flat[i] = orig - h
        lo = f(Tensor(np.array(base, copy=True))).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise OracleError(f"objective non-finite at coordinate {i}")
        numeric = (hi - lo) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
