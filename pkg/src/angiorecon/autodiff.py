"""Small reverse-mode autodiff engine over NumPy arrays.

A :class:`Tape` records every operation applied to its :class:`Var` objects in
execution order, so the record is already topologically sorted. Calling
:meth:`Tape.gradient` walks the record backwards once, invoking each node's
vector-Jacobian product.

Only the operations needed by the refinement stage are provided. Each is
registered under a kind name and :meth:`Tape.record` refuses unknown kinds, so
an unsupported operation fails when it is recorded rather than during the
backward pass. Applying a NumPy ufunc to a ``Var`` raises ``TypeError``
immediately for the same reason.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, NumericalError

SUPPORTED_OPS = {
    "leaf", "add", "sub", "mul", "div", "neg", "matmul", "spmm", "relu", "sigmoid",
    "softplus", "exp", "log", "abs", "square", "clip", "sum", "mean", "l2norm", "cross",
    "normalize", "reshape", "transpose", "concat", "gather", "scatter_add",
    "bilinear_sample", "conv2d", "avg_pool2",
}


def register_op(kind: str) -> None:
    """Allow an externally implemented primitive (e.g. a rasterizer kernel)."""
    SUPPORTED_OPS.add(kind)


class Var:
    __slots__ = ("value", "tape", "index", "requires_grad")
    __array_ufunc__ = None  # np.exp(var) etc. must fail loudly

    def __init__(self, value, tape, index, requires_grad):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return gather(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class _Node:
    __slots__ = ("kind", "parents", "vjp", "requires")

    def __init__(self, kind, parents, vjp, requires):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp
        self.requires = requires


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def release(self) -> None:
        """Drop the record. Backward closures reference vars that reference the
        tape, so a finished tape is a reference cycle; clearing it frees the
        intermediate arrays immediately instead of at the next full GC."""
        self.nodes.clear()

    def var(self, value, requires_grad: bool = True) -> Var:
        value = np.asarray(value, dtype=float)
        self.nodes.append(_Node("leaf", (), None, requires_grad))
        return Var(value, self, len(self.nodes) - 1, requires_grad)

    def const(self, value) -> Var:
        return self.var(value, requires_grad=False)

    def record(self, kind: str, value, parents: Sequence[Var], vjp: Callable) -> Var:
        if kind not in SUPPORTED_OPS:
            raise InvalidInputError(f"operation {kind!r} is not supported by the tape")
        req = any(p.requires_grad for p in parents)
        self.nodes.append(_Node(kind, tuple(p.index for p in parents), vjp if req else None, req))
        return Var(value, self, len(self.nodes) - 1, req)

    def gradient(self, output: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` with respect to each var in ``wrt``."""
        wrt = list(wrt)
        if output.tape is not self:
            raise InvalidInputError("output was not recorded on this tape")
        if output.value.size != 1:
            raise InvalidInputError(f"gradient needs a scalar output, got shape {output.value.shape}")
        keep = {w.index for w in wrt}
        grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads.get(i) if i in keep else grads.pop(i, None)
            node = nodes[i]
            if g is None or node.vjp is None:
                continue
            needs = tuple(nodes[p].requires for p in node.parents)
            pgrads = node.vjp(g, needs)
            for p, need, pg in zip(node.parents, needs, pgrads):
                if not need or pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        out = []
        for w in wrt:
            g = grads.get(w.index)
            out.append(np.zeros_like(w.value) if g is None else np.asarray(g).reshape(w.value.shape))
        return out


def grad(output: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    return output.tape.gradient(output, wrt)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _parts(a, b):
    """Split operands into (values, vars, tape) allowing one side to be a constant."""
    tape = a.tape if isinstance(a, Var) else b.tape
    av = a.value if isinstance(a, Var) else np.asarray(a, dtype=float)
    bv = b.value if isinstance(b, Var) else np.asarray(b, dtype=float)
    parents = [x for x in (a, b) if isinstance(x, Var)]
    return av, bv, parents, tape


def _binary(kind, a, b, value, da, db):
    av, bv, parents, tape = _parts(a, b)
    a_is, b_is = isinstance(a, Var), isinstance(b, Var)

    def vjp(g, needs):
        out = []
        k = 0
        if a_is:
            out.append(_unbroadcast(da(g), av.shape) if needs[k] else None)
            k += 1
        if b_is:
            out.append(_unbroadcast(db(g), bv.shape) if needs[k] else None)
        return out

    return tape.record(kind, value, parents, vjp)


def add(a, b):
    av, bv, _, _ = _parts(a, b)
    return _binary("add", a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv, _, _ = _parts(a, b)
    return _binary("sub", a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv, _, _ = _parts(a, b)
    return _binary("mul", a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv, _, _ = _parts(a, b)
    out = av / bv
    return _binary("div", a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def _unary(kind, x: Var, value, dfn):
    return x.tape.record(kind, value, [x], lambda g, needs: [dfn(g)])


def neg(x):
    return _unary("neg", x, -x.value, lambda g: -g)


def relu(x):
    mask = x.value > 0
    return _unary("relu", x, np.where(mask, x.value, 0.0), lambda g: g * mask)


def sigmoid(x):
    s = _sigmoid(x.value)
    return _unary("sigmoid", x, s, lambda g: g * s * (1.0 - s))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softplus(x):
    return _unary("softplus", x, _softplus(x.value), lambda g: g * _sigmoid(x.value))


def exp(x):
    e = np.exp(x.value)
    return _unary("exp", x, e, lambda g: g * e)


def log(x):
    return _unary("log", x, np.log(x.value), lambda g: g / x.value)


def abs_(x):
    return _unary("abs", x, np.abs(x.value), lambda g: g * np.sign(x.value))


def square(x):
    return _unary("square", x, x.value * x.value, lambda g: 2.0 * g * x.value)


def clip(x, lo, hi):
    inside = (x.value >= lo) & (x.value <= hi)
    return _unary("clip", x, np.clip(x.value, lo, hi), lambda g: g * inside)


def sum_(x, axis=None):
    shape = x.value.shape

    def d(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", x, np.asarray(x.value.sum(axis=axis)), d)


def mean(x, axis=None):
    shape = x.value.shape
    n = x.value.size if axis is None else shape[axis]

    def d(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, shape).copy()

    return _unary("mean", x, np.asarray(x.value.mean(axis=axis)), d)


def l2norm(x, axis=-1):
    n = np.sqrt((x.value * x.value).sum(axis=axis))
    return _unary("l2norm", x, n, lambda g: np.expand_dims(g / n, axis) * x.value)


def normalize(x, axis=-1):
    n = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))
    y = x.value / n

    def d(g):
        return (g - y * (y * g).sum(axis=axis, keepdims=True)) / n

    return _unary("normalize", x, y, d)


def cross(a, b):
    av, bv, _, _ = _parts(a, b)
    return _binary("cross", a, b, np.cross(av, bv), lambda g: np.cross(bv, g), lambda g: np.cross(g, av))


def reshape(x, shape):
    old = x.value.shape
    return _unary("reshape", x, x.value.reshape(shape), lambda g: g.reshape(old))


def transpose(x):
    return _unary("transpose", x, x.value.T, lambda g: g.T)


def concat(xs: Sequence, axis=-1):
    xs = list(xs)
    tape = next(x.tape for x in xs if isinstance(x, Var))
    vals = [x.value if isinstance(x, Var) else np.asarray(x, dtype=float) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    is_var = [isinstance(x, Var) for x in xs]

    def vjp(g, needs):
        res = []
        k = 0
        for i, v in enumerate(is_var):
            if not v:
                continue
            if needs[k]:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                res.append(g[tuple(sl)])
            else:
                res.append(None)
            k += 1
        return res

    return tape.record("concat", out, [x for x in xs if isinstance(x, Var)], vjp)


def _scatter_rows(g, idx, n):
    """Sum rows of ``g`` (shape (len(idx), ...)) into an (n, ...) array."""
    rest = g.shape[1:]
    flat = g.reshape(idx.size, -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + rest)


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def gather(x, idx):
    """Row gather ``x[idx]`` for an integer index array (or any basic index)."""
    value = x.value[idx]
    shape = x.value.shape
    if isinstance(idx, np.ndarray) and idx.dtype.kind in "iu":
        def d(g):
            rows = g.reshape((idx.size,) + shape[1:])
            return _scatter_rows(rows, idx.ravel(), shape[0])
    elif _is_basic(idx):
        def d(g):
            out = np.zeros(shape)
            out[idx] = g
            return out
    else:
        def d(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return out
    return _unary("gather", x, value, d)


def scatter_add(x, idx, n):
    """Inverse of :func:`gather`: ``out[idx[k]] += x[k]`` with ``out`` of length ``n``."""
    idx = np.asarray(idx).ravel()
    value = _scatter_rows(x.value, idx, n)
    return _unary("scatter_add", x, value, lambda g: g[idx])


def matmul(a, b):
    av, bv, _, _ = _parts(a, b)

    def da(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv)
        return g @ bv.T

    def db(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g)
        return av.T @ g

    return _binary("matmul", a, b, av @ bv, da, db)


def spmm(mat, x: Var):
    """Sparse constant matrix times dense var."""
    mat = sp.csr_matrix(mat)
    mat_t = mat.T.tocsr()
    return _unary("spmm", x, mat @ x.value, lambda g: mat_t @ g)


# ---------------------------------------------------------------------------
# image operations: feature maps are stored channel-first, (C, H, W)


def _im2col(xp, h, w):
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, h, w), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, ky:ky + h, kx:kx + w]
    return cols.reshape(c * 9, h * w)


def conv2d(x, weight, bias):
    """3x3 'same' convolution (cross-correlation) with zero padding."""
    xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=float)
    c, h, w = xv.shape
    co = weight.value.shape[0]
    if weight.value.shape != (co, c, 3, 3):
        raise InvalidInputError(f"conv weight shape {weight.value.shape} does not match input channels {c}")
    cols = _im2col(np.pad(xv, ((0, 0), (1, 1), (1, 1))), h, w)
    wm = weight.value.reshape(co, c * 9)
    out = (wm @ cols + bias.value[:, None]).reshape(co, h, w)
    x_is = isinstance(x, Var)

    def vjp(g, needs):
        gm = g.reshape(co, h * w)
        res = []
        k = 0
        if x_is:
            if needs[0]:
                dcols = (wm.T @ gm).reshape(c, 3, 3, h, w)
                dxp = np.zeros((c, h + 2, w + 2))
                for ky in range(3):
                    for kx in range(3):
                        dxp[:, ky:ky + h, kx:kx + w] += dcols[:, ky, kx]
                res.append(dxp[:, 1:-1, 1:-1])
            else:
                res.append(None)
            k = 1
        res.append((gm @ cols.T).reshape(weight.value.shape) if needs[k] else None)
        res.append(gm.sum(axis=1) if needs[k + 1] else None)
        return res

    parents = ([x] if x_is else []) + [weight, bias]
    return weight.tape.record("conv2d", out, parents, vjp)


def avg_pool2(x):
    c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise InvalidInputError(f"avg_pool2 needs even spatial size, got {(h, w)}")
    out = x.value.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def d(g):
        return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0

    return _unary("avg_pool2", x, out, d)


def bilinear_weights(h, w, u, v):
    """Sparse (N, H*W) interpolation matrix plus the pieces needed for d/du, d/dv.

    Coordinates are clamped to the border texels, so out-of-range samples
    return edge values and have zero derivative in the clamped direction.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(uc), max(w - 2, 0)).astype(np.int64)
    v0 = np.minimum(np.floor(vc), max(h - 2, 0)).astype(np.int64)
    fx = uc - u0
    fy = vc - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    n = u.size
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1], axis=1).ravel()
    vals = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1).ravel()
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, h * w))
    inside_u = (u >= 0.0) & (u <= w - 1.0)
    inside_v = (v >= 0.0) & (v <= h - 1.0)
    return mat, (u0, u1, v0, v1, fx, fy, inside_u, inside_v)


def bilinear_sample(fmap, u, v):
    """Sample a (C, H, W) map at continuous pixel coords; returns (N, C).

    ``fmap``, ``u`` and ``v`` may each be a Var or a constant array.
    """
    fv = fmap.value if isinstance(fmap, Var) else np.asarray(fmap, dtype=float)
    uv_ = u.value if isinstance(u, Var) else np.asarray(u, dtype=float)
    vv_ = v.value if isinstance(v, Var) else np.asarray(v, dtype=float)
    c, h, w = fv.shape
    mat, (u0, u1, v0, v1, fx, fy, in_u, in_v) = bilinear_weights(h, w, uv_.ravel(), vv_.ravel())
    flat = fv.reshape(c, h * w).T
    out = mat @ flat
    parents = [x for x in (fmap, u, v) if isinstance(x, Var)]
    tape = parents[0].tape
    flags = [isinstance(x, Var) for x in (fmap, u, v)]

    def vjp(g, needs):
        res = []
        k = 0
        if flags[0]:
            res.append((mat.T @ g).T.reshape(c, h, w) if needs[k] else None)
            k += 1
        if flags[1] or flags[2]:
            t00 = flat[v0 * w + u0]
            t01 = flat[v0 * w + u1]
            t10 = flat[v1 * w + u0]
            t11 = flat[v1 * w + u1]
        if flags[1]:
            if needs[k]:
                du = ((1 - fy)[:, None] * (t01 - t00) + fy[:, None] * (t11 - t10))
                res.append(((g * du).sum(axis=1) * in_u).reshape(uv_.shape))
            else:
                res.append(None)
            k += 1
        if flags[2]:
            if needs[k]:
                dv = ((1 - fx)[:, None] * (t10 - t00) + fx[:, None] * (t11 - t01))
                res.append(((g * dv).sum(axis=1) * in_v).reshape(vv_.shape))
            else:
                res.append(None)
        return res

    return tape.record("bilinear_sample", out, parents, vjp)


def check_finite(x: Var, where: str) -> Var:
    if not np.all(np.isfinite(x.value)):
        raise NumericalError(f"non-finite values in {where}")
    return x
