"""Minimal dense tensor engine with reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order. Only leaves flagged ``requires_grad`` keep a
``.grad`` buffer; intermediate gradients are dropped once consumed.

Arithmetic runs in float32 unless :func:`verification_mode` is active, in
which case freshly created tensors default to float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Sequence

import numpy as np

MASK_VALUE = -1e9
# Entries at or below this are treated as masked inside softmax.
_MASK_THRESHOLD = MASK_VALUE / 2

_state = {"dtype": np.float32, "grad_enabled": True}
_mac_stack: list[dict] = []
_scope_stack: list[str] = []


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, where: str | None = None):
        self.op = op
        self.where = where
        msg = f"non-finite values produced by {op}"
        if where:
            msg += f" in {where}"
        super().__init__(msg)


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def verification_mode():
    """Switch newly created tensors to float64 (for gradient checks)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def count_macs():
    """Count forward matmul multiply-adds, keyed by the active scope label.

    Yields a dict; ``counts["total"]`` is the grand total.
    """
    counts: dict = {"total": 0}
    _mac_stack.append(counts)
    try:
        yield counts
    finally:
        _mac_stack.pop()


@contextlib.contextmanager
def mac_scope(label: str):
    _scope_stack.append(label)
    try:
        yield
    finally:
        _scope_stack.pop()


def _record_macs(n: int) -> None:
    if not _mac_stack:
        return
    label = _scope_stack[-1] if _scope_stack else "other"
    for counts in _mac_stack:
        counts["total"] += n
        counts[label] = counts.get(label, 0) + n


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ContractError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- graph traversal --------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name assigned by its module."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _make(
    data: np.ndarray, parents: Sequence[Tensor], backward, op: str, check: bool = True
) -> Tensor:
    # Sum is a cheap finiteness probe: any NaN/Inf propagates into it. Pure
    # data-movement ops pass check=False since their inputs were checked.
    if check and not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg", check=False)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("mul needs at least one tensor")
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715 * _GELU_C


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = x2 * 0.044715
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3a x^2)
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= xd
        d *= 0.5
        d *= 1.0 - th * th
        d += 0.5
        d += 0.5 * th
        d *= g
        return (d,)

    return _make(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


# -- reductions -------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape", check=False)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose", check=False)


def roll(x: Tensor, shift, axis) -> Tensor:
    out = np.roll(x.data, shift, axis)
    if isinstance(shift, (tuple, list)):
        back = tuple(-s for s in shift)
    else:
        back = -shift
    return _make(out, (x,), lambda g: (np.roll(g, back, axis),), "roll", check=False)


def pad_axis(x: Tensor, axis: int, after: int) -> Tensor:
    """Zero-pad ``after`` entries at the end of ``axis``."""
    if after == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, after)
    out = np.pad(x.data, widths)
    n = x.shape[axis]
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(0, n)
    idx = tuple(idx)
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g[idx]),), "pad", check=False)


def getitem(x: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(x.data[idx])
    shape, dtype = x.shape, x.dtype

    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), backward, "getitem", check=False)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0 (used for bias-table lookup)."""
    index = np.asarray(index, dtype=np.intp)
    out = table.data[index]
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _make(out, (table,), backward, "take_rows", check=False)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make(out, xs, backward, "concat", check=False)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading extents."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        # Fold the leading extents into one GEMM.
        m = int(np.prod(a.shape[:-1]))
        out = (ad.reshape(m, a.shape[-1]) @ bd).reshape(a.shape[:-1] + (b.shape[-1],))
        _record_macs(m * a.shape[-1] * b.shape[-1])

        def backward(g):
            g2 = g.reshape(m, b.shape[-1])
            ga = (g2 @ bd.T).reshape(a.shape) if a.requires_grad else None
            gb = ad.reshape(m, a.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward, "matmul")

    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    _record_macs(int(np.prod(out.shape)) * a.shape[-1])
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), sa) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), sb) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``, as one node."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    d_in, d_out = weight.shape
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"linear: bias {bias.shape} != ({d_out},)")
    m = x.data.size // d_in
    x2 = x.data.reshape(m, d_in)
    out = x2 @ weight.data
    _record_macs(m * d_in * d_out)
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (d_out,))
    wd = weight.data

    def backward(g):
        g2 = g.reshape(m, d_out)
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


_FF_ROWS = 512


def _gelu_inplace(u: np.ndarray, th: np.ndarray, out: np.ndarray) -> None:
    # python-float scalars keep the in-place ufuncs on their fast path
    np.multiply(u, u, out=th)
    th *= _GELU_A
    th += _GELU_C
    th *= u
    np.tanh(th, out=th)
    np.add(th, 1.0, out=out)
    out *= u
    out *= 0.5


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """``gelu(x @ w1 + b1) @ w2 + b2`` as one node.

    Rows are processed in blocks of ``_FF_ROWS`` so the hidden activations
    stay cache-resident; only the pre-activation is kept for backward.
    """
    d_in, d_hid = w1.shape
    d_out = w2.shape[1]
    if x.shape[-1] != d_in or w2.shape[0] != d_hid or b1.shape != (d_hid,) or b2.shape != (d_out,):
        raise DimensionError(
            f"feed_forward shapes: x {x.shape}, w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}, b2 {b2.shape}"
        )
    m = x.data.size // d_in
    x2 = x.data.reshape(m, d_in)
    dtype = x2.dtype
    pre = np.empty((m, d_hid), dtype=dtype)
    out = np.empty((m, d_out), dtype=dtype)
    rows = min(_FF_ROWS, m)
    th = np.empty((rows, d_hid), dtype=dtype)
    act = np.empty((rows, d_hid), dtype=dtype)
    W1, B1, W2, B2 = w1.data, b1.data, w2.data, b2.data
    for s in range(0, m, rows):
        e = min(s + rows, m)
        n = e - s
        u = pre[s:e]
        np.matmul(x2[s:e], W1, out=u)
        u += B1
        _gelu_inplace(u, th[:n], act[:n])
        o = out[s:e]
        np.matmul(act[:n], W2, out=o)
        o += B2
    _record_macs(m * d_hid * (d_in + d_out))
    out = out.reshape(x.shape[:-1] + (d_out,))

    def backward(g):
        g2 = g.reshape(m, d_out)
        gx = np.empty((m, d_in), dtype=dtype) if x.requires_grad else None
        gw1 = np.zeros_like(W1)
        gb1 = np.zeros_like(B1)
        gw2 = np.zeros_like(W2)
        gb2 = g2.sum(axis=0)
        th_b = np.empty((rows, d_hid), dtype=dtype)
        act_b = np.empty((rows, d_hid), dtype=dtype)
        gu = np.empty((rows, d_hid), dtype=dtype)
        for s in range(0, m, rows):
            e = min(s + rows, m)
            n = e - s
            u = pre[s:e]
            t, a, du = th_b[:n], act_b[:n], gu[:n]
            _gelu_inplace(u, t, a)
            gs = g2[s:e]
            gw2 += a.T @ gs
            np.matmul(gs, W2.T, out=du)
            # gelu'(u) = (1 + t) (0.5 + k (1 - t)) with k = 0.5 u C (1 + 3a u^2); a is scratch
            np.multiply(u, u, out=a)
            a *= 3 * _GELU_A
            a += _GELU_C
            a *= u
            a *= 0.5
            np.subtract(1.0, t, out=t)
            a *= t
            a += 0.5
            np.subtract(2.0, t, out=t)
            a *= t
            du *= a
            gb1 += du.sum(axis=0)
            gw1 += x2[s:e].T @ du
            if gx is not None:
                np.matmul(du, W1.T, out=gx[s:e])
        if gx is not None:
            gx = gx.reshape(x.shape)
        return gx, gw1, gb1, gw2, gb2

    return _make(out, (x, w1, b1, w2, b2), backward, "feed_forward")


# -- normalisation ----------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis.

    Entries at or below ``MASK_VALUE / 2`` (including -inf) get probability
    exactly 0; a row with every entry masked yields all zeros.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("softmax needs a last extent >= 1")
    xd = x.data
    masked = xd <= _MASK_THRESHOLD
    any_masked = bool(masked.any())
    if any_masked:
        safe = np.where(masked, -np.inf, xd)
        row_max = safe.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(safe - row_max)
    else:
        e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    denom = e.sum(axis=-1, keepdims=True)
    if any_masked:
        denom = np.where(denom > 0, denom, 1.0)
    out = (e / denom).astype(xd.dtype, copy=False)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward, "softmax")


LN_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm feature size {d} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None]
    var /= d
    var += eps
    rstd = 1.0 / np.sqrt(var)
    xhat = xc
    xhat *= rstd
    out = xhat * gamma.data
    out += beta.data
    gd = gamma.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None]
            proj /= d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= rstd
        g2 = g.reshape(-1, d)
        ggamma = np.einsum("ij,ij->j", g2, xhat.reshape(-1, d)) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on logits, in log-sum-exp form."""
    y = np.asarray(labels, dtype=logits.dtype)
    if logits.data.size == 0:
        raise ContractError("empty batch")
    if y.shape != logits.shape:
        raise DimensionError(f"labels {y.shape} do not match logits {logits.shape}")
    z = logits.data
    signed = -(2.0 * y - 1.0) * z
    # log(1 + exp(s)) without overflow
    per = np.maximum(signed, 0) + np.log1p(np.exp(-np.abs(signed)))
    n = z.size
    out = np.asarray(per.mean(), dtype=z.dtype)

    def backward(g):
        return (g * (_stable_sigmoid(z) - y) / n,)

    return _make(out, (logits,), backward, "bce")
