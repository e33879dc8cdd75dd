"""Windowed multi-head self-attention with relative positional bias.

Tokens are split into non-overlapping windows (length ``W`` along time, or
``W x W`` patches on a square spatial grid) and attention runs inside each
window. Shifted layers cyclically roll the sequence by half a window first;
wrapped tokens are not masked, so they may attend across the boundary.
Sequences that do not fill a whole number of windows are zero-padded, and
padded keys are blocked with an additive ``MASK_VALUE``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Module, uniform_init
from .tensor import (
    MASK_VALUE,
    DimensionError,
    ContractError,
    Parameter,
    Tensor,
    default_dtype,
    linear,
    mac_scope,
    matmul,
    pad_axis,
    roll,
    softmax_lastdim,
    take_rows,
)


# -- relative positional bias ----------------------------------------------

def relative_index_1d(window: int) -> np.ndarray:
    i = np.arange(window)
    return i[:, None] - i[None, :] + window - 1


def relative_index_2d(window: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(window * window), window)
    dr = rows[:, None] - rows[None, :] + window - 1
    dc = cols[:, None] - cols[None, :] + window - 1
    return dr * (2 * window - 1) + dc


class RelPosBias1D(Module):
    """One learnable bias per (relative offset, head); zero-initialised."""

    def __init__(self, window: int, heads: int):
        self.window = window
        self.heads = heads
        self.table = Parameter(np.zeros((2 * window - 1, heads)), dtype=default_dtype())
        self._index = relative_index_1d(window)

    def __call__(self) -> Tensor:
        # (L, L, H) -> (H, L, L)
        return take_rows(self.table, self._index).transpose(2, 0, 1)


class RelPosBias2D(Module):
    """Bias indexed by the (row, col) offset between two in-window positions."""

    def __init__(self, window: int, heads: int):
        self.window = window
        self.heads = heads
        self.table = Parameter(np.zeros(((2 * window - 1) ** 2, heads)), dtype=default_dtype())
        self._index = relative_index_2d(window)

    def __call__(self) -> Tensor:
        return take_rows(self.table, self._index).transpose(2, 0, 1)


# -- attention kernel -------------------------------------------------------

class AttnParams(Module):
    """Bias-free query/key/value/output projections, each ``D x D``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ContractError(f"d_model {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        dtype = default_dtype()
        self.w_q = Parameter(uniform_init(rng, (dim, dim), dim), dtype=dtype)
        self.w_k = Parameter(uniform_init(rng, (dim, dim), dim), dtype=dtype)
        self.w_v = Parameter(uniform_init(rng, (dim, dim), dim), dtype=dtype)
        self.w_o = Parameter(uniform_init(rng, (dim, dim), dim), dtype=dtype)


def window_mask(valid: np.ndarray) -> np.ndarray | None:
    """Additive mask ``(n, L, L)`` from per-position validity ``(n, L)``.

    A real query sees only real keys; a padded query sees only itself, so
    its softmax row stays defined. Returns ``None`` when nothing is padded.
    """
    valid = np.asarray(valid, dtype=bool)
    if valid.all():
        return None
    n, length = valid.shape
    allowed = valid[:, :, None] & valid[:, None, :]
    allowed |= np.eye(length, dtype=bool)[None]
    return np.where(allowed, 0.0, MASK_VALUE)


def window_attention(
    windows: Tensor,
    params: AttnParams,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """``softmax(Q K^T / sqrt(d_h) + bias + mask) V`` per head, then ``W_o``.

    ``windows`` is ``(n, L, D)``; ``bias`` is ``(H, L, L)``; ``mask`` is an
    additive ``(n, L, L)`` array.
    """
    if windows.ndim != 3:
        raise DimensionError(f"windows must be (n, L, D), got {windows.shape}")
    n, length, dim = windows.shape
    if length == 0:
        raise ContractError("window length must be >= 1")
    if dim != params.dim:
        raise DimensionError(f"token dim {dim} != attention dim {params.dim}")
    heads, dh = params.heads, params.head_dim
    if bias is not None and bias.shape != (heads, length, length):
        raise DimensionError(f"bias shape {bias.shape} != {(heads, length, length)}")

    with mac_scope("projection"):
        q = linear(windows, params.w_q).reshape(n, length, heads, dh).transpose(0, 2, 1, 3)
        k = linear(windows, params.w_k).reshape(n, length, heads, dh).transpose(0, 2, 3, 1)
        v = linear(windows, params.w_v).reshape(n, length, heads, dh).transpose(0, 2, 1, 3)
    with mac_scope("attention_core"):
        scores = matmul(q, k) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        if mask is not None:
            if mask.shape != (n, length, length):
                raise DimensionError(f"mask shape {mask.shape} != {(n, length, length)}")
            scores = scores + Tensor(mask[:, None], dtype=scores.dtype)
        attn = softmax_lastdim(scores)
        ctx = matmul(attn, v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(n, length, dim)
    with mac_scope("projection"):
        return linear(ctx, params.w_o)


# -- partitioning -----------------------------------------------------------

@dataclass
class PadInfo:
    """Bookkeeping needed to undo a window partition."""

    length: int  # tokens per sequence before padding
    pad: int  # zero tokens appended (1D) or rows/cols appended (2D)
    shift: int
    num_windows: int  # windows per sequence
    valid: np.ndarray  # (batch * num_windows, L) bool
    grid: int = 0  # side of the square grid for 2D partitions


def partition_1d(
    x: Tensor, window: int, shift: int, valid: np.ndarray | None = None
) -> tuple[Tensor, PadInfo]:
    """Roll ``(B', T, D)`` left by ``shift``, pad to a multiple of ``window``, split.

    ``valid`` optionally marks real positions ``(B', T)``; it is rolled and
    padded alongside the tokens.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    if not 0 <= shift < window:
        raise ContractError(f"shift {shift} outside [0, {window})")
    if x.ndim != 3:
        raise DimensionError(f"expected (B', T, D), got {x.shape}")
    b, t, d = x.shape
    if t == 0:
        raise ContractError("empty input")
    if valid is None:
        valid = np.ones((b, t), dtype=bool)
    pad = (-t) % window
    if shift:
        x = roll(x, -shift, 1)
        valid = np.roll(valid, -shift, 1)
    x = pad_axis(x, 1, pad)
    valid = np.pad(valid, ((0, 0), (0, pad)))
    nw = (t + pad) // window
    windows = x.reshape(b * nw, window, d)
    info = PadInfo(length=t, pad=pad, shift=shift, num_windows=nw, valid=valid.reshape(b * nw, window))
    return windows, info


def merge_1d(windows: Tensor, info: PadInfo) -> Tensor:
    n, window, d = windows.shape
    b = n // info.num_windows
    x = windows.reshape(b, info.num_windows * window, d)
    if info.pad:
        x = x[:, : info.length]
    if info.shift:
        x = roll(x, info.shift, 1)
    return x


def partition_2d(x: Tensor, grid: int, window: int, shift: int) -> tuple[Tensor, PadInfo]:
    """Window a ``(B', grid*grid, D)`` token set as ``window x window`` patches."""
    if not 0 <= shift < window:
        raise ContractError(f"shift {shift} outside [0, {window})")
    b, s, d = x.shape
    if s != grid * grid:
        raise DimensionError(f"{s} tokens do not form a {grid}x{grid} grid")
    pad = (-grid) % window
    x = x.reshape(b, grid, grid, d)
    valid = np.ones((b, grid, grid), dtype=bool)
    if shift:
        x = roll(x, (-shift, -shift), (1, 2))
    x = pad_axis(pad_axis(x, 1, pad), 2, pad)
    valid = np.pad(valid, ((0, 0), (0, pad), (0, pad)))
    side = (grid + pad) // window
    x = x.reshape(b, side, window, side, window, d).transpose(0, 1, 3, 2, 4, 5)
    windows = x.reshape(b * side * side, window * window, d)
    valid = valid.reshape(b, side, window, side, window).transpose(0, 1, 3, 2, 4)
    info = PadInfo(
        length=s,
        pad=pad,
        shift=shift,
        num_windows=side * side,
        valid=valid.reshape(b * side * side, window * window),
        grid=grid,
    )
    return windows, info


def merge_2d(windows: Tensor, info: PadInfo) -> Tensor:
    n, area, d = windows.shape
    window = math.isqrt(area)
    side = math.isqrt(info.num_windows)
    b = n // info.num_windows
    x = windows.reshape(b, side, side, window, window, d).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, side * window, side * window, d)
    if info.pad:
        x = x[:, : info.grid, : info.grid]
    if info.shift:
        x = roll(x, (info.shift, info.shift), (1, 2))
    return x.reshape(b, info.grid * info.grid, d)


def square_side(tokens: int) -> int | None:
    side = math.isqrt(tokens)
    return side if side * side == tokens else None


# -- layers -----------------------------------------------------------------

class TemporalAttention(Module):
    """Windowed attention along time for ``(B*S, T, D)`` trajectories."""

    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        self.window = window
        self.attn = AttnParams(dim, heads, rng)
        self.bias = RelPosBias1D(window, heads)

    def __call__(self, z: Tensor, shifted: bool, valid: np.ndarray | None = None) -> Tensor:
        shift = self.window // 2 if shifted else 0
        windows, info = partition_1d(z, self.window, shift, valid)
        out = window_attention(windows, self.attn, self.bias(), window_mask(info.valid))
        return merge_1d(out, info)


class SpatialAttention(Module):
    """Windowed attention within a frame for ``(B*T, S, D)`` tokens.

    Uses 2D windows when ``S`` is a perfect square, else falls back to 1D
    windows over the token axis (``fallback_1d`` is then True).
    """

    def __init__(self, dim: int, heads: int, window: int, tokens: int, rng: np.random.Generator):
        self.window = window
        self.tokens = tokens
        self.grid = square_side(tokens)
        self.fallback_1d = self.grid is None
        self.attn = AttnParams(dim, heads, rng)
        if self.fallback_1d:
            self.bias = RelPosBias1D(window, heads)
        else:
            self.bias = RelPosBias2D(window, heads)

    def __call__(self, z: Tensor, shifted: bool, valid: np.ndarray | None = None) -> Tensor:
        if z.shape[1] != self.tokens:
            raise DimensionError(f"layer built for {self.tokens} tokens, got {z.shape[1]}")
        shift = self.window // 2 if shifted else 0
        if self.fallback_1d:
            windows, info = partition_1d(z, self.window, shift)
            out = window_attention(windows, self.attn, self.bias(), window_mask(info.valid))
            return merge_1d(out, info)
        windows, info = partition_2d(z, self.grid, self.window, shift)
        out = window_attention(windows, self.attn, self.bias(), window_mask(info.valid))
        return merge_2d(out, info)


class JointAttention(Module):
    """Global attention over all ``T*S`` tokens of a video, no positional bias."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = AttnParams(dim, heads, rng)

    def __call__(self, z: Tensor, shifted: bool = False, valid: np.ndarray | None = None) -> Tensor:
        mask = window_mask(valid) if valid is not None else None
        return window_attention(z, self.attn, None, mask)
