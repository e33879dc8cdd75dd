"""Counted multiply-adds and wall time: factorised vs joint attention over T."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import JointAttention, SpatialAttention, TemporalAttention
from .tensor import Tensor, count_macs, no_grad


@dataclass
class BenchConfig:
    t_values: list = field(default_factory=lambda: [8, 16, 32, 64])
    tokens: int = 16
    d_model: int = 128
    heads: int = 8
    w_t: int = 4
    w_s: int = 4
    batch: int = 1
    repeats: int = 3
    seed: int = 0


@dataclass
class BenchRow:
    frames: int
    temporal_core: int
    temporal_total: int
    spatial_core: int
    spatial_total: int
    joint_core: int
    joint_total: int
    temporal_ms: float
    spatial_ms: float
    joint_ms: float

    @property
    def factorized_core(self) -> int:
        return self.temporal_core + self.spatial_core

    @property
    def factorized_total(self) -> int:
        return self.temporal_total + self.spatial_total


def _measure(layer, x: Tensor, repeats: int, **kw) -> tuple[int, int, float]:
    with no_grad(), count_macs() as counts:
        layer(x, **kw)
    best = float("inf")
    with no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            layer(x, **kw)
            best = min(best, time.perf_counter() - t0)
    return counts.get("attention_core", 0), counts["total"], best * 1e3


def run_bench(cfg: BenchConfig | None = None) -> list[BenchRow]:
    """One attention layer of each kind per T; MACs counted in forward matmuls."""
    cfg = cfg or BenchConfig()
    rng = np.random.default_rng(cfg.seed)
    d, s, b = cfg.d_model, cfg.tokens, cfg.batch
    temporal = TemporalAttention(d, cfg.heads, cfg.w_t, rng)
    spatial = SpatialAttention(d, cfg.heads, cfg.w_s, s, rng)
    joint = JointAttention(d, cfg.heads, rng)
    rows = []
    for t in cfg.t_values:
        z = rng.standard_normal((b, t, s, d)).astype(np.float32)
        zt = Tensor(z.transpose(0, 2, 1, 3).reshape(b * s, t, d))
        zs = Tensor(z.reshape(b * t, s, d))
        zj = Tensor(z.reshape(b, t * s, d))
        tc, tt, tms = _measure(temporal, zt, cfg.repeats, shifted=True)
        sc, st, sms = _measure(spatial, zs, cfg.repeats, shifted=True)
        jc, jt, jms = _measure(joint, zj, cfg.repeats)
        rows.append(BenchRow(t, tc, tt, sc, st, jc, jt, tms, sms, jms))
    return rows


def growth(rows: list[BenchRow], attr: str) -> list[float]:
    """Ratio of ``attr`` between consecutive T values."""
    vals = [getattr(r, attr) for r in rows]
    return [b / a for a, b in zip(vals, vals[1:])]


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'T':>4} {'temporal MACs':>14} {'spatial MACs':>14} {'joint MACs':>14} {'core t/j':>22} {'ms t/s/j':>20}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r.frames:>4} {r.temporal_total:>14,} {r.spatial_total:>14,} {r.joint_total:>14,} "
            f"{r.temporal_core:>10,}/{r.joint_core:<11,} {r.temporal_ms:6.1f}/{r.spatial_ms:5.1f}/{r.joint_ms:6.1f}"
        )
    return "\n".join(lines)
