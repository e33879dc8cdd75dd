"""Central finite-difference check of every model parameter, in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import EASwin, EmbeddingBatch, HeadConfig
from .tensor import bce_with_logits, no_grad, verification_mode

# Elements whose analytic and numeric gradients are both below this are
# compared on absolute error (relative error is meaningless near 0).
GRAD_FLOOR = 1e-6


@dataclass
class GradcheckConfig:
    d_model: int = 8
    heads: int = 2
    w_t: int = 2
    w_s: int = 2
    depth_t: int = 1
    depth_s: int = 1
    frames: int = 4
    tokens: int = 4
    d_in: int = 6
    batch: int = 2
    step: float = 1e-5
    tolerance: float = 1e-4
    seed: int = 0

    def head(self, **overrides) -> HeadConfig:
        cfg = HeadConfig(
            d_model=self.d_model,
            heads=self.heads,
            w_t=self.w_t,
            w_s=self.w_s,
            depth_t=self.depth_t,
            depth_s=self.depth_s,
            frames=self.frames,
        )
        return replace(cfg, **overrides)


@dataclass
class GradcheckResult:
    label: str
    max_rel_err: float
    worst_param: str
    n_checked: int
    seconds: float
    per_param: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_model(model: EASwin, batch: EmbeddingBatch, step: float = 1e-5, label: str = "") -> GradcheckResult:
    """Compare backprop gradients of mean BCE with central differences for every element."""
    t0 = time.perf_counter()
    model.zero_grad()
    bce_with_logits(model(batch), batch.labels).backward()
    worst, worst_name, count = 0.0, "", 0
    per_param = {}
    for name, p in model.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(bce_with_logits(model(batch), batch.labels).data)
                flat[i] = orig - step
                down = float(bce_with_logits(model(batch), batch.labels).data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * step)
        err = float(relative_error(analytic, numeric).max())
        per_param[name] = err
        count += flat.size
        if err > worst:
            worst, worst_name = err, name
    return GradcheckResult(label, worst, worst_name, count, time.perf_counter() - t0, per_param)


def randomize(model: EASwin, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Move every parameter (including zero-initialised ones) to a generic point."""
    for p in model.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def tiny_batch(cfg: GradcheckConfig, rng: np.random.Generator) -> EmbeddingBatch:
    z = rng.standard_normal((cfg.batch, cfg.frames, cfg.tokens, cfg.d_in))
    labels = np.arange(cfg.batch) % 2
    valid = np.full(cfg.batch, cfg.frames)
    valid[-1] = max(1, cfg.frames - 1)  # exercise the temporal validity mask
    return EmbeddingBatch(z=z, valid_t=valid, labels=labels)


VARIANTS = {
    "attention-pool/shift": dict(pool="attention", use_shift=True),
    "attention-pool/no-shift": dict(pool="attention", use_shift=False),
    "mean-pool/shift": dict(pool="mean", use_shift=True),
    "mean-pool/no-shift": dict(pool="mean", use_shift=False),
}


def run_gradcheck(cfg: GradcheckConfig | None = None, variants: dict | None = None) -> list[GradcheckResult]:
    cfg = cfg or GradcheckConfig()
    variants = VARIANTS if variants is None else variants
    results = []
    with verification_mode():
        for i, (label, overrides) in enumerate(variants.items()):
            rng = np.random.default_rng([cfg.seed, i])
            model = EASwin(cfg.head(**overrides), cfg.d_in, cfg.tokens, seed=cfg.seed + i)
            randomize(model, rng)
            batch = tiny_batch(cfg, rng)
            results.append(check_model(model, batch, cfg.step, label))
    return results
