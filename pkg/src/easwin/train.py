"""Training: BCE on logits, AdamW, warmup + cosine schedule, grad clipping."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .layers import Module
from .metrics import EvalReport, csv_row, evaluate, write_metrics_csv
from .model import ConfigError, EASwin, EmbeddingBatch, HeadConfig, predict
from .tensor import NonFiniteError, Parameter, Tensor, bce_with_logits, no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, checkpoint: Path | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 1
    min_lr: float = 1e-6
    max_grad_norm: float = 1.0
    epochs: int = 30
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    decay_all: bool = False
    eval_batch_size: int = 128

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.min_lr > self.lr:
            raise ConfigError("min_lr must not exceed lr")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if self.max_grad_norm <= 0:
            raise ConfigError("max_grad_norm must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def bce_loss(logits: Tensor, labels) -> Tensor:
    return bce_with_logits(logits, labels)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, lr: float, min_lr: float) -> float:
    """Linear warmup 0 -> lr, then cosine decay reaching ``min_lr`` at step ``total_steps - 1``."""
    if step < warmup_steps:
        return lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    progress = 1.0 if span <= 0 else min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


def _no_decay(name: str, p: Parameter) -> bool:
    return p.ndim < 2 or name.endswith(".table")


def param_groups(model: Module, decay_all: bool = False) -> tuple[list, list]:
    """(decayed, not decayed). Norm params, biases, query vectors and bias tables skip decay."""
    decay, keep = [], []
    for name, p in model.named_parameters():
        (keep if not decay_all and _no_decay(name, p) else decay).append(p)
    return decay, keep


class AdamW:
    """Adam with decoupled weight decay, applied per parameter group."""

    def __init__(self, groups: list[tuple[list, float]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        seen = set()
        for params, _ in groups:
            for p in params:
                if p.name in seen:
                    raise ValueError(f"parameter {p.name} appears in two groups")
                seen.add(p.name)
                self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for params, wd in self.groups:
            for p in params:
                g = p.grad
                if g is None:
                    continue
                if g.shape != p.shape:
                    raise ValueError(f"{p.name}: grad shape {g.shape} != {p.shape}")
                m, v = self.m[p.name], self.v[p.name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    update += wd * p.data
                p.data -= (lr * update).astype(p.dtype, copy=False)


def make_optimizer(model: Module, cfg: TrainConfig) -> AdamW:
    decay, keep = param_groups(model, cfg.decay_all)
    return AdamW([(decay, cfg.weight_decay), (keep, 0.0)], betas=tuple(cfg.betas), eps=cfg.eps)


def predict_logits(model: EASwin, batch: EmbeddingBatch, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(batch), batch_size):
            out.append(model(batch.select(np.arange(s, min(s + batch_size, len(batch))))).data)
    return np.concatenate(out).astype(np.float64)


def evaluate_model(model: EASwin, batch: EmbeddingBatch, batch_size: int = 128) -> tuple[EvalReport, float, np.ndarray]:
    """(report, mean BCE, probabilities) on a labelled batch."""
    logits = predict_logits(model, batch, batch_size)
    probs, _ = predict(logits)
    loss = float(bce_with_logits(Tensor(logits, dtype=np.float64), batch.labels).data)
    return evaluate(probs, batch.labels), loss, probs


@dataclass
class SeedResult:
    seed: int
    rows: list
    best_epoch: int
    best_val: EvalReport
    checkpoint: Path | None
    model: EASwin
    optimizer: AdamW
    seconds: float


def train_one_seed(
    train_batch: EmbeddingBatch,
    val_batch: EmbeddingBatch,
    head_cfg: HeadConfig,
    cfg: TrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
) -> SeedResult:
    cfg.validate()
    head_cfg.validate()
    t0 = time.perf_counter()
    _, _, s, d_in = train_batch.z.shape
    model = EASwin(head_cfg, d_in, s, seed=seed)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng([seed, 0x5EED])
    n = len(train_batch)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    warmup = per_epoch * cfg.warmup_epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    rows: list[dict] = []
    best: tuple[float, int, EvalReport] | None = None
    best_path = None
    last_good = model.state_dict()
    step = 0
    lr_t = 0.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        seen_logits = np.empty(n)
        loss_sum = 0.0
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = train_batch.select(idx)
            model.zero_grad()
            try:
                logits = model(batch)
                loss = bce_loss(logits, batch.labels)
            except NonFiniteError as exc:
                raise _diverged(model, last_good, out, f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise _diverged(model, last_good, out, f"epoch {epoch} step {step}: loss is NaN")
            loss.backward()
            clip_grad_norm(params, cfg.max_grad_norm)
            lr_t = cosine_lr(step, total, warmup, cfg.lr, cfg.min_lr)
            opt.step(lr_t)
            step += 1
            seen_logits[b * cfg.batch_size : b * cfg.batch_size + len(idx)] = logits.data
            loss_sum += float(loss.data) * len(idx)
        # train metrics come from the logits seen during the epoch (model still moving)
        train_probs, _ = predict(seen_logits)
        train_report = evaluate(train_probs, train_batch.labels[order], group="train")
        rows.append(csv_row(epoch, "train", train_report, loss_sum / n, lr_t))
        val_report, val_loss, _ = evaluate_model(model, val_batch, cfg.eval_batch_size)
        rows.append(csv_row(epoch, "val", val_report, val_loss, lr_t))
        log.info(
            "seed %d epoch %d: train loss %.4f acc %.4f | val loss %.4f auc %.4f acc %.4f",
            seed, epoch, loss_sum / n, train_report.accuracy, val_loss, val_report.auc, val_report.accuracy,
        )
        last_good = model.state_dict()
        if best is None or val_report.auc > best[0]:
            best = (val_report.auc, epoch, val_report)
            if out is not None:
                best_path = save_checkpoint(
                    out / "best.npz", model, {"seed": seed, "epoch": epoch, "val": val_report.to_dict()}, opt
                )
        if out is not None:
            write_metrics_csv(out / "metrics.csv", rows)
    assert best is not None
    return SeedResult(seed, rows, best[1], best[2], best_path, model, opt, time.perf_counter() - t0)


def _diverged(model, last_good, out, msg) -> TrainingDivergedError:
    path = None
    if out is not None:
        model.load_state_dict(last_good)
        path = save_checkpoint(out / "last_good.npz", model, {"diverged": msg})
    return TrainingDivergedError(msg, path)


@dataclass
class TrainSummary:
    seeds: list
    results: list
    mean: dict
    std: dict
    best: dict

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "mean": self.mean,
            "std": self.std,
            "max": self.best,
            "per_seed": [
                {"seed": r.seed, "best_epoch": r.best_epoch, "val": r.best_val.to_dict(), "seconds": r.seconds}
                for r in self.results
            ],
        }


def summarize(results: list[SeedResult]) -> TrainSummary:
    keys = ("accuracy", "precision", "recall", "f1", "auc")
    table = {k: np.array([getattr(r.best_val, k) for r in results]) for k in keys}
    return TrainSummary(
        seeds=[r.seed for r in results],
        results=results,
        mean={k: float(v.mean()) for k, v in table.items()},
        std={k: float(v.std()) for k, v in table.items()},
        best={k: float(v.max()) for k, v in table.items()},
    )


def train(
    train_batch: EmbeddingBatch,
    val_batch: EmbeddingBatch,
    head_cfg: HeadConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainSummary:
    """Train one model per configured seed; best-AUC checkpoint per seed."""
    cfg.validate()
    for split, b in (("train", train_batch), ("val", val_batch)):
        if b.labels is None or len(np.unique(b.labels)) < 2:
            raise ConfigError(f"{split} split needs both classes")
    results = []
    for seed in cfg.seeds:
        sub = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
        results.append(train_one_seed(train_batch, val_batch, head_cfg, cfg, seed, sub))
    return summarize(results)
