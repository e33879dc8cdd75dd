"""The EA-Swin detection head and its ablation variants."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import JointAttention, SpatialAttention, TemporalAttention
from .layers import FeedForward, LayerNorm, Linear, Module
from .tensor import (
    MASK_VALUE,
    ContractError,
    DimensionError,
    NonFiniteError,
    Parameter,
    Tensor,
    default_dtype,
    matmul,
    softmax_lastdim,
)

POOL_MODES = ("mean", "attention")
HEAD_KINDS = ("swin", "mlp_baseline")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class HeadConfig:
    d_model: int = 512
    heads: int = 8
    w_t: int = 4
    w_s: int = 4
    depth_t: int = 2
    depth_s: int = 2
    tubelet: int = 1
    pool: str = "attention"
    head_kind: str = "swin"
    use_shift: bool = True
    joint_attention: bool = False
    frames: int = 16

    def validate(self) -> "HeadConfig":
        if self.d_model < 1 or self.heads < 1:
            raise ConfigError("d_model and heads must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.w_t < 1 or self.w_s < 1:
            raise ConfigError("window sizes must be >= 1")
        if self.depth_t < 0 or self.depth_s < 0:
            raise ConfigError("depths must be >= 0")
        if self.tubelet < 1:
            raise ConfigError("tubelet must be >= 1")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.pool not in POOL_MODES:
            raise ConfigError(f"pool must be one of {POOL_MODES}, got {self.pool!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingBatch:
    """Encoder embeddings ``z`` of shape ``(B, T, S, D_in)`` plus metadata.

    ``valid_t[i]`` counts the real leading frames of video ``i``; labels are
    0 for real and 1 for AI-generated.
    """

    z: np.ndarray
    valid_t: np.ndarray | None = None
    labels: np.ndarray | None = None
    generators: list | None = field(default=None)

    def __post_init__(self):
        self.z = np.asarray(self.z)
        if self.z.ndim != 4 or min(self.z.shape) < 1:
            raise DimensionError(f"embeddings must be (B, T, S, D_in) with positive extents, got {self.z.shape}")
        b, t = self.z.shape[:2]
        if self.valid_t is None:
            self.valid_t = np.full(b, t, dtype=np.int64)
        self.valid_t = np.asarray(self.valid_t, dtype=np.int64)
        if self.valid_t.shape != (b,):
            raise DimensionError(f"valid_t must have shape ({b},)")
        if (self.valid_t < 1).any() or (self.valid_t > t).any():
            raise ContractError("valid_t must lie in [1, T]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (b,) or not np.isin(self.labels, (0, 1)).all():
                raise ContractError("labels must be a length-B vector of 0/1")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def shape(self) -> tuple:
        return self.z.shape

    def select(self, idx) -> "EmbeddingBatch":
        idx = np.asarray(idx)
        return EmbeddingBatch(
            z=self.z[idx],
            valid_t=self.valid_t[idx],
            labels=None if self.labels is None else self.labels[idx],
            generators=None if self.generators is None else [self.generators[i] for i in idx],
        )


def tubelets(z: np.ndarray, tau: int) -> np.ndarray:
    """Concatenate ``tau`` consecutive frames along the feature axis."""
    b, t, s, d = z.shape
    if t % tau:
        raise ConfigError(f"tubelet size {tau} does not divide T={t}")
    return z.reshape(b, t // tau, tau, s, d).transpose(0, 1, 3, 2, 4).reshape(b, t // tau, s, tau * d)


def project_input(z: np.ndarray, proj: Linear, tau: int = 1) -> Tensor:
    """Group frames into tubelets and map ``tau * D_in`` features to ``D``."""
    grouped = tubelets(np.asarray(z), tau)
    return proj(Tensor(grouped, dtype=proj.weight.dtype))


def pool_tokens(tokens: Tensor, valid: np.ndarray, mode: str, query: Tensor | None = None) -> Tensor:
    """Masked mean or single-query attention pooling of ``(B, M, D)`` tokens."""
    b, m, d = tokens.shape
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (b, m):
        raise DimensionError(f"validity mask {valid.shape} != {(b, m)}")
    counts = valid.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("every video needs at least one valid token")
    if mode == "mean":
        weights = Tensor((valid / counts[:, None])[:, None, :], dtype=tokens.dtype)
    elif mode == "attention":
        if query is None:
            raise ContractError("attention pooling needs a query vector")
        scores = matmul(tokens, query.reshape(d, 1)).reshape(b, m) * (1.0 / math.sqrt(d))
        if not valid.all():
            scores = scores + Tensor(np.where(valid, 0.0, MASK_VALUE), dtype=tokens.dtype)
        weights = softmax_lastdim(scores).reshape(b, 1, m)
    else:
        raise ConfigError(f"unknown pool mode {mode!r}")
    return matmul(weights, tokens).reshape(b, d)


def predict(logits) -> tuple[np.ndarray, np.ndarray]:
    """Return (probability of AI-generated, class). Ties at 0.5 go to class 1."""
    z = np.asarray(logits, dtype=np.float64)
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return p, (p >= 0.5).astype(np.int64)


class SwinBlock(Module):
    """Pre-norm block: ``y = x + MSA(LN(x)); z = y + MLP(LN(y))``."""

    def __init__(self, attn: Module, dim: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = attn
        self.ln2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor, shifted: bool = False, valid: np.ndarray | None = None) -> Tensor:
        y = x + self.attn(self.ln1(x), shifted, valid)
        return y + self.mlp(self.ln2(y))


class BlockStack(Module):
    """Named container so parameters read ``blocks.t0...``, ``blocks.s1...``."""

    def __init__(self):
        self.order: list[str] = []

    def add(self, name: str, block: SwinBlock) -> None:
        setattr(self, name, block)
        self.order.append(name)

    def __iter__(self):
        return (getattr(self, n) for n in self.order)


class PoolHead(Module):
    def __init__(self, mode: str, dim: int, rng: np.random.Generator):
        self.mode = mode
        if mode == "attention":
            self.query = Parameter(np.zeros(dim), dtype=default_dtype())
        self.classifier = FeedForward(dim, max(1, dim // 2), 1, rng)

    def __call__(self, tokens: Tensor, valid: np.ndarray) -> Tensor:
        pooled = pool_tokens(tokens, valid, self.mode, getattr(self, "query", None))
        return self.classifier(pooled)


class EASwin(Module):
    """Factorised temporal/spatial shifted-window head over video embeddings.

    ``d_in`` and ``tokens`` (S) are fixed at construction; the number of
    frames T is free.
    """

    def __init__(self, cfg: HeadConfig, d_in: int, tokens: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.d_in = d_in
        self.tokens = tokens
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.proj = Linear(cfg.tubelet * d_in, d, rng)
        if cfg.head_kind == "mlp_baseline":
            self.mlp = FeedForward(d, d, 1, rng)
        else:
            self.blocks = BlockStack()
            if cfg.joint_attention:
                for i in range(cfg.depth_t + cfg.depth_s):
                    self.blocks.add(f"j{i}", SwinBlock(JointAttention(d, cfg.heads, rng), d, rng))
            else:
                for i in range(cfg.depth_t):
                    attn = TemporalAttention(d, cfg.heads, cfg.w_t, rng)
                    self.blocks.add(f"t{i}", SwinBlock(attn, d, rng))
                for i in range(cfg.depth_s):
                    attn = SpatialAttention(d, cfg.heads, cfg.w_s, tokens, rng)
                    self.blocks.add(f"s{i}", SwinBlock(attn, d, rng))
            self.head = PoolHead(cfg.pool, d, rng)
        self.assign_names()

    def _shifted(self, i: int) -> bool:
        return self.cfg.use_shift and i % 2 == 1

    def __call__(self, batch: EmbeddingBatch) -> Tensor:
        return self.forward(batch)

    def forward(self, batch: EmbeddingBatch) -> Tensor:
        cfg = self.cfg
        b, t, s, d_in = batch.z.shape
        if d_in != self.d_in or s != self.tokens:
            raise DimensionError(f"model expects S={self.tokens}, D_in={self.d_in}; got S={s}, D_in={d_in}")
        x = _named("proj", project_input, batch.z, self.proj, cfg.tubelet)
        tp = t // cfg.tubelet
        d = cfg.d_model
        valid_tp = -(-batch.valid_t // cfg.tubelet)
        frame_valid = np.arange(tp)[None, :] < valid_tp[:, None]  # (B, T')
        token_valid = np.repeat(frame_valid, s, axis=1)  # (B, T'*S) in (t, s) order

        if cfg.head_kind == "mlp_baseline":
            pooled = _named("pool", pool_tokens, x.reshape(b, tp * s, d), token_valid, "mean")
            return _named("mlp", self.mlp, pooled).reshape(b)

        if cfg.joint_attention:
            h = x.reshape(b, tp * s, d)
            for name, blk in zip(self.blocks.order, self.blocks):
                h = _named(f"blocks.{name}", blk, h, False, token_valid)
        else:
            h = x.transpose(0, 2, 1, 3).reshape(b * s, tp, d)
            seq_valid = np.repeat(frame_valid, s, axis=0)  # (B*S, T')
            ti = si = 0
            for name, blk in zip(self.blocks.order, self.blocks):
                if name.startswith("t"):
                    h = _named(f"blocks.{name}", blk, h, self._shifted(ti), seq_valid)
                    ti += 1
            h = h.reshape(b, s, tp, d).transpose(0, 2, 1, 3).reshape(b * tp, s, d)
            for name, blk in zip(self.blocks.order, self.blocks):
                if name.startswith("s"):
                    h = _named(f"blocks.{name}", blk, h, self._shifted(si))
                    si += 1
            h = h.reshape(b, tp * s, d)
        return _named("head", self.head, h, token_valid).reshape(b)


def _named(where: str, fn, *args):
    try:
        return fn(*args)
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, where) from exc
