"""Synthetic embedding corpora and the on-disk embedding file format.

Synthetic videos model encoder embeddings as a static per-token scene
vector plus a shared AR(1) latent trajectory plus token noise. Fake videos
use their own AR(1) parameters and add a periodic component on a fixed
feature subspace. Because the periodic term is zero-mean over whole
periods, per-video mean features carry no artifact signal.

File layout (all little-endian)::

    magic   5s   b"EAEMB"
    version u16  1
    n, T, S, D_in  4 x u32
    labels  n x u8
    payload n*T*S*D_in x f32, row-major (video, frame, token, feature)
    crc32   u32  over labels + payload
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ConfigError, EmbeddingBatch

log = logging.getLogger(__name__)

MAGIC = b"EAEMB"
VERSION = 1
_HEADER = struct.Struct("<5sHIIII")
HEADER_SIZE = _HEADER.size  # 23 bytes
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Base class for dataset problems."""


class EmbeddingFileError(DataError):
    pass


class BadMagicError(EmbeddingFileError):
    pass


class UnsupportedVersionError(EmbeddingFileError):
    pass


class ChecksumError(EmbeddingFileError):
    pass


class TruncatedFileError(EmbeddingFileError):
    pass


@dataclass
class SyntheticSpec:
    n_train: int = 2000  # per class
    n_val: int = 500
    n_test: int = 0
    frames: int = 16
    tokens: int = 16
    d_in: int = 64
    # real class: AR(1) latent with coefficient rho_r and innovation sigma_r
    sigma_r: float = 0.2
    rho_r: float = 0.9
    # fake class
    sigma_f: float = 0.3
    rho_f: float = 0.7
    alpha: float = 1.0
    period: int = 4
    artifact_dims: int = 8
    token_noise: float = 0.1
    generator: str = "synthetic"
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        if min(self.frames, self.tokens, self.d_in) < 1:
            raise ConfigError("frames, tokens and d_in must be positive")
        if self.sigma_r <= 0 or self.sigma_f <= 0:
            raise ConfigError("innovation scales must be positive")
        if not (0 < self.rho_r <= 1 and 0 < self.rho_f <= 1):
            raise ConfigError("AR coefficients must lie in (0, 1]")
        if self.alpha < 0 or self.token_noise < 0:
            raise ConfigError("alpha and token_noise must be non-negative")
        if self.period < 2:
            raise ConfigError("period must be >= 2")
        if self.period > self.frames:
            raise ConfigError(f"period {self.period} exceeds frame count {self.frames}")
        if not 1 <= self.artifact_dims <= self.d_in:
            raise ConfigError("artifact_dims must lie in [1, d_in]")
        if self.frames % self.period:
            log.warning("period does not divide frames; the artifact is not zero-mean per video")
        if self.alpha == 0 and self.sigma_f == self.sigma_r and self.rho_f == self.rho_r:
            log.warning("class parameters are identical; the task is unlearnable")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "default": SyntheticSpec(),
    # identical class distributions: nothing to learn
    "null": SyntheticSpec(sigma_f=0.2, rho_f=0.9, alpha=0.0),
    # held-out "generator" with shifted artifact parameters
    "unseen": SyntheticSpec(sigma_f=0.25, rho_f=0.8, alpha=0.7, period=8, generator="synthetic-unseen", seed=7),
}


def preset(name: str, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class Dataset:
    splits: dict = field(default_factory=dict)  # split name -> EmbeddingBatch
    spec: SyntheticSpec | None = None

    def __getitem__(self, split: str) -> EmbeddingBatch:
        return self.splits[split]


def _ar1(rng: np.random.Generator, frames: int, dim: int, rho: float, sigma: float) -> np.ndarray:
    eps = rng.standard_normal((frames, dim))
    u = np.empty((frames, dim))
    u[0] = eps[0] * (sigma / np.sqrt(1 - rho * rho) if rho < 1 else sigma)
    for t in range(1, frames):
        u[t] = rho * u[t - 1] + sigma * eps[t]
    return u


def artifact_direction(spec: SyntheticSpec) -> np.ndarray:
    """Fixed signed unit pattern on ``artifact_dims`` features for this generator."""
    rng = np.random.default_rng([spec.seed, 0xA27])
    dims = rng.choice(spec.d_in, size=spec.artifact_dims, replace=False)
    direction = np.zeros(spec.d_in)
    direction[dims] = rng.choice([-1.0, 1.0], size=spec.artifact_dims)
    return direction


def synth_video(spec: SyntheticSpec, label: int, rng: np.random.Generator, direction: np.ndarray) -> np.ndarray:
    t_, s_, d_ = spec.frames, spec.tokens, spec.d_in
    scene = rng.standard_normal((s_, d_))
    if label == 0:
        latent = _ar1(rng, t_, d_, spec.rho_r, spec.sigma_r)
    else:
        latent = _ar1(rng, t_, d_, spec.rho_f, spec.sigma_f)
    noise = spec.token_noise * rng.standard_normal((t_, s_, d_))
    video = scene[None] + latent[:, None, :] + noise
    if label == 1 and spec.alpha > 0:
        phase = rng.uniform(0, 2 * np.pi)
        wave = spec.alpha * np.sin(2 * np.pi * np.arange(t_) / spec.period + phase)
        video += wave[:, None, None] * direction[None, None, :]
    return video.astype(np.float32)


def generate(spec: SyntheticSpec) -> Dataset:
    """Build balanced, disjoint splits; deterministic for a given spec."""
    spec.validate()
    direction = artifact_direction(spec)
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    out = Dataset(spec=spec)
    digests: dict[bytes, str] = {}
    for code, split in enumerate(SPLITS):
        n = sizes[split]
        if n == 0:
            continue
        labels = np.repeat([0, 1], n)
        videos = np.empty((2 * n, spec.frames, spec.tokens, spec.d_in), dtype=np.float32)
        for i, lab in enumerate(labels):
            # independent stream per (seed, split, class, index)
            rng = np.random.default_rng([spec.seed, code, int(lab), i % n])
            videos[i] = synth_video(spec, int(lab), rng, direction)
            key = hashlib.blake2b(videos[i].tobytes(), digest_size=16).digest()
            if key in digests:
                raise DataError(f"video {i} of {split} duplicates one in {digests[key]}")
            digests[key] = split
        order = np.random.default_rng([spec.seed, code, 0xD1CE]).permutation(2 * n)
        gens = np.where(labels[order] == 1, spec.generator, "real").tolist()
        out.splits[split] = EmbeddingBatch(z=videos[order], labels=labels[order], generators=gens)
    return out


def subsample_frames(batch: EmbeddingBatch, k: int) -> EmbeddingBatch:
    """Keep ``k`` evenly spaced frames, first and last included."""
    t = batch.z.shape[1]
    if k < 1 or k > t:
        raise ConfigError(f"cannot keep {k} of {t} frames")
    idx = frame_indices(t, k)
    valid = np.maximum((idx[None, :] < batch.valid_t[:, None]).sum(axis=1), 1)
    return EmbeddingBatch(
        z=np.ascontiguousarray(batch.z[:, idx]),
        valid_t=valid,
        labels=batch.labels,
        generators=batch.generators,
    )


def frame_indices(t: int, k: int) -> np.ndarray:
    if k == 1:
        return np.zeros(1, dtype=np.int64)
    return np.floor(np.arange(k) * (t - 1) / (k - 1) + 0.5).astype(np.int64)


# -- file format ------------------------------------------------------------

@dataclass
class EmbeddingFile:
    z: np.ndarray  # (n, T, S, D_in) float32
    labels: np.ndarray  # (n,) uint8
    version: int = VERSION

    @property
    def dims(self) -> tuple:
        return self.z.shape

    def to_batch(self, generators=None) -> EmbeddingBatch:
        return EmbeddingBatch(z=self.z, labels=self.labels.astype(np.int64), generators=generators)


def encode(z: np.ndarray, labels: np.ndarray) -> bytes:
    z = np.asarray(z)
    if z.ndim != 4:
        raise DataError(f"embeddings must be 4D, got shape {z.shape}")
    n, t, s, d = z.shape
    labels = np.asarray(labels).reshape(-1)
    if labels.shape != (n,) or not np.isin(labels, (0, 1)).all():
        raise DataError("need one 0/1 label per video")
    body = labels.astype(np.uint8).tobytes() + np.ascontiguousarray(z, dtype="<f4").tobytes()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return _HEADER.pack(MAGIC, VERSION, n, t, s, d) + body + struct.pack("<I", crc)


def decode(buf: bytes) -> EmbeddingFile:
    if len(buf) < HEADER_SIZE:
        if not MAGIC.startswith(buf[:5]):
            raise BadMagicError(f"bad magic {buf[:5]!r}")
        raise TruncatedFileError(f"file is {len(buf)} bytes, header needs {HEADER_SIZE}")
    magic, version, n, t, s, d = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}, expected {VERSION}")
    payload = n * t * s * d * 4
    expected = HEADER_SIZE + n + payload + 4
    if len(buf) < expected:
        raise TruncatedFileError(f"file is {len(buf)} bytes, layout needs {expected}")
    if len(buf) > expected:
        raise EmbeddingFileError(f"{len(buf) - expected} trailing bytes after offset {expected}")
    body_end = HEADER_SIZE + n + payload
    (stored,) = struct.unpack_from("<I", buf, body_end)
    actual = zlib.crc32(buf[HEADER_SIZE:body_end]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(
            f"CRC mismatch over bytes [{HEADER_SIZE}, {body_end}): stored {stored:#010x} "
            f"at offset {body_end}, computed {actual:#010x}"
        )
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=HEADER_SIZE).copy()
    if not np.isin(labels, (0, 1)).all():
        raise EmbeddingFileError(f"label bytes at offset {HEADER_SIZE} are not all 0/1")
    z = np.frombuffer(buf, dtype="<f4", count=n * t * s * d, offset=HEADER_SIZE + n)
    z = z.astype(np.float32).reshape(n, t, s, d)
    return EmbeddingFile(z=z, labels=labels, version=version)


def write_file(path: str | Path, z: np.ndarray, labels: np.ndarray) -> int:
    blob = encode(z, labels)
    Path(path).write_bytes(blob)
    return len(blob)


def read_file(path: str | Path) -> EmbeddingFile:
    return decode(Path(path).read_bytes())


def file_size(n: int, t: int, s: int, d: int) -> int:
    return HEADER_SIZE + n + n * t * s * d * 4 + 4


# -- dataset directories ----------------------------------------------------

def write_dataset(ds: Dataset, out_dir: str | Path) -> dict:
    """Write one file per split plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, batch in ds.splits.items():
        path = out / f"{split}.eaemb"
        write_file(path, batch.z, batch.labels)
        n, t, s, d = batch.z.shape
        entries.append(
            {
                "split": split,
                "path": path.name,
                "n": n,
                "T": t,
                "S": s,
                "D_in": d,
                "class_counts": {"0": int((batch.labels == 0).sum()), "1": int((batch.labels == 1).sum())},
                "spec_hash": ds.spec.spec_hash() if ds.spec else None,
                "generators": batch.generators,
                "crc32": zlib.crc32(path.read_bytes()) & 0xFFFFFFFF,
            }
        )
    manifest = {"spec": ds.spec.to_dict() if ds.spec else None, "splits": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(data_dir: str | Path) -> Dataset:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    ds = Dataset(spec=SyntheticSpec(**manifest["spec"]) if manifest.get("spec") else None)
    for entry in manifest["splits"]:
        ef = read_file(root / entry["path"])
        ds.splits[entry["split"]] = ef.to_batch(entry.get("generators"))
    return ds


def load_files(paths: dict) -> Dataset:
    """Ingest externally produced embedding files, one path per split."""
    ds = Dataset()
    for split, path in paths.items():
        ef = read_file(path)
        if ef.z.shape[0] == 0:
            raise DataError(f"{split} file {path} holds no videos")
        gens = ["real" if lab == 0 else "fake" for lab in ef.labels]
        ds.splits[split] = ef.to_batch(gens)
    return ds
