"""Versioned checkpoint container: named parameter arrays plus JSON metadata."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .model import EASwin, HeadConfig

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model: EASwin, meta: dict | None = None, optimizer=None) -> Path:
    """Write ``param/<name>`` arrays, optional AdamW moments and a ``__meta__`` JSON blob."""
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    info = {
        "format_version": FORMAT_VERSION,
        "head_config": model.cfg.to_dict(),
        "d_in": model.d_in,
        "tokens": model.tokens,
        **(meta or {}),
    }
    if optimizer is not None:
        for name, m in optimizer.m.items():
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = optimizer.v[name]
        info["optimizer_step"] = optimizer.step_count
    arrays["__meta__"] = np.frombuffer(json.dumps(info, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[EASwin, dict, dict]:
    """Return (model, metadata, optimizer moments keyed ``adam_m/...``)."""
    with np.load(Path(path)) as npz:
        if "__meta__" not in npz.files:
            raise CheckpointError(f"{path} has no metadata block")
        meta = json.loads(bytes(npz["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg = HeadConfig(**meta["head_config"])
        model = EASwin(cfg, meta["d_in"], meta["tokens"], seed=0)
        state = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
        model.load_state_dict(state)
        moments = {k: npz[k] for k in npz.files if k.startswith("adam_")}
    return model, meta, moments
