"""Command-line entry point: ``easwin {gen,train,eval,gradcheck,ablate,bench}``.

Every command reads a RunConfig JSON (``--config``) and accepts one flag per
config leaf (``--train.lr 1e-4``) that overrides a single key.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .bench import format_table, run_bench
from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, apply_overrides, flag_schema, parse_flag_value
from .data import DataError, Dataset, generate, load_dataset, load_files, subsample_frames, write_dataset
from .gradcheck import run_gradcheck
from .metrics import UndefinedMetricError, evaluate, grouped_reports
from .model import ConfigError, predict
from .tensor import NonFiniteError
from .train import TrainingDivergedError, predict_logits, train

log = logging.getLogger("easwin")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ACCEPTANCE = 5

COMMANDS = ("gen", "train", "eval", "gradcheck", "ablate", "bench")
METRICS = ("accuracy", "precision", "recall", "f1", "auc")

# base + the four architecture simplifications
ABLATIONS = {
    "base": {},
    "no_shift": {"use_shift": False},
    "joint_attention": {"joint_attention": True},
    "mean_pool": {"pool": "mean"},
    "mlp_baseline": {"head_kind": "mlp_baseline"},
}

# growth limits per doubling of T
FACTORIZED_MAX_GROWTH = 2.2
JOINT_MIN_GROWTH = 3.5


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="easwin", description="Embedding-agnostic shifted-window video detector")
    sub = parser.add_subparsers(dest="command", required=True)
    schema = flag_schema()
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} command", argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="RunConfig JSON file (defaults apply when omitted)")
        for path, default in schema.items():
            kind = "bool" if isinstance(default, bool) else type(default).__name__ if default is not None else "str"
            p.add_argument(f"--{path}", dest=f"set:{path}", metavar=kind.upper(), help=f"default: {default!r}")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    schema = flag_schema()
    overrides = {}
    for key, text in vars(args).items():
        if key.startswith("set:"):
            path = key[4:]
            overrides[path] = parse_flag_value(path, schema[path], text)
    return RunConfig.from_dict(apply_overrides(doc, overrides))


def limit_threads() -> None:
    value = os.environ.get("EASWIN_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"EASWIN_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("EASWIN_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


# -- shared helpers ---------------------------------------------------------

def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data.dir:
        return load_dataset(cfg.data.dir)
    if cfg.data.files():
        return load_files(cfg.data.files())
    return generate(cfg.data.spec())


def need_split(ds: Dataset, split: str):
    if split not in ds.splits:
        raise DataError(f"dataset has no {split!r} split (have {sorted(ds.splits)})")
    return ds[split]


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _table(rows: list[dict], cols: list[str]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    widths = [max(len(c), *(len(fmt(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(fmt(r[c]).ljust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(lines)


# -- commands ---------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> int:
    if cfg.data.files():
        raise ConfigError("gen writes a synthetic dataset; unset data.*_file")
    out = Path(cfg.data.dir or Path(cfg.output_dir) / "data")
    manifest = write_dataset(generate(cfg.data.spec()), out)
    for e in manifest["splits"]:
        print(f"{e['split']:5s} n={e['n']:5d} T={e['T']} S={e['S']} D_in={e['D_in']} -> {out / e['path']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    ds = load_data(cfg)
    summary = train(need_split(ds, "train"), need_split(ds, "val"), cfg.head, cfg.train, out)
    write_json(out / "summary.json", summary.to_dict())
    rows = [{"stat": k, **getattr(summary, attr)} for k, attr in (("mean", "mean"), ("std", "std"), ("max", "best"))]
    print(_table(rows, ["stat", *METRICS]))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.eval.checkpoint:
        raise ConfigError("eval requires eval.checkpoint")
    try:
        model, meta, _ = load_checkpoint(cfg.eval.checkpoint)
    except (OSError, CheckpointError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {cfg.eval.checkpoint}: {exc}") from exc
    batch = need_split(load_data(cfg), cfg.eval.split)
    if batch.labels is None:
        raise DataError("evaluation split carries no labels")
    frames = cfg.eval.frames or [batch.z.shape[1]]
    rows = []
    for k in frames:
        sub = subsample_frames(batch, k)
        probs, _ = predict(predict_logits(model, sub, cfg.train.eval_batch_size))
        reports = [evaluate(probs, sub.labels, "all", cfg.eval.threshold)]
        if sub.generators is not None:
            try:
                reports += grouped_reports(probs, sub.labels, sub.generators, seed=cfg.train.seeds[0])
            except UndefinedMetricError as exc:
                log.warning("per-generator reports skipped: %s", exc)
        rows += [{"frames": k, **r.to_dict()} for r in reports]
    out = Path(cfg.output_dir)
    write_csv(out / "eval.csv", rows)
    write_json(out / "eval.json", {"checkpoint": cfg.eval.checkpoint, "split": cfg.eval.split, "reports": rows})
    print(_table(rows, ["frames", "group", *METRICS]))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    gc = cfg.gradcheck
    results = run_gradcheck(gc)
    worst = max(r.max_rel_err for r in results)
    for r in results:
        print(f"{r.label:26s} max_rel_err={r.max_rel_err:.3e} worst={r.worst_param} params={r.n_checked} {r.seconds:.1f}s")
    ok = worst < gc.tolerance
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e}{'<' if ok else '>='}{gc.tolerance:g}")
    write_json(
        Path(cfg.output_dir) / "gradcheck.json",
        {
            "passed": ok,
            "max_rel_err": worst,
            "tolerance": gc.tolerance,
            "variants": [
                {"label": r.label, "max_rel_err": r.max_rel_err, "worst_param": r.worst_param, "per_param": r.per_param}
                for r in results
            ],
        },
    )
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_ablate(cfg: RunConfig) -> int:
    ds = load_data(cfg)
    train_b, val_b = need_split(ds, "train"), need_split(ds, "val")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    rows = []
    for name, change in ABLATIONS.items():
        head = replace(cfg.head, **change)
        summary = train(train_b, val_b, head, cfg.train, out / name)
        rows.append({"variant": name, **summary.mean})
        log.info("ablation %s: %s", name, summary.mean)
    write_csv(out / "ablation.csv", rows)
    write_json(out / "ablation.json", rows)
    print(_table(rows, ["variant", *METRICS]))
    return EXIT_OK


def bench_checks(rows) -> dict:
    """Growth ratios per doubling of T, and whether they meet the limits."""
    doubling = [(a, b) for a, b in zip(rows, rows[1:]) if b.frames == 2 * a.frames]
    if not doubling:
        raise ConfigError("bench.t_values needs at least one consecutive doubling of T")
    fact = [b.factorized_core / a.factorized_core for a, b in doubling]
    fact_total = [b.factorized_total / a.factorized_total for a, b in doubling]
    joint = [b.joint_core / a.joint_core for a, b in doubling]
    joint_total = [b.joint_total / a.joint_total for a, b in doubling]
    return {
        "pairs": [[a.frames, b.frames] for a, b in doubling],
        "factorized_core_growth": fact,
        "factorized_total_growth": fact_total,
        "joint_core_growth": joint,
        "joint_total_growth": joint_total,
        "passed": max(fact) <= FACTORIZED_MAX_GROWTH and max(fact_total) <= FACTORIZED_MAX_GROWTH
        and min(joint) >= JOINT_MIN_GROWTH,
    }


def cmd_bench(cfg: RunConfig) -> int:
    rows = run_bench(cfg.bench)
    print(format_table(rows))
    checks = bench_checks(rows)
    for key in ("factorized_core_growth", "factorized_total_growth", "joint_core_growth", "joint_total_growth"):
        print(f"{key:24s} " + " ".join(f"{g:.2f}" for g in checks[key]))
    print("PASS" if checks["passed"] else "FAIL", "complexity growth")
    out = Path(cfg.output_dir)
    table = [
        {
            "T": r.frames,
            "temporal_core": r.temporal_core,
            "temporal_total": r.temporal_total,
            "spatial_core": r.spatial_core,
            "spatial_total": r.spatial_total,
            "joint_core": r.joint_core,
            "joint_total": r.joint_total,
            "temporal_ms": r.temporal_ms,
            "spatial_ms": r.spatial_ms,
            "joint_ms": r.joint_ms,
        }
        for r in rows
    ]
    write_csv(out / "bench.csv", table)
    write_json(out / "bench.json", {"rows": table, "checks": checks})
    return EXIT_OK if checks["passed"] else EXIT_ACCEPTANCE


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        limit_threads()
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        where = getattr(exc, "checkpoint", None)
        print(f"numeric failure: {exc}" + (f" (last good state: {where})" if where else ""), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
