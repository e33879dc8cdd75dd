"""RunConfig: the JSON document every CLI command is driven by.

Loading is strict: unknown keys and mistyped values raise ``ConfigError``
before any work starts. Command-line flags are generated from the leaves of
the default document, so ``--help`` always matches the schema.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .bench import BenchConfig
from .data import PRESETS, SyntheticSpec, preset
from .gradcheck import GradcheckConfig
from .model import ConfigError, HeadConfig
from .train import TrainConfig

SPLITS = ("train", "val", "test")


@dataclass
class DataConfig:
    # synthetic source: a named preset plus per-field overrides
    preset: str = "default"
    synthetic: dict = field(default_factory=dict)
    # file sources (take precedence over synthetic when set)
    dir: str | None = None
    train_file: str | None = None
    val_file: str | None = None
    test_file: str | None = None

    def spec(self) -> SyntheticSpec:
        names = {f.name for f in fields(SyntheticSpec)}
        unknown = set(self.synthetic) - names
        if unknown:
            raise ConfigError(f"unknown data.synthetic keys: {sorted(unknown)}")
        base = preset(self.preset)
        values = {}
        for k, v in self.synthetic.items():
            values[k] = _coerce(f"data.synthetic.{k}", getattr(base, k), v)
        return preset(self.preset, **values).validate()

    def files(self) -> dict:
        return {s: getattr(self, f"{s}_file") for s in SPLITS if getattr(self, f"{s}_file")}

    def validate(self) -> "DataConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.dir and self.files():
            raise ConfigError("set either data.dir or data.*_file, not both")
        self.spec()
        return self


@dataclass
class EvalConfig:
    checkpoint: str | None = None
    split: str = "val"
    # evaluate at each of these frame counts (uniform subsampling); empty = native T
    frames: list = field(default_factory=list)
    threshold: float = 0.5


@dataclass
class RunConfig:
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/easwin"
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.head.validate()
        self.train.validate()
        self.data.validate()
        if self.eval.split not in SPLITS:
            raise ConfigError(f"eval.split must be one of {SPLITS}")
        if any(not isinstance(k, int) or k < 1 for k in self.eval.frames):
            raise ConfigError("eval.frames must be positive integers")
        if any(t < 1 for t in self.bench.t_values):
            raise ConfigError("bench.t_values must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "").validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)


def _coerce(path: str, default, value):
    """Check ``value`` against the type of ``default``; ints widen to float."""
    if default is None or value is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return dict(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build(cls, doc, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    default = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        where = f" in {prefix.rstrip('.')}" if prefix else ""
        raise ConfigError(f"unknown keys{where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        current = getattr(default, name)
        path = prefix + name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, path + ".")
        else:
            kwargs[name] = _coerce(path, current, value)
    return cls(**kwargs)


# -- dotted-path flags --------------------------------------------------------

def flag_schema() -> dict:
    """Dotted leaf path -> default value, over the default RunConfig.

    ``data.synthetic`` is expanded to one leaf per synthetic-spec field.
    """
    out = {}

    def walk(node, prefix):
        for k, v in node.items():
            path = prefix + k
            if path == "data.synthetic":
                for sk, sv in SyntheticSpec().to_dict().items():
                    out[f"{path}.{sk}"] = sv
            elif isinstance(v, dict):
                walk(v, path + ".")
            else:
                out[path] = v

    walk(RunConfig().to_dict(), "")
    return out


def parse_flag_value(path: str, default, text: str):
    """Parse one command-line string according to the leaf's default type."""
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            if text.strip().startswith("["):
                return json.loads(text)
            return [json.loads(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"--{path}: cannot parse {text!r}") from exc
    if default is None and text.lower() in ("none", "null"):
        return None
    return text


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Return a copy of ``doc`` with each dotted path set to its value."""
    doc = copy.deepcopy(doc)
    for path, value in overrides.items():
        node = doc
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {path}: {p} is not an object")
        node[leaf] = value
    return doc
