"""Experiment configuration, scale presets and the flat `key = value` config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .domains import BENCHMARK_MAGNITUDES, OPERATIONS, DomainOp
from .training import AeHparams, ClassifierHparams, CycleGanHparams, DistillHparams

SCALES = ("full", "desk")
HPARAM_BLOCKS = {"ae": AeHparams, "gan": CycleGanHparams, "distill": DistillHparams, "classifier": ClassifierHparams}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    operation: str = "shift"
    magnitude: float | None = None
    num_target_domains: int = 3
    runs: int = 12
    seed: int = 0
    scale: str = "full"
    n_train: int | None = None
    data_dir: str | None = None
    out_dir: str = "results"
    parallel_runs: int = 1
    residual_generator: bool = True
    ae: AeHparams = field(default_factory=AeHparams)
    gan: CycleGanHparams = field(default_factory=CycleGanHparams)
    distill: DistillHparams = field(default_factory=DistillHparams)
    classifier: ClassifierHparams = field(default_factory=ClassifierHparams)

    @property
    def op(self) -> DomainOp:
        magnitude = BENCHMARK_MAGNITUDES[self.operation] if self.magnitude is None else self.magnitude
        return DomainOp(self.operation, magnitude)

    def run_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.runs)]

    def validate(self) -> "ExperimentConfig":
        if self.operation not in OPERATIONS:
            raise ConfigError(f"unknown operation {self.operation!r}; valid operations: {', '.join(OPERATIONS)}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {', '.join(SCALES)}, got {self.scale!r}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.num_target_domains < 1:
            raise ConfigError("num_target_domains must be >= 1")
        if self.n_train is not None and self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if self.parallel_runs < 1:
            raise ConfigError("parallel_runs must be >= 1")
        for block in HPARAM_BLOCKS:
            hp = getattr(self, block)
            for f in dataclasses.fields(hp):
                v = getattr(hp, f.name)
                if f.name in ("epochs", "holdout", "decay_start", "lambda_cyc", "weight_decay", "momentum") and v < 0:
                    raise ConfigError(f"{block}.{f.name} must be non-negative, got {v}")
                if f.name in ("lr", "batch_size", "gamma") and v <= 0:
                    raise ConfigError(f"{block}.{f.name} must be positive, got {v}")
        try:
            self.op(_probe_image())
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self


def _probe_image():
    import numpy as np

    return np.full((1, 1, 32, 32), -1.0, dtype=np.float32)


def preset(scale: str = "full") -> dict:
    """Flat overrides a scale applies on top of the dataclass defaults (which are the full-scale values)."""
    if scale == "full":
        return {}
    if scale == "desk":
        return {
            "runs": 5, "n_train": 10000,
            "ae.epochs": 10, "distill.epochs": 10,
            "gan.epochs": 40, "gan.decay_start": 25,
            "classifier.epochs": 20, "classifier.milestones": (10, 15),
        }
    raise ConfigError(f"scale must be one of {', '.join(SCALES)}, got {scale!r}")


# ------------------------------------------------------------ flat format

def _parse_value(raw: str, default):
    raw = raw.strip()
    kind = type(default)
    if raw in ("None", ""):
        return None
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if kind is bool:
        return raw.lower() in ("1", "true", "yes")
    if kind in (int, float):
        return kind(raw)
    return raw


# field types for Optional fields, whose default None does not reveal them
_OPTIONAL_TYPES = {"magnitude": 0.0, "n_train": 0, "data_dir": ""}


def _template(key: str):
    if "." in key:
        block, name = key.split(".", 1)
        if block not in HPARAM_BLOCKS or name not in {f.name for f in dataclasses.fields(HPARAM_BLOCKS[block])}:
            raise ConfigError(f"unknown config key {key!r}")
        return getattr(HPARAM_BLOCKS[block](), name)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(HPARAM_BLOCKS)
    if key not in names:
        raise ConfigError(f"unknown config key {key!r}")
    return _OPTIONAL_TYPES.get(key, getattr(ExperimentConfig(), key))


def coerce(key: str, value):
    """Convert a raw string (or already typed value) to the type of `key`."""
    if value is None or not isinstance(value, str):
        _template(key)
        return tuple(value) if isinstance(value, list) else value
    try:
        return _parse_value(value, _template(key))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r}") from e


def read_flat(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = coerce(key.strip(), value)
    return values


def apply(cfg: ExperimentConfig, flat: dict) -> ExperimentConfig:
    for key, value in flat.items():
        value = coerce(key, value)
        if "." in key:
            block, name = key.split(".", 1)
            setattr(getattr(cfg, block), name, value)
        else:
            setattr(cfg, key, value)
    return cfg


def to_flat(cfg: ExperimentConfig) -> dict:
    flat = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in HPARAM_BLOCKS:
            flat.update({f"{f.name}.{k}": x for k, x in dataclasses.asdict(v).items()})
        else:
            flat[f.name] = v
    return flat


def format_flat(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in to_flat(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_flat(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_flat(cfg))
    return path


def load_config(flags: dict | None = None, config_file=None) -> ExperimentConfig:
    """Resolve a config with precedence: flags > config file > scale preset > defaults.

    `flags` maps flat keys to values; None values count as "not given".
    """
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    from_file = read_flat(config_file) if config_file else {}
    scale = flags.get("scale", from_file.get("scale", "full"))
    cfg = ExperimentConfig()
    apply(cfg, preset(scale))
    apply(cfg, from_file)
    apply(cfg, flags)
    return cfg.validate()
