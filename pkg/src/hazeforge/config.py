"""Run configuration: ``key = value`` text with one section per concern.

Precedence is CLI override > config file > built-in default.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, MissingFileError
from .losses import LossWeights, preset

SECTIONS = {
    "data": ("source", "n_images", "draws", "image_size", "test_fraction", "A_min", "A_max", "beta_min", "beta_max", "per_channel_A"),
    "model": ("scale", "depth", "conditional_d"),
    "train": (
        "preset", "seed", "batch_size", "stage1_iters", "stage2_iters", "lr", "beta1", "beta2", "eps",
        "d_updates", "stage2_t_weight", "train_d_stage2", "feature_seed", "smooth_window",
    ),
    "loss": ("lambda_a", "lambda_G", "lambda_p", "normalize"),
    "paths": ("data_dir", "out_dir"),
}


@dataclass(frozen=True)
class RunConfig:
    # data
    source: str = "procedural"
    n_images: int = 20
    draws: int = 2
    image_size: int = 64
    test_fraction: float = 0.2
    A_min: float = 0.5
    A_max: float = 1.2
    beta_min: float = 0.4
    beta_max: float = 1.6
    per_channel_A: bool = False
    # model
    scale: float = 0.125
    depth: int = 6
    conditional_d: bool = False
    # train
    preset: str = "I-L2-Per-T"
    seed: int = 0
    batch_size: int = 4
    stage1_iters: int = 200
    stage2_iters: int = 200
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d_updates: int = 1
    stage2_t_weight: float = 1.0
    train_d_stage2: bool = True
    feature_seed: int = 1234
    smooth_window: int = 10
    # loss
    lambda_a: float = 0.003
    lambda_G: float = 1.0
    lambda_p: float = 1.5
    normalize: str = "batch"
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("n_images", "draws", "image_size", "batch_size", "d_updates", "smooth_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("stage1_iters", "stage2_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 < self.scale <= 1:
            raise ConfigError("scale must lie in (0, 1]")
        self.weights  # validates the preset name and loss weights
        if self.image_size % (2**self.depth):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2**depth ({2**self.depth})")

    @property
    def weights(self) -> LossWeights:
        return preset(self.preset, lambda_a=self.lambda_a, lambda_G=self.lambda_G, lambda_p=self.lambda_p, normalize=self.normalize)

    @property
    def A_range(self) -> tuple[float, float]:
        return (self.A_min, self.A_max)

    @property
    def beta_range(self) -> tuple[float, float]:
        return (self.beta_min, self.beta_max)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return replace(self, **{k: _coerce(k, v) for k, v in kw.items()})

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec, keys in SECTIONS.items():
            cp[sec] = {k: _render(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text())


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, value):
    typ = _TYPES[key]
    if not isinstance(value, str):
        return value
    try:
        if typ == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        for k, v in cp[sec].items():
            if k not in SECTIONS[sec]:
                raise ConfigError(f"unknown key {k!r} in [{sec}]")
            values[k] = v
    return (base or RunConfig()).with_overrides(**values)


def load_config(path=None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingFileError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(), cfg)
    return cfg.with_overrides(**overrides)
