"""Run configuration: a flat key=value file with dotted namespaces
(``model.heads=4``), parsed onto typed dataclasses and validated up front.

The model namespace also defines the checkpoint compatibility hash: two
configs with the same ``model.*`` values can exchange parameters.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .temporal import validate_schedule

SEED_ENV_VAR = "STVOD_SEED"


class ConfigError(ValueError):
    """Raised when a configuration file or value is invalid."""


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    points: int = 4
    queries: int = 30
    enc_layers: int = 2
    dec_layers: int = 2
    classes: int = 4
    ref_frames: int = 4
    tdte_layers: int = 1
    tqe_schedule: tuple[int, ...] = (16, 10, 6)
    tdtd_layers: int = 1
    frame_embeddings: bool = True


@dataclass
class LossConfig:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    temporal_weight: float = 1.0
    scoring_weight: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 2e-4
    backbone_lr: float = 2e-5
    weight_decay: float = 1e-4
    spatial_steps: int = 4000
    temporal_steps: int = 1500
    decay_fraction: float = 0.8
    decay_factor: float = 0.1
    log_every: int = 50


@dataclass
class DataConfig:
    frame_size: int = 64
    frames_per_clip: int = 5
    train_clips: int = 200
    val_clips: int = 50
    min_objects: int = 1
    max_objects: int = 3
    degradation_prob: float = 0.5
    val_degradation_prob: float = 0.5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 7

    def validate(self) -> None:
        m = self.model
        if m.dim % m.heads != 0:
            raise ConfigError(f"model.dim={m.dim} not divisible by model.heads={m.heads}")
        if m.dim % 4 != 0:
            raise ConfigError(f"model.dim={m.dim} must be divisible by 4")
        if m.ref_frames < 0:
            raise ConfigError(f"model.ref_frames={m.ref_frames} must be >= 0")
        if min(m.queries, m.classes, m.points) < 1:
            raise ConfigError("model.queries, model.classes, model.points must be >= 1")
        try:
            validate_schedule(m.tqe_schedule, pool_size=m.ref_frames * m.queries or None)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if m.ref_frames == 0 and m.tqe_schedule:
            raise ConfigError("model.tqe_schedule needs model.ref_frames >= 1")
        if self.data.frames_per_clip < m.ref_frames + 1:
            raise ConfigError(
                f"data.frames_per_clip={self.data.frames_per_clip} cannot cover "
                f"{m.ref_frames} reference frames plus the current frame"
            )
        for name in ("cls", "l1", "giou", "temporal_weight", "scoring_weight"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be nonnegative")
        if not 0.0 < self.loss.focal_alpha < 1.0:
            raise ConfigError("loss.focal_alpha must be in (0,1)")
        if self.loss.focal_gamma < 0:
            raise ConfigError("loss.focal_gamma must be >= 0")
        if self.optim.lr <= 0 or self.optim.backbone_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.optim.decay_fraction <= 1:
            raise ConfigError("optim.decay_fraction must be in (0,1]")

    def model_hash(self) -> str:
        blob = json.dumps(asdict(self.model), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {"seed": self.seed}
        for section in ("model", "loss", "optim", "data"):
            for f in fields(getattr(self, section)):
                flat[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return flat


def _coerce(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if kind is tuple or str(kind).startswith("tuple"):
            if not raw:
                return ()
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from exc


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines (``#`` comments, blank lines allowed)."""
    cfg = RunConfig()
    sections = {"model": cfg.model, "loss": cfg.loss, "optim": cfg.optim, "data": cfg.data}
    types = {
        f"{sec}.{f.name}": f.type
        for sec, obj in sections.items()
        for f in fields(obj)
    }
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "seed":
            cfg.seed = _coerce(key, raw, int)
            continue
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name = key.split(".", 1)
        kind_name = str(types[key])
        if "tuple" in kind_name:
            kind = tuple
        elif kind_name in ("int", "<class 'int'>"):
            kind = int
        elif kind_name in ("float", "<class 'float'>"):
            kind = float
        elif kind_name in ("bool", "<class 'bool'>"):
            kind = bool
        else:
            kind = str
        setattr(sections[section], name, _coerce(key, raw, kind))
    if SEED_ENV_VAR in os.environ:
        try:
            cfg.seed = int(os.environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    cfg.validate()
    return cfg


def config_from_flat(flat: dict) -> RunConfig:
    """Rebuild a RunConfig from a ``to_flat()`` mapping (JSON round-trip
    turns tuples into lists, so coerce sequence fields back)."""
    cfg = RunConfig()
    sections = {"model": cfg.model, "loss": cfg.loss, "optim": cfg.optim, "data": cfg.data}
    for key, value in flat.items():
        if key == "seed":
            cfg.seed = int(value)
            continue
        section, name = key.split(".", 1)
        if section not in sections or not hasattr(sections[section], name):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, list):
            value = tuple(int(v) for v in value)
        setattr(sections[section], name, value)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
