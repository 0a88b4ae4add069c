"""Run configuration: defaults <- YAML file <- command-line flags."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .losses import LossWeights
from .networks import NetworkConfig
from .training import Schedule, TrainConfig

# QP of the DVC anchor <-> its lambda <-> rate weight omega of the mixed loss
QP_TO_LAMBDA = {22: 2048, 27: 1024, 32: 512, 37: 256}
QP_TO_OMEGA = {qp: 1.0 / lam for qp, lam in QP_TO_LAMBDA.items()}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 0
    schedule: Schedule = field(default_factory=Schedule)
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data_dir: Optional[str] = None
    cache_dir: Optional[str] = None
    out_dir: str = "runs"
    batch_size: int = 4
    crop_size: int = 256
    frames_per_sample: int = 7
    lr: float = 1e-4
    clip_norm: float = 1.0
    extractor: str = "random"
    checkpoint_every: int = 10_000
    synthetic: bool = False
    synth_canvas: int = 48
    gop_size: int = 10
    intra_mode: str = "stored"
    test_frames: int = 100
    fvd_clip_len: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:10]

    def train_config(self) -> TrainConfig:
        return TrainConfig(schedule=self.schedule, weights=self.weights, network=self.network,
                           seed=self.seed, batch_size=self.batch_size, crop_size=self.crop_size,
                           frames_per_sample=self.frames_per_sample, lr=self.lr,
                           clip_norm=self.clip_norm, extractor=self.extractor,
                           checkpoint_every=self.checkpoint_every, out_dir=self.out_dir)

    def save(self, directory) -> Path:
        path = Path(directory) / "run_config.yaml"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _merge(obj, updates: dict, prefix: str = ""):
    if not isinstance(updates, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    known = {f.name: f for f in fields(obj)}
    kwargs = {}
    for key, value in updates.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(name, "unknown key")
        current = getattr(obj, key)
        if is_dataclass(current):
            kwargs[key] = _merge(current, value or {}, name + ".")
        else:
            kwargs[key] = value
    merged = {f: getattr(obj, f) for f in known}
    merged.update(kwargs)
    try:
        return type(obj)(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix.rstrip(".") or next(iter(updates), "<root>"), str(e)) from e


def resolve_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Build a fully resolved RunConfig.

    ``overrides`` uses the same nested layout as the YAML file; ``None`` leaves
    are ignored so unset command-line flags do not clobber file values.
    """
    cfg = RunConfig(data_dir=os.environ.get("DVCP_DATA_DIR"),
                    cache_dir=os.environ.get("DVCP_CACHE"))
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        cfg = _merge(cfg, loaded)
    if overrides:
        cfg = _merge(cfg, _drop_none(overrides))
    return cfg


def _drop_none(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = _drop_none(v)
            if v:
                out[k] = v
        elif v is not None:
            out[k] = v
    return out


def load_run_config(path) -> RunConfig:
    return resolve_config(path)


def omega_for(qp: Optional[int] = None, omega: Optional[float] = None) -> Optional[float]:
    if qp is not None and omega is not None:
        raise ConfigError("omega", "give either --qp or --omega, not both")
    if qp is not None:
        if qp not in QP_TO_OMEGA:
            raise ConfigError("qp", f"must be one of {sorted(QP_TO_OMEGA)}")
        return QP_TO_OMEGA[qp]
    return omega

