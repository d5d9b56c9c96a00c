"""Experiment configuration: nested dataclasses serialized as versioned JSON."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..demon import PpoConfig
from ..dnc import DncConfig
from ..tasks import TaskConfig

SCHEMA_VERSION = 1


@dataclass
class MineConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    ema_decay: float = 0.99
    lr: float = 1e-4
    warmup: int = 1000
    heldout_every: int = 10
    updates_per_batch: int = 1

    def validate(self) -> "MineConfig":
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("mine.ema_decay must lie in (0, 1)")
        if self.heldout_every < 2:
            raise ValueError("mine.heldout_every must be >= 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("mine.activation must be relu or tanh")
        return self


@dataclass
class ExperimentConfig:
    dnc: DncConfig
    task: TaskConfig = field(default_factory=TaskConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    mine: MineConfig = field(default_factory=MineConfig)
    demon_enabled: bool = False
    steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 10.0
    seed: int = 0
    dtype: str = "float32"
    snapshot_stride: int = 1
    log_interval: int = 100
    eval_interval: int = 500
    eval_samples: int = 256
    checkpoint_interval: int = 1000
    target_error: float | None = None
    schema: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {self.schema} (expected {SCHEMA_VERSION})")
        self.dnc.validate()
        self.task.validate()
        self.ppo.validate()
        self.mine.validate()
        for name in ("steps", "batch_size", "snapshot_stride", "log_interval", "eval_interval",
                     "eval_samples", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.checkpoint_interval % self.log_interval:
            raise ValueError("checkpoint_interval must be a multiple of log_interval")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.task.kind != "babi":
            ind, outd = self.task.dims()
            if (self.dnc.input_dim, self.dnc.output_dim) != (ind, outd):
                raise ValueError(f"dnc dims {(self.dnc.input_dim, self.dnc.output_dim)} do not match "
                                 f"task dims {(ind, outd)}")
        return self

    @property
    def variant(self) -> str:
        return self.dnc.variant + ("-Demon" if self.demon_enabled else "")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        schema = d.get("schema", SCHEMA_VERSION)
        if schema != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {schema}")
        sub = {"dnc": DncConfig, "task": TaskConfig, "ppo": PpoConfig, "mine": MineConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in sub.items():
            if key in d:
                d[key] = _build(typ, d[key], key)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> bytes:
        """32-byte SHA-256 over the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()


def _build(typ, d: dict, where: str):
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return typ(**d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text()).validate()


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


def repeat_copy_desk(demon: bool = False, seed: int = 0, **overrides) -> ExperimentConfig:
    """Desk-scale repeat-copy: B=8, L in [1,8], R in [1,3], N=W=16, masked DNC."""
    task = TaskConfig(kind="repeat_copy", bits=8, min_length=1, max_length=8, min_repeats=1, max_repeats=3)
    ind, outd = task.dims()
    cfg = ExperimentConfig(
        dnc=DncConfig(input_dim=ind, output_dim=outd, N=16, W=16, R=1, hidden=128, mask=True),
        task=task, demon_enabled=demon, seed=seed, steps=20000, batch_size=16,
        target_error=0.05,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()
