"""Flat ``key = value`` run configuration files.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are errors.

=========================  ============  ==========================================
key                        default       meaning
=========================  ============  ==========================================
model.variant              EDED          EDED, DED or MESD
model.max_width            16            deepest encoder width (multiple of 16)
model.exchange_position    3             encoder block whose output is exchanged
model.cbam                 true          CBAM at the end of encoder blocks 2-5
train.lr                   0.001         AdamW initial learning rate
train.weight_decay         0.001         AdamW decoupled weight decay
train.epochs               100           training epochs
train.batch                4             samples per step
train.loss_weights         1,0.5,0.5     fusion, T1-branch, T2-branch loss weights
train.warmup               3             epochs before validation starts
train.patience             12            plateau epochs before lr x0.1
train.augment              true          random augmentation of training pairs
train.val_fraction         0.125         share of the data held out for validation
data.scenario              SVBCD         ICCD, SVBCD or MVBCD (synthetic data)
data.count                 64            number of synthetic pairs
data.size                  64            synthetic canvas extent (multiple of 32)
seed                       0             seeds model init, data order, augmentation
=========================  ============  ==========================================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _weights(s: str) -> tuple[float, float, float]:
    parts = [float(p) for p in s.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated weights, got {s!r}")
    return tuple(parts)


_SCHEMA = {
    "model.variant": (str.upper, "EDED"),
    "model.max_width": (int, 16),
    "model.exchange_position": (int, 3),
    "model.cbam": (_bool, True),
    "train.lr": (float, 1e-3),
    "train.weight_decay": (float, 1e-3),
    "train.epochs": (int, 100),
    "train.batch": (int, 4),
    "train.loss_weights": (_weights, (1.0, 0.5, 0.5)),
    "train.warmup": (int, 3),
    "train.patience": (int, 12),
    "train.augment": (_bool, True),
    "train.val_fraction": (float, 0.125),
    "data.scenario": (str.upper, "SVBCD"),
    "data.count": (int, 64),
    "data.size": (int, 64),
    "seed": (int, 0),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in _SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in _SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            conv = _SCHEMA[key][0]
            try:
                cfg.values[key] = conv(value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(variant=self["model.variant"], max_width=self["model.max_width"],
                           exchange_position=self["model.exchange_position"],
                           cbam_enabled=self["model.cbam"], loss_weights=self["train.loss_weights"],
                           seed=self["seed"])

    def train_config(self):
        from .data import AugmentConfig
        from .train import TrainConfig

        return TrainConfig(epochs=self["train.epochs"], batch=self["train.batch"], lr=self["train.lr"],
                           weight_decay=self["train.weight_decay"], warmup=self["train.warmup"],
                           patience=self["train.patience"], seed=self["seed"],
                           augment=AugmentConfig() if self["train.augment"] else None)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return str(v)
