"""Training configuration: every hyperparameter with its default and range.

Defaults follow the reference training recipe (Adam at 2e-5, batch 21, decay
0.95 every three epochs, temperature 0.07, 1024 decoupled negatives with up
to 512 hard ones, 100 warmup steps for the next-frame loss).  `desk()` is the
small-scale preset used by the synthetic-corpus tests: 64-d joint space,
128-wide layers, 256 negatives, batch 16.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class TrainConfig:
    # optimization
    lr: float = 2e-5
    batch_size: int = 21
    lr_decay: float = 0.95
    lr_decay_every_epochs: int = 3
    epochs: int = 10
    seed: int = 0
    # retrieval contrastive loss
    tau_ret: float = 0.07
    trainable_temperature: bool = False
    n_neg: int = 1024
    n_hard_max: int = 512
    hard_mining: bool = True
    kmeans_k: int = 64
    # progressive schedule
    nfc_warmup_steps: int = 100
    nfc_negatives: int = 10
    # alignment head
    head: str = "direct"
    lam: float = 0.0
    tau_vq: float = 0.1
    # masked-segment auxiliary loss
    aux_mlm: bool = False
    mask_prob: float = 0.15
    aux_weight: float = 1.0
    # segmental encoder architecture
    frame_hidden: int = 1024
    frame_out: int = 0  # 0: frame_dim
    conv_filters: int = 1024
    seg_hidden: int = 512
    out_dim: int = 512
    boundary_threshold: float = 0.5
    max_segments: int = 64
    # embedding pool handling
    normalize_images: bool = True
    normalize_segments: bool = False
    # validation during training
    val_subsample: int = 0  # 0: full validation split
    # twin-branch (audio-only) dimensions; 0 falls back to out_dim
    twin_right_dim: int = 0
    twin_joint_dim: int = 0
    twin_identity_projection: bool = False
    twin_symmetric: bool = False

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(
            lr=1e-3,
            batch_size=16,
            n_neg=256,
            n_hard_max=128,
            epochs=30,
            frame_hidden=128,
            conv_filters=128,
            seg_hidden=128,
            out_dim=64,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        positive = (
            "lr", "batch_size", "lr_decay", "lr_decay_every_epochs", "epochs", "tau_ret",
            "n_neg", "kmeans_k", "nfc_negatives", "tau_vq", "aux_weight", "frame_hidden",
            "conv_filters", "seg_hidden", "out_dim", "max_segments",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("lam", "n_hard_max", "nfc_warmup_steps", "val_subsample", "frame_out", "twin_right_dim", "twin_joint_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.lr_decay > 1.0:
            raise ConfigError(f"lr_decay: must be in (0, 1], got {self.lr_decay}")
        if self.n_hard_max > self.n_neg:
            raise ConfigError(f"n_hard_max ({self.n_hard_max}) exceeds n_neg ({self.n_neg})")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob: must be in [0, 1], got {self.mask_prob}")
        if self.head not in ("direct", "regularized", "vq"):
            raise ConfigError(f"head: unknown kind {self.head!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = d.keys() - known.keys()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {}
        defaults = cls()
        for key, value in d.items():
            target = getattr(defaults, key)
            try:
                if isinstance(target, bool):
                    if isinstance(value, bool):
                        coerced[key] = value
                    elif isinstance(value, str) and value.lower() in ("true", "false"):
                        coerced[key] = value.lower() == "true"
                    elif isinstance(value, (int, float)) and value in (0, 1):
                        coerced[key] = bool(value)
                    else:
                        raise ValueError(value)
                elif isinstance(target, int):
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError(value)
                    coerced[key] = int(value)
                elif isinstance(target, float):
                    coerced[key] = float(value)
                else:
                    coerced[key] = str(value)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {type(target).__name__}")
        cfg = cls(**coerced)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def lr_at_epoch(self, epoch: int) -> float:
        """Step decay: multiply by lr_decay once every lr_decay_every_epochs."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every_epochs)


def load_config(path_or_dict, overrides: dict | None = None) -> TrainConfig:
    """Config from a JSON file (or dict) with --set style overrides applied last."""
    if isinstance(path_or_dict, dict):
        base = dict(path_or_dict)
    else:
        from pathlib import Path

        text = Path(path_or_dict).read_text(encoding="utf-8")
        base = json.loads(text) if text.strip() else {}
        if not isinstance(base, dict):
            raise ConfigError(f"config file {path_or_dict} must contain a JSON object")
    if overrides:
        base.update(overrides)
    return TrainConfig.from_dict(base)
