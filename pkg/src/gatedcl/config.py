"""Training configuration, bundled profiles, and config-file loading."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError


@dataclass
class TrainConfig:
    """Every knob of a sequential training run; serialized into checkpoints
    and the run manifest."""

    batch_size: int = 256
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_per_task: int = 400
    grad_clip: float = 1.0
    lr_decay_epochs: list[int] = field(default_factory=list)
    lambda_s: float = 0.5
    sparsity_patience: int = 20
    seed: int = 0
    buffer_capacity: int = 500
    strict_mask: bool = True
    mode: str = "ci"                     # ti: task oracle at test; ci: inferred
    val_fraction: float = 0.1
    relevance_samples_per_input: int = 1
    relevance_stochastic: bool = True
    threads: int = 0                     # 0 = leave the backend default

    def validate(self) -> "TrainConfig":
        positive = {"batch_size": self.batch_size,
                    "learning_rate": self.learning_rate,
                    "epochs_per_task": self.epochs_per_task,
                    "grad_clip": self.grad_clip}
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        nonneg = {"momentum": self.momentum, "weight_decay": self.weight_decay,
                  "lambda_s": self.lambda_s,
                  "sparsity_patience": self.sparsity_patience,
                  "buffer_capacity": self.buffer_capacity,
                  "relevance_samples_per_input": self.relevance_samples_per_input,
                  "threads": self.threads}
        for name, value in nonneg.items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.mode not in ("ti", "ci"):
            raise ConfigError(f"mode must be 'ti' or 'ci', got {self.mode!r}")
        if self.mode == "ci" and self.buffer_capacity == 0:
            raise ConfigError(
                "class-incremental training needs a non-empty episodic buffer "
                "(buffer_capacity > 0)")
        if any(e <= 0 for e in self.lr_decay_epochs):
            raise ConfigError("lr_decay_epochs entries must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        with open(path) as f:
            text = f.read()
        if path.endswith((".yaml", ".yml")):
            import yaml
            raw = yaml.safe_load(text)
        else:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(raw)


# `paper`: the full-length reference hyperparameters for the MNIST-scale
# benchmark. `desk`: identical except a 30-epoch schedule, sized so the whole
# 5-task protocol finishes on a small CPU; this is the acceptance profile.
PROFILES: dict[str, dict] = {
    "paper": {},
    "desk": {"epochs_per_task": 30},
}


def profile_config(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choices: {sorted(PROFILES)}")
    merged = dict(PROFILES[name])
    merged.update(overrides)
    return TrainConfig.from_dict(merged)
