"""Training configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

from ..errors import ConfigError

METHODS = ("acp", "avi", "svi")


@dataclass
class TrainConfig:
    method: str = "acp"
    batch_size: int = 128
    mc_samples: int = 10
    learning_rate: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    tau0: float = 0.5
    tau_min: float = 0.2
    tau_decay: float = 0.97
    tau_interval: int = 100
    max_epochs: int = 200
    patience: int = 20
    val_every: int = 1
    val_samples: int = 100
    seed: int = 0
    learn_mu: bool = False
    # False trains only the posterior side (encoder or per-datum parameters)
    # against fixed generative parameters
    learn_generative: bool = True
    hidden: Optional[List[int]] = None
    hidden_act: str = "relu"
    detach_positive: bool = False
    mu_init: float = 0.1
    theta_init_range: List[float] = field(default_factory=lambda: [0.005, 0.05])
    theta0_init: float = 0.01
    # per-datum fit used for SVI validation and evaluation
    svi_eval_outer: int = 30
    # write measured wall-clock time into the log; off keeps logs byte-stable
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        bad = []
        if self.method not in METHODS:
            bad.append("method")
        if not (self.tau0 >= self.tau_min > 0):
            bad += ["tau0", "tau_min"]
        if not 0 < self.tau_decay <= 1:
            bad.append("tau_decay")
        if self.tau_interval < 1:
            bad.append("tau_interval")
        if self.mc_samples < 1:
            bad.append("mc_samples")
        if self.batch_size < 1:
            bad.append("batch_size")
        if not self.learning_rate > 0:
            bad.append("learning_rate")
        if self.max_epochs < 0:
            bad.append("max_epochs")
        if self.patience < 1:
            bad.append("patience")
        if self.val_every < 1:
            bad.append("val_every")
        if not 0 < self.mu_init < 1:
            bad.append("mu_init")
        if len(self.theta_init_range) != 2 or not 0 < self.theta_init_range[0] <= self.theta_init_range[1]:
            bad.append("theta_init_range")
        if not self.theta0_init > 0:
            bad.append("theta0_init")
        if self.hidden_act not in ("relu", "tanh", "sigmoid", "softplus", "identity"):
            bad.append("hidden_act")
        if bad:
            raise ConfigError(f"invalid training config fields: {', '.join(bad)}", bad)

    @classmethod
    def fields(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "TrainConfig":
        d = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = sorted(set(d) - set(cls.fields()))
        if unknown:
            raise ConfigError(f"unknown training config keys: {', '.join(unknown)}", unknown)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
