"""Training and model hyperparameters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .errors import ContractError


@dataclass
class TrainConfig:
    gamma: float = 0.5
    gamma_sharp: float = 0.75
    lam: float = 0.1
    delta: Optional[float] = None  # cross-graph temperature, default sqrt(d1)
    delta_p: Optional[float] = None  # affinity temperature, default sqrt(d3)
    widths: tuple[int, int, int] = (64, 64, 64)
    sinkhorn_iters: int = 20
    sinkhorn_eps: float = 1e-12
    ce_clamp: float = 1e-7
    learn_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    graph_learning: bool = True
    sharpening: bool = True
    constraint_loss: bool = True
    share_graph_theta: bool = True
    graph_theta_scale: float = 0.1
    widths_preset: Optional[str] = field(default=None, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.betas = tuple(float(b) for b in self.betas)
        if self.widths_preset == "large":
            self.widths = (2048, 2048, 2048)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.gamma_sharp <= 0.0:
            raise ContractError(f"gamma_sharp must be positive, got {self.gamma_sharp}")
        if self.lam < 0.0:
            raise ContractError(f"lambda must be nonnegative, got {self.lam}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ContractError(f"widths must be three positive ints, got {self.widths}")
        if self.sinkhorn_iters < 1:
            raise ContractError("sinkhorn_iters must be >= 1")
        if not 0.0 < self.ce_clamp < 0.5:
            raise ContractError("ce_clamp must lie in (0, 0.5)")
        if self.learn_rate <= 0.0:
            raise ContractError("learn_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        for name in ("delta", "delta_p"):
            v = getattr(self, name)
            if v is not None and v <= 0.0:
                raise ContractError(f"{name} must be positive")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.constraint_loss else 0.0

    @property
    def cross_delta(self) -> float:
        return self.delta if self.delta is not None else math.sqrt(self.widths[0])

    @property
    def affinity_delta(self) -> float:
        return self.delta_p if self.delta_p is not None else math.sqrt(self.widths[2])

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("widths_preset")
        d["widths"] = list(self.widths)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)
