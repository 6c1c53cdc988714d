"""Model/training configuration and its JSON schema."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigurationError

LAYER_KINDS = ("dense", "moe", "moe_share", "hypermoe")
CONDITION_ON = ("selected", "unselected")
EMBEDDING_SOURCES = ("learned", "compressed")


@dataclass
class ModelConfig:
    # dimensions
    h: int = 32
    d_ff: int | None = None          # defaults to 4*h
    n_experts: int = 4
    top_k: int = 1
    n_layers: int = 2
    t: int = 8                       # selection embedding dim
    t_prime: int = 8                 # expert / layer embedding dim
    t_k: int = 8                     # hypernetwork input dim
    b: int | None = None             # bottleneck, defaults to max(1, h // 4)
    # layer behaviour
    layer_kind: str = "hypermoe"
    aux_loss_coef: float = 0.01
    noise_enabled: bool = True
    renormalize_gate: bool = False
    condition_on: str = "unselected"
    embedding_source: str = "learned"
    # task
    task: str = "grouped_modular_addition"
    moduli: list[int] = field(default_factory=lambda: [5, 3, 4, 6])
    operand_range: int | None = None  # defaults to lcm(moduli)
    train_size: int = 8192
    eval_size: int = 2000
    # optimization
    seed: int = 0
    learning_rate: float = 1e-3
    steps: int = 400
    batch_size: int = 64
    warmup_frac: float = 0.1

    def __post_init__(self) -> None:
        if self.d_ff is None:
            self.d_ff = 4 * self.h
        if self.b is None:
            self.b = max(1, self.h // 4)
        for name in ("h", "d_ff", "n_experts", "top_k", "n_layers", "t", "t_prime", "t_k", "b"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.layer_kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer_kind must be one of {LAYER_KINDS}, got {self.layer_kind!r}")
        if self.condition_on not in CONDITION_ON:
            raise ConfigurationError(f"condition_on must be one of {CONDITION_ON}, got {self.condition_on!r}")
        if self.embedding_source not in EMBEDDING_SOURCES:
            raise ConfigurationError(
                f"embedding_source must be one of {EMBEDDING_SOURCES}, got {self.embedding_source!r}"
            )
        if self.top_k > self.n_experts:
            raise ConfigurationError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.layer_kind == "hypermoe" and self.top_k >= self.n_experts:
            raise ConfigurationError(
                "hypermoe requires top_k < n_experts (at least one unselected expert)"
            )
        if self.b >= self.h:
            raise ConfigurationError(f"bottleneck b={self.b} must be smaller than h={self.h}")
        if self.aux_loss_coef < 0:
            raise ConfigurationError("aux_loss_coef must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str) -> "ModelConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))
