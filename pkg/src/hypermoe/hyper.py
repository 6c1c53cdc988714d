"""HyperExpert: per-token bottleneck experts generated by a shared hypernetwork.

The pipeline per token: invert the routing mask to find the unselected
experts, average their embeddings through a small MLP into a selection
embedding, fuse with the layer embedding, and feed the result to the shared
generator to produce a (down, up) bottleneck expert that runs in parallel
with the routed experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigurationError, DegenerateSelectionError, DimensionError
from .moe import ExpertBank, GateDecision, moe_forward
from .tensor import Tensor


@dataclass
class EmbeddingTables:
    expert: Tensor  # (N, t') one learned row per expert
    layer: Tensor   # (L, t') one learned row per transformer layer


@dataclass
class SelectionMlp:
    """Two affine layers with a ReLU between, t' -> t."""

    w1: Tensor  # (t', hidden)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (hidden, t)
    b2: Tensor  # (t,)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class Projector:
    """Single affine layer (t + t') -> t_k fusing selection and layer embeddings."""

    w: Tensor  # (t + t', t_k)
    b: Tensor  # (t_k,)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


@dataclass
class HyperNetParams:
    """Shared generator weights; one instance per model, used by every layer."""

    w_down: Tensor  # (h*b, t_k)
    w_up: Tensor    # (b*h, t_k)
    h: int
    b: int

    def __post_init__(self) -> None:
        if self.b >= self.h:
            raise ConfigurationError(f"bottleneck b={self.b} must be smaller than h={self.h}")
        if self.w_down.shape[0] != self.h * self.b or self.w_up.shape[0] != self.b * self.h:
            raise ConfigurationError(
                f"generator weight shapes {self.w_down.shape}/{self.w_up.shape} "
                f"inconsistent with h={self.h}, b={self.b}"
            )


@dataclass
class GeneratedExpert:
    down: Tensor  # (h, b)
    up: Tensor    # (b, h)


@dataclass
class HyperComponents:
    """Everything the HyperExpert pipeline needs, bundled for one model."""

    tables: EmbeddingTables
    mlp: SelectionMlp
    projector: Projector
    hn: HyperNetParams
    condition_on: str = "unselected"


def unselected_mask(decision: GateDecision) -> Tensor:
    """Complement of the routing mask: 1 where an expert was NOT selected."""
    return Tensor(1.0 - decision.binary_mask)


def selection_embedding(mask_hat: Tensor, tables: EmbeddingTables, mlp: SelectionMlp) -> Tensor:
    """Mean of the masked expert embeddings per token, pushed through the MLP."""
    counts = mask_hat.data.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise DegenerateSelectionError(
            "a token has no unselected expert to aggregate; configure top_k < n_experts"
        )
    weights = Tensor(mask_hat.data / counts)
    aggregate = weights @ tables.expert
    return mlp(aggregate)


def combine_embeddings(
    p: Tensor, layer_index: int, tables: EmbeddingTables, proj: Projector
) -> Tensor:
    """Concat the selection embedding with the layer embedding and project."""
    n_layers = tables.layer.shape[0]
    if not 0 <= layer_index < n_layers:
        raise IndexError(f"layer_index {layer_index} out of range [0, {n_layers})")
    l_rows = T.gather_rows(tables.layer, np.full(p.shape[0], layer_index))
    return proj(T.concat([p, l_rows], axis=-1))


def generate_hyperexpert(k: Tensor, hn: HyperNetParams) -> GeneratedExpert:
    """Generate one bottleneck expert from a single (1, t_k) embedding."""
    if k.shape[-1] != hn.w_down.shape[1]:
        raise DimensionError(f"embedding width {k.shape} does not match t_k={hn.w_down.shape[1]}")
    down = T.reshape(k @ T.transpose_last2(hn.w_down), (hn.h, hn.b))
    up = T.reshape(k @ T.transpose_last2(hn.w_up), (hn.b, hn.h))
    return GeneratedExpert(down, up)


def hyperexpert_forward(x: Tensor, gen: GeneratedExpert) -> Tensor:
    """Bottleneck expert forward: relu(x D) U."""
    if x.shape[-1] != gen.down.shape[0]:
        raise DimensionError(f"hyperexpert_forward: x {x.shape} vs D {gen.down.shape}")
    return T.relu(x @ gen.down) @ gen.up


def _batched_hyperexpert(x: Tensor, k_all: Tensor, hn: HyperNetParams) -> Tensor:
    """Generate and apply a distinct bottleneck expert for every token at once."""
    n_tokens = x.shape[0]
    down = T.reshape(k_all @ T.transpose_last2(hn.w_down), (n_tokens, hn.h, hn.b))
    up = T.reshape(k_all @ T.transpose_last2(hn.w_up), (n_tokens, hn.b, hn.h))
    hidden = T.relu(T.reshape(x, (n_tokens, 1, hn.h)) @ down)
    return T.reshape(hidden @ up, (n_tokens, hn.h))


def conditioning_mask(decision: GateDecision, condition_on: str) -> Tensor:
    if condition_on == "unselected":
        return unselected_mask(decision)
    if condition_on == "selected":
        return Tensor(decision.binary_mask.copy())
    raise ConfigurationError(f"condition_on must be 'selected' or 'unselected', got {condition_on!r}")


def hypermoe_forward(
    x: Tensor,
    bank: ExpertBank,
    decision: GateDecision,
    hyper: HyperComponents,
    layer_index: int,
) -> Tensor:
    """Routed MoE output plus the per-token generated HyperExpert, unscaled."""
    base = moe_forward(x, bank, decision)
    mask = conditioning_mask(decision, hyper.condition_on)
    p = selection_embedding(mask, hyper.tables, hyper.mlp)
    k_all = combine_embeddings(p, layer_index, hyper.tables, hyper.projector)
    return base + _batched_hyperexpert(x, k_all, hyper.hn)


def param_count_report(cfg: ModelConfig) -> dict:
    """Parameter counts per component, from the configured dimensions.

    The generator count does not depend on the layer count; adding a layer
    costs exactly one extra layer-embedding row (t' parameters) on the
    HyperExpert side.
    """
    hidden = cfg.t  # selection MLP hidden width defaults to t
    counts = {
        "gate_per_layer": 2 * cfg.h * cfg.n_experts,
        "experts_per_layer": cfg.n_experts * (cfg.h * cfg.d_ff + cfg.d_ff * cfg.h),
        "moe_layer": cfg.n_experts * 2 * cfg.h * cfg.d_ff + 2 * cfg.h * cfg.n_experts,
        "hypernetwork": (cfg.h * cfg.b + cfg.b * cfg.h) * cfg.t_k,
        "expert_embeddings": cfg.n_experts * cfg.t_prime,
        "layer_embeddings": cfg.n_layers * cfg.t_prime,
        "selection_mlp": cfg.t_prime * hidden + hidden + hidden * cfg.t + cfg.t,
        "projector": (cfg.t + cfg.t_prime) * cfg.t_k + cfg.t_k,
    }
    counts["hyperexpert_total"] = (
        counts["hypernetwork"]
        + counts["expert_embeddings"]
        + counts["layer_embeddings"]
        + counts["selection_mlp"]
        + counts["projector"]
    )
    counts["per_layer_hyperexpert_increment"] = cfg.t_prime
    return counts
