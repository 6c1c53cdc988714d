"""A tiny pre-norm transformer whose FFN slot is dense, MoE, MoE-Share, or HyperMoE.

Parameters are initialized from per-name seeded streams, so models of
different layer kinds built from the same seed share identical values for
their common parameters. One hypernetwork instance serves all layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .conv import ConvPipeline, compress_expert_weights, default_pipeline_spec
from .errors import ConfigurationError
from .hyper import (
    EmbeddingTables,
    HyperComponents,
    HyperNetParams,
    Projector,
    SelectionMlp,
    hypermoe_forward,
)
from .moe import (
    ExpertBank,
    GateConfig,
    GateDecision,
    SharedMlp,
    expert_forward,
    load_balance_loss,
    moe_forward,
    moe_share_forward,
    noisy_topk_gate,
)
from .tasks import SyntheticTask, build_task
from .tensor import Rng, Tensor


def sinusoidal_positions(seq_len: int, h: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    dim = np.arange(h)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / h)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


@dataclass
class ForwardResult:
    outputs: Tensor                    # (B, C) logits or (B, 1) regression output
    aux_losses: list[Tensor]           # per MoE layer
    decisions: list[GateDecision]      # per MoE layer


class Model:
    """Parameter registry plus the forward pass for the configured layer kind."""

    def __init__(self, cfg: ModelConfig, rng: Rng, task: SyntheticTask | None = None) -> None:
        self.cfg = cfg
        self.task = task if task is not None else build_task(cfg)
        self.params: dict[str, Tensor] = {}
        self._rng = rng
        self._build()

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape: tuple[int, ...], std: float) -> Tensor:
        """New parameter drawn from a stream keyed by (seed, name)."""
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name}")
        stream = self._rng.spawn(name)
        data = stream.gaussian(*shape, std=std) if std > 0 else np.zeros(shape)
        p = Tensor(data, requires_grad=True)
        self.params[name] = p
        return p

    def _build(self) -> None:
        cfg = self.cfg
        h = cfg.h
        self.positions = Tensor(sinusoidal_positions(self.task.seq_len, h))
        self.embed = self._param("embed", (self.task.vocab_size, h), 0.02)
        if self.task.kind == "regression":
            self.scalar_w = self._param("scalar_in.w", (1, h), 1.0)
            self.scalar_b = self._param("scalar_in.b", (h,), 0.0)
        self.blocks = [self._build_block(i) for i in range(cfg.n_layers)]
        self.ln_f = (self._param("ln_f.g", (h,), 0.0), self._param("ln_f.b", (h,), 0.0))
        self.params["ln_f.g"].data[:] = 1.0
        out_dim = self.task.num_classes if self.task.kind == "classification" else 1
        self.head_w = self._param("head.w", (h, out_dim), 1.0 / np.sqrt(h))
        self.head_b = self._param("head.b", (out_dim,), 0.0)
        if cfg.layer_kind == "hypermoe":
            self._build_hyper()
        if cfg.layer_kind == "hypermoe" and cfg.embedding_source == "compressed":
            spec = default_pipeline_spec(cfg.d_ff, h, cfg.t_prime)
            self.conv_pipeline = ConvPipeline(spec, (2, cfg.d_ff, h), self._rng.spawn("conv"))
        else:
            self.conv_pipeline = None

    def _build_block(self, i: int) -> dict:
        cfg = self.cfg
        h, d_ff = cfg.h, cfg.d_ff
        inv_h, inv_ff = 1.0 / np.sqrt(h), 1.0 / np.sqrt(d_ff)
        blk = {
            "ln1": (self._param(f"l{i}.ln1.g", (h,), 0.0), self._param(f"l{i}.ln1.b", (h,), 0.0)),
            "wq": self._param(f"l{i}.attn.wq", (h, h), inv_h),
            "wk": self._param(f"l{i}.attn.wk", (h, h), inv_h),
            "wv": self._param(f"l{i}.attn.wv", (h, h), inv_h),
            "wo": self._param(f"l{i}.attn.wo", (h, h), inv_h),
            "ln2": (self._param(f"l{i}.ln2.g", (h,), 0.0), self._param(f"l{i}.ln2.b", (h,), 0.0)),
        }
        self.params[f"l{i}.ln1.g"].data[:] = 1.0
        self.params[f"l{i}.ln2.g"].data[:] = 1.0
        if cfg.layer_kind == "dense":
            blk["ffn"] = (
                self._param(f"l{i}.ffn.w1", (h, d_ff), inv_h),
                self._param(f"l{i}.ffn.w2", (d_ff, h), inv_ff),
            )
        else:
            blk["gate"] = GateConfig(
                cfg.n_experts,
                cfg.top_k,
                cfg.noise_enabled,
                self._param(f"l{i}.gate.wg", (h, cfg.n_experts), inv_h),
                self._param(f"l{i}.gate.wnoise", (h, cfg.n_experts), inv_h),
                renormalize=cfg.renormalize_gate,
            )
            blk["bank"] = ExpertBank(
                [self._param(f"l{i}.expert{e}.w1", (h, d_ff), inv_h) for e in range(cfg.n_experts)],
                [self._param(f"l{i}.expert{e}.w2", (d_ff, h), inv_ff) for e in range(cfg.n_experts)],
            )
            if cfg.layer_kind == "moe_share":
                blk["shared"] = SharedMlp(
                    self._param(f"l{i}.shared.w1", (h, d_ff), inv_h),
                    self._param(f"l{i}.shared.w2", (d_ff, h), inv_ff),
                )
        return blk

    def _build_hyper(self) -> None:
        cfg = self.cfg
        gen_std = 0.02 / cfg.t_k**0.25   # variance 0.02^2 / sqrt(t_k): near-zero experts at step 0
        self.hyper = HyperComponents(
            tables=EmbeddingTables(
                self._param("hyper.experts", (cfg.n_experts, cfg.t_prime), 0.02),
                self._param("hyper.layers", (cfg.n_layers, cfg.t_prime), 0.02),
            ),
            mlp=SelectionMlp(
                self._param("hyper.mlp.w1", (cfg.t_prime, cfg.t), 1.0 / np.sqrt(cfg.t_prime)),
                self._param("hyper.mlp.b1", (cfg.t,), 0.0),
                self._param("hyper.mlp.w2", (cfg.t, cfg.t), 1.0 / np.sqrt(cfg.t)),
                self._param("hyper.mlp.b2", (cfg.t,), 0.0),
            ),
            projector=Projector(
                self._param("hyper.proj.w", (cfg.t + cfg.t_prime, cfg.t_k), 1.0 / np.sqrt(cfg.t + cfg.t_prime)),
                self._param("hyper.proj.b", (cfg.t_k,), 0.0),
            ),
            hn=HyperNetParams(
                self._param("hyper.w_down", (cfg.h * cfg.b, cfg.t_k), gen_std),
                self._param("hyper.w_up", (cfg.b * cfg.h, cfg.t_k), gen_std),
                cfg.h,
                cfg.b,
            ),
            condition_on=cfg.condition_on,
        )

    # -- forward ------------------------------------------------------------

    def _embed_inputs(self, inputs) -> Tensor:
        """Token (and scalar) inputs to a (B, S, h) tensor with positions added."""
        if self.task.kind == "classification":
            x = T.gather_rows(self.embed, np.asarray(inputs))
        else:
            ids, xs = inputs
            prefix = T.gather_rows(self.embed, np.asarray(ids)[:, None])
            scalars = Tensor(np.asarray(xs, dtype=np.float64)[:, None])
            lifted = scalars @ self.scalar_w + self.scalar_b
            x = T.concat([prefix, T.reshape(lifted, (len(xs), 1, self.cfg.h))], axis=1)
        return x + self.positions

    def _attention(self, blk: dict, x: Tensor) -> Tensor:
        q, k, v = x @ blk["wq"], x @ blk["wk"], x @ blk["wv"]
        scores = (q @ T.transpose_last2(k)) * (1.0 / np.sqrt(self.cfg.h))
        return (T.softmax(scores) @ v) @ blk["wo"]

    def _ffn_slot(
        self,
        layer_index: int,
        x_tokens: Tensor,
        training: bool,
        noise_rng: Rng | None,
        aux: list[Tensor],
        decisions: list[GateDecision],
    ) -> Tensor:
        cfg = self.cfg
        blk = self.blocks[layer_index]
        if cfg.layer_kind == "dense":
            return expert_forward(x_tokens, blk["ffn"])
        decision = noisy_topk_gate(x_tokens, blk["gate"], rng=noise_rng, training=training)
        decisions.append(decision)
        aux.append(load_balance_loss(decision))
        if cfg.layer_kind == "moe":
            return moe_forward(x_tokens, blk["bank"], decision)
        if cfg.layer_kind == "moe_share":
            return moe_share_forward(x_tokens, blk["bank"], blk["shared"], decision)
        hyper = self.hyper
        if cfg.embedding_source == "compressed":
            hyper = HyperComponents(
                EmbeddingTables(self._compressed_embeddings(layer_index), hyper.tables.layer),
                hyper.mlp,
                hyper.projector,
                hyper.hn,
                hyper.condition_on,
            )
        return hypermoe_forward(x_tokens, blk["bank"], decision, hyper, layer_index)

    def _compressed_embeddings(self, layer_index: int) -> Tensor:
        """Per-layer expert embeddings from compressed expert weights, gradient-free."""
        bank = self.blocks[layer_index]["bank"]
        frozen = ExpertBank(
            [Tensor(w.data) for w in bank.w1], [Tensor(w.data) for w in bank.w2]
        )
        return compress_expert_weights(frozen, self.conv_pipeline)

    def forward(self, inputs, training: bool = False, noise_rng: Rng | None = None) -> ForwardResult:
        cfg = self.cfg
        x = self._embed_inputs(inputs)
        batch, seq = x.shape[0], x.shape[1]
        aux: list[Tensor] = []
        decisions: list[GateDecision] = []
        for i, blk in enumerate(self.blocks):
            x = x + self._attention(blk, T.layer_norm(x, *blk["ln1"]))
            xn = T.layer_norm(x, *blk["ln2"])
            tokens = T.reshape(xn, (batch * seq, cfg.h))
            slot = self._ffn_slot(i, tokens, training, noise_rng, aux, decisions)
            x = x + T.reshape(slot, (batch, seq, cfg.h))
        x = T.layer_norm(x, *self.ln_f)
        last = T.slice_view(x, (slice(None), seq - 1, slice(None)))
        return ForwardResult(last @ self.head_w + self.head_b, aux, decisions)

    # -- bookkeeping ---------------------------------------------------------

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def total_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameter_census(self) -> dict[str, int]:
        return {name: p.size for name, p in self.params.items()}


def build_model(cfg: ModelConfig, rng: Rng | None = None, task: SyntheticTask | None = None) -> Model:
    return Model(cfg, rng if rng is not None else Rng(cfg.seed), task)
