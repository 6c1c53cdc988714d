"""Depthwise-separable convolution pipeline that compresses expert weights.

Each expert's (W1, W2) pair is stacked into a 2-channel image and pushed
through a chain of depthwise convolutions, pointwise convolutions, and
average pooling down to a 1x1 spatial extent, yielding one embedding row per
expert. Convolutions are unpadded; output extents use floor division.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .moe import ExpertBank
from .tensor import Rng, Tensor


@dataclass
class Stage:
    kind: str                      # depthwise | pointwise | avg_pool
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    in_channels: int = 0           # pointwise only
    out_channels: int = 0          # pointwise only

    @classmethod
    def depthwise(cls, kh: int, kw: int, sh: int, sw: int) -> "Stage":
        return cls("depthwise", (kh, kw), (sh, sw))

    @classmethod
    def pointwise(cls, in_ch: int, out_ch: int) -> "Stage":
        return cls("pointwise", in_channels=in_ch, out_channels=out_ch)

    @classmethod
    def avg_pool(cls, ph: int, pw: int, sh: int | None = None, sw: int | None = None) -> "Stage":
        return cls("avg_pool", (ph, pw), (sh or ph, sw or pw))

    def to_dict(self) -> dict:
        if self.kind == "pointwise":
            return {"type": "pointwise", "in_channels": self.in_channels, "out_channels": self.out_channels}
        return {"type": self.kind, "kernel": list(self.kernel), "stride": list(self.stride)}

    @classmethod
    def from_dict(cls, d: dict) -> "Stage":
        kind = d.get("type")
        if kind == "pointwise":
            return cls.pointwise(d["in_channels"], d["out_channels"])
        if kind in ("depthwise", "avg_pool"):
            kh, kw = d["kernel"]
            sh, sw = d.get("stride", d["kernel"])
            return cls(kind, (kh, kw), (sh, sw))
        raise ConfigurationError(f"unknown conv stage type {kind!r}")


@dataclass
class ConvPipelineSpec:
    stages: list[Stage]
    out_dim: int

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages], "out_dim": self.out_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvPipelineSpec":
        return cls([Stage.from_dict(s) for s in d["stages"]], d["out_dim"])


def stage_output_shape(stage: Stage, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    c, h, w = shape
    if stage.kind == "pointwise":
        if stage.in_channels != c:
            raise DimensionError(f"pointwise stage expects {stage.in_channels} channels, input has {c}")
        return (stage.out_channels, h, w)
    kh, kw = stage.kernel
    sh, sw = stage.stride
    if kh > h or kw > w:
        raise DimensionError(f"kernel {stage.kernel} larger than input extent {(h, w)}")
    return (c, (h - kh) // sh + 1, (w - kw) // sw + 1)


def shape_chain(spec: ConvPipelineSpec, in_shape: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Input shape of every stage plus the final output shape."""
    shapes = [in_shape]
    for stage in spec.stages:
        shapes.append(stage_output_shape(stage, shapes[-1]))
    final = shapes[-1]
    if final[1:] != (1, 1):
        raise ConfigurationError(f"pipeline must end at a 1x1 spatial extent, got {final}")
    if final[0] != spec.out_dim:
        raise ConfigurationError(f"pipeline emits {final[0]} channels, spec declares out_dim={spec.out_dim}")
    return shapes


def reference_pipeline_spec() -> ConvPipelineSpec:
    """The reference pipeline for 2x3072x768 stacked expert weights -> 128 dims."""
    return ConvPipelineSpec(
        stages=[
            Stage.depthwise(5, 5, 5, 5),
            Stage.pointwise(2, 32),
            Stage.avg_pool(16, 6),
            Stage.depthwise(3, 3, 3, 3),
            Stage.pointwise(32, 128),
            Stage.avg_pool(8, 8),
        ],
        out_dim=128,
    )


def default_pipeline_spec(d_ff: int, h: int, out_dim: int) -> ConvPipelineSpec:
    """Desk-scale pipeline for a 2 x d_ff x h stacked pair ending at out_dim x 1 x 1."""
    kh, kw = min(3, d_ff), min(3, h)
    stages = [Stage.depthwise(kh, kw, kh, kw), Stage.pointwise(2, out_dim)]
    rh, rw = (d_ff - kh) // kh + 1, (h - kw) // kw + 1
    stages.append(Stage.avg_pool(rh, rw))
    return ConvPipelineSpec(stages, out_dim)


class ConvPipeline:
    """A spec plus its (frozen, randomly initialized) stage weights."""

    def __init__(self, spec: ConvPipelineSpec, in_shape: tuple[int, int, int], rng: Rng) -> None:
        self.spec = spec
        self.shapes = shape_chain(spec, in_shape)
        self.weights: list[Tensor | None] = []
        for stage, shape in zip(spec.stages, self.shapes):
            c = shape[0]
            if stage.kind == "depthwise":
                kh, kw = stage.kernel
                self.weights.append(Tensor(rng.gaussian(c, kh, kw, std=1.0 / (kh * kw))))
            elif stage.kind == "pointwise":
                self.weights.append(
                    Tensor(rng.gaussian(stage.in_channels, stage.out_channels, std=1.0 / np.sqrt(c)))
                )
            else:
                self.weights.append(None)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape != self.shapes[0]:
            raise DimensionError(f"pipeline built for input {self.shapes[0]}, got {x.shape}")
        for stage, w in zip(self.spec.stages, self.weights):
            x = conv_stage_forward(x, stage, w)
        return x


def conv_stage_forward(x: Tensor, stage: Stage, weight: Tensor | None = None) -> Tensor:
    out_shape = stage_output_shape(stage, x.shape)  # validates shapes
    if stage.kind == "pointwise":
        if weight is None:
            raise ConfigurationError("pointwise stage requires a weight")
        c, h, w = x.shape
        flat = T.reshape(x, (c, h * w))
        return T.reshape(T.transpose_last2(weight) @ flat, out_shape)
    if stage.kind == "depthwise":
        if weight is None:
            raise ConfigurationError("depthwise stage requires a kernel")
        return _window_accumulate(x, stage, out_shape, weight)
    if stage.kind == "avg_pool":
        ph, pw = stage.kernel
        return _window_accumulate(x, stage, out_shape) * (1.0 / (ph * pw))
    raise ConfigurationError(f"unknown stage kind {stage.kind!r}")


def _window_accumulate(
    x: Tensor, stage: Stage, out_shape: tuple[int, int, int], kernel: Tensor | None = None
) -> Tensor:
    """Sum of (optionally kernel-weighted) strided slices over kernel offsets."""
    kh, kw = stage.kernel
    sh, sw = stage.stride
    _, oh, ow = out_shape
    acc = None
    for u in range(kh):
        for v in range(kw):
            sl = T.slice_view(
                x, (slice(None), slice(u, u + sh * (oh - 1) + 1, sh), slice(v, v + sw * (ow - 1) + 1, sw))
            )
            if kernel is not None:
                kval = T.reshape(
                    T.slice_view(kernel, (slice(None), slice(u, u + 1), slice(v, v + 1))),
                    (x.shape[0], 1, 1),
                )
                sl = sl * kval
            acc = sl if acc is None else acc + sl
    return acc


def stack_expert_weights(w1: Tensor, w2: Tensor) -> Tensor:
    """Stack one expert's pair as a 2-channel image: [W1^T; W2], each d_ff x h."""
    d_ff, h = w2.shape
    ch0 = T.reshape(T.transpose_last2(w1), (1, d_ff, h))
    ch1 = T.reshape(w2, (1, d_ff, h))
    return T.concat([ch0, ch1], axis=0)


def compress_expert_weights(bank: ExpertBank, pipeline: ConvPipeline) -> Tensor:
    """One embedding row per expert: stack, convolve, flatten the 1x1 result."""
    rows = []
    for w1, w2 in zip(bank.w1, bank.w2):
        img = stack_expert_weights(w1, w2)
        out = pipeline.forward(img)
        rows.append(T.reshape(out, (1, pipeline.spec.out_dim)))
    return T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
