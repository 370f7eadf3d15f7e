"""Meta-token injection into multi-resolution visual stage features.

Audio and visual meta-tokens distilled from a single high-level layer are
linearly aligned to each stage's channel width, then written into that
stage's visual tokens by dot-product attention over the meta-tokens followed
by a residual add. Cross-modal (audio) injection and intra-modal (visual)
injection run sequentially in a configurable order; beyond the alignment
layers the injection itself has no parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backbone import BackboneConfig
from .tensorcore import Rng, ShapeError, Tensor, add, linear, matmul, scale, softmax_rows
from .tensorcore.engine import active_graph, default_dtype
from .tensorcore.shaping import swap_last


@dataclass(frozen=True)
class MtiConfig:
    order: str = "cross_first"            # or "intra_first"
    stages: tuple[int, ...] = (0, 1, 2, 3)
    enable_cross: bool = True
    enable_intra: bool = True
    source_stage: int = 4                 # 1-based stage whose final layer feeds LCD

    def __post_init__(self):
        if self.order not in ("cross_first", "intra_first"):
            raise ValueError(f"order must be cross_first or intra_first, got {self.order!r}")
        if not (self.enable_cross or self.enable_intra):
            raise ValueError("MTI needs at least one of cross/intra injection enabled")
        if self.source_stage < 1:
            raise ValueError("source_stage is 1-based, bottom stage = 1")

    def source_layer(self, backbone: BackboneConfig) -> int:
        if self.source_stage > backbone.stages:
            raise ValueError(f"source_stage {self.source_stage} exceeds "
                             f"{backbone.stages} stages")
        return sum(backbone.layers_per_stage[:self.source_stage]) - 1


class MtiParams:
    """Per-stage alignment maps from the common meta width to stage channels."""

    def __init__(self, backbone: BackboneConfig, common_dim: int, rng: Rng,
                 name: str = "mti"):
        self.name = name
        self.params: dict[str, Tensor] = {}
        dt = default_dtype()
        for s in range(backbone.stages):
            d = backbone.dim(s)
            for mod in ("a", "v"):
                # zero-init: aligned meta-tokens start at 0, so injection is
                # the identity until the distilled tokens earn their way in
                self.params[f"{name}.s{s}.align_{mod}_w"] = Tensor(
                    np.zeros((common_dim, d), dtype=dt), tag="adaptation",
                    requires_grad=True)
                self.params[f"{name}.s{s}.align_{mod}_b"] = Tensor(
                    np.zeros(d, dtype=dt), tag="adaptation", requires_grad=True)

    def alignment(self, stage: int, mod: str) -> tuple[Tensor, Tensor]:
        return (self.params[f"{self.name}.s{stage}.align_{mod}_w"],
                self.params[f"{self.name}.s{stage}.align_{mod}_b"])

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def replace_param(self, name: str, t: Tensor) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = t


def align(m: Tensor, align_w: Tensor, align_b: Tensor) -> Tensor:
    """Map meta-tokens (..., K, d) to a stage's channel width."""
    if m.shape[-1] != align_w.shape[0]:
        raise ShapeError(f"align: meta dim {m.shape} does not match map {align_w.shape}")
    return linear(m, align_w, align_b)


def inject(v: Tensor, m: Tensor, scale_logits: bool = False) -> Tensor:
    """v + Softmax(v m^T) m with the softmax over the K meta-tokens."""
    if v.shape[-1] != m.shape[-1]:
        raise ShapeError(f"inject: channel dims disagree: {v.shape} vs {m.shape}")
    if m.shape[-2] < 1:
        raise ShapeError("inject: need at least one meta-token")
    logits = matmul(v, swap_last(m))
    if scale_logits:
        logits = scale(logits, 1.0 / math.sqrt(v.shape[-1]))
    return add(v, matmul(softmax_rows(logits), m))


def mti_forward(stage_features: Sequence[Tensor], m_a: Optional[Tensor],
                m_v: Optional[Tensor], config: MtiConfig, params: MtiParams,
                scale_logits: bool = False) -> list[Tensor]:
    """Inject aligned meta-tokens into the selected stages' visual tokens.

    Meta-tokens are per-timestamp (leading axes of m_a/m_v must match the
    stage features); disabled branches are skipped entirely and unselected
    stages pass through unchanged.
    """
    if config.enable_cross and m_a is None:
        raise ValueError("cross-modal injection enabled but no audio meta-tokens given")
    if config.enable_intra and m_v is None:
        raise ValueError("intra-modal injection enabled but no visual meta-tokens given")
    g = active_graph()

    def run() -> list[Tensor]:
        out: list[Tensor] = []
        for s, v in enumerate(stage_features):
            if s not in config.stages:
                out.append(v)
                continue
            steps = []
            if config.enable_cross:
                wa, ba = params.alignment(s, "a")
                steps.append(("cross", align(m_a, wa, ba)))
            if config.enable_intra:
                wv, bv = params.alignment(s, "v")
                steps.append(("intra", align(m_v, wv, bv)))
            if config.order == "intra_first":
                steps.reverse()
            for _, aligned in steps:
                v = inject(v, aligned, scale_logits=scale_logits)
            out.append(v)
        return out

    if g is not None:
        with g.tag("adaptation"):
            return run()
    return run()
