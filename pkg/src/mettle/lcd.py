"""Layer-centric distillation of frozen layer tokens into meta-tokens.

A small bank of learnable meta-tokens per tapped layer queries that layer's
frozen tokens through cross-attention (the task-specific pathway); the
attention output replaces the query. A parallel linear reduction of the raw
tokens (the knowledge-preserving pathway) is then added. The step can be
iterated R times, each refined bank feeding the next query. Per-layer results
are projected to a common width and average-pooled across layers and tokens
into one vector per timestamp and modality.

Both pathways can be toggled for ablation, and the linear reduction can be
swapped for parameter-free column-average pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .backbone import BackboneConfig, LayerFeatures, ModalityInput
from .tensorcore import (
    Rng,
    ShapeError,
    Tensor,
    add,
    linear,
    matmul,
    ones,
    reduce_mean,
    reshape,
    scale,
    softmax_rows,
)
from .tensorcore.engine import active_graph, default_dtype
from .tensorcore.shaping import merge_heads, split_heads, swap_last, tile_leading


@dataclass(frozen=True)
class LcdConfig:
    k_a: int = 1
    k_v: int = 1
    r_a: int = 1
    r_v: int = 1
    heads: int = 1
    scale_logits: bool = True
    common_dim: int = 64
    share_step_weights: bool = True
    layers: str = "all"                       # "all" | "final"
    per_stage_k: Optional[tuple[int, ...]] = None
    dp_mode: str = "linear"                   # "linear" | "avgpool"
    enable_ts: bool = True
    enable_dp: bool = True

    def __post_init__(self):
        if self.k_a < 1 or self.k_v < 1:
            raise ValueError("meta-token counts must be >= 1")
        if self.r_a < 1 or self.r_v < 1:
            raise ValueError("distillation steps must be >= 1")
        if self.layers not in ("all", "final"):
            raise ValueError(f"layers must be 'all' or 'final', got {self.layers!r}")
        if self.dp_mode not in ("linear", "avgpool"):
            raise ValueError(f"dp_mode must be 'linear' or 'avgpool', got {self.dp_mode!r}")
        if self.per_stage_k is not None and any(k < 1 for k in self.per_stage_k):
            raise ValueError("per-stage meta-token counts must be >= 1")

    def k_for(self, modality: str) -> int:
        return self.k_a if modality == "audio" else self.k_v

    def r_for(self, modality: str) -> int:
        return self.r_a if modality == "audio" else self.r_v

    def k_at_stage(self, modality: str, stage: int) -> int:
        if self.per_stage_k is not None:
            return self.per_stage_k[stage]
        return self.k_for(modality)


@dataclass
class StepParams:
    """Weights of one distillation step for one layer."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wg: Tensor


@dataclass
class AggregatedTokens:
    """Per-timestamp pooled meta-tokens: rows follow timestamps 1..T."""

    v_bar: Tensor
    a_bar: Tensor


def distill_step(m: Tensor, tokens: Tensor, params: StepParams, heads: int = 1,
                 scale_logits: bool = True, enable_ts: bool = True,
                 enable_dp: bool = True, dp_mode: str = "linear") -> Tensor:
    """One distillation update of the meta-tokens from one layer's tokens.

    m is (K, D) or (..., K, D); tokens is (N, D) or (..., N, D) with matching
    leading axes (frozen tokens may be batched over timestamps/samples while
    m stays shared). The attention output replaces m before the linear
    reduction of the raw tokens is added.
    """
    d = m.shape[-1]
    if tokens.shape[-1] != d:
        raise ShapeError(f"distill_step: channel dims disagree: meta {m.shape} "
                         f"vs tokens {tokens.shape}")
    k = m.shape[-2]
    n = tokens.shape[-2]
    if enable_dp and dp_mode == "linear":
        if params.wg.shape != (k, n):
            raise ShapeError(f"distill_step: reduction weight {params.wg.shape} "
                             f"does not match K={k}, N={n}")
    if d % heads:
        raise ShapeError(f"distill_step: dim {d} not divisible by heads {heads}")

    lead = tokens.shape[:-2]
    out = None
    if enable_ts:
        q = matmul(m, params.wq)
        ks = matmul(tokens, params.wk)
        vs = matmul(tokens, params.wv)
        if heads > 1:
            q, ks, vs = split_heads(q, heads), split_heads(ks, heads), split_heads(vs, heads)
        logits = matmul(q, swap_last(ks))
        if scale_logits:
            logits = scale(logits, 1.0 / math.sqrt(d // heads))
        attn = matmul(softmax_rows(logits), vs)
        out = merge_heads(attn) if heads > 1 else attn
    if enable_dp:
        if dp_mode == "linear":
            dp = matmul(params.wg, tokens)
        else:
            col_mean = reduce_mean(tokens, axes=(-2,))
            col_mean = reshape(col_mean, tuple(lead) + (1, d))
            dp = matmul(ones((k, 1)), col_mean)
        out = dp if out is None else add(out, dp)
    if out is None:
        out = m
    # broadcast the unbatched query across the token batch when only one
    # pathway produced a batched result
    if out.ndim < tokens.ndim and lead:
        out = tile_leading(out, int(np.prod(lead)))
        out = reshape(out, tuple(lead) + (k, d))
    return out


def distill(m: Tensor, tokens: Tensor, steps: Sequence[StepParams], r: int,
            heads: int = 1, scale_logits: bool = True, enable_ts: bool = True,
            enable_dp: bool = True, dp_mode: str = "linear") -> Tensor:
    """R-step distillation; step outputs feed the next step's query."""
    if r < 1:
        raise ValueError("distillation needs r >= 1")
    cur = m
    for i in range(r):
        params = steps[0] if len(steps) == 1 else steps[i]
        cur = distill_step(cur, tokens, params, heads=heads, scale_logits=scale_logits,
                           enable_ts=enable_ts, enable_dp=enable_dp, dp_mode=dp_mode)
    return cur


def aggregate(metas: Sequence[Tensor], projections: Sequence[tuple[Tensor, Tensor]]
              ) -> Tensor:
    """Project each layer's meta-tokens to the common width, then average
    over layers and tokens (parameter-free pooling)."""
    if not metas:
        raise ShapeError("aggregate: empty layer set")
    if len(metas) != len(projections):
        raise ShapeError(f"aggregate: {len(metas)} meta sets vs "
                         f"{len(projections)} projections")
    total = None
    for mt, (w, b) in zip(metas, projections):
        pooled = reduce_mean(linear(mt, w, b), axes=(-2,))
        total = pooled if total is None else add(total, pooled)
    out = scale(total, 1.0 / len(metas))
    return reshape(out, (1,) + out.shape) if out.ndim == 1 else out


class MetaTokenBank:
    """Learnable meta-tokens and distillation weights for one modality."""

    def __init__(self, name: str, lcd: LcdConfig, backbone: BackboneConfig,
                 modality_name: str, rng: Rng,
                 tapped_layers: Optional[Sequence[int]] = None):
        if modality_name not in ("visual", "audio"):
            raise ValueError(f"unknown modality {modality_name!r}")
        self.name = name
        self.lcd = lcd
        self.modality_name = modality_name
        modality = backbone.audio if modality_name == "audio" else backbone.visual
        if tapped_layers is None:
            if lcd.layers == "all":
                tapped_layers = list(range(backbone.num_layers))
            else:
                tapped_layers = [backbone.num_layers - 1]
        self.tapped_layers = list(tapped_layers)
        self.steps_per_layer = 1 if lcd.share_step_weights else lcd.r_for(self.modality_name)
        self.params: dict[str, Tensor] = {}
        dt = default_dtype()
        for l in self.tapped_layers:
            stage = backbone.stage_of_layer(l)
            d = backbone.dim(stage)
            n = backbone.tokens_at(modality, stage)
            k = lcd.k_at_stage(self.modality_name, stage)
            r = rng.derive(f"{name}/layer{l}")
            self.params[f"{name}.l{l}.m"] = Tensor(
                r.derive("m").normal((k, d), std=0.02), tag="adaptation",
                requires_grad=True)
            for s in range(self.steps_per_layer):
                rs = r.derive(f"step{s}")
                for wname, shape in (("wq", (d, d)), ("wk", (d, d)), ("wv", (d, d)),
                                     ("wg", (k, n))):
                    self.params[f"{name}.l{l}.s{s}.{wname}"] = Tensor(
                        rs.derive(wname).xavier_uniform(shape), tag="adaptation",
                        requires_grad=True)
            self.params[f"{name}.l{l}.proj_w"] = Tensor(
                r.derive("proj_w").xavier_uniform((d, lcd.common_dim)),
                tag="adaptation", requires_grad=True)
            self.params[f"{name}.l{l}.proj_b"] = Tensor(
                np.zeros(lcd.common_dim, dtype=dt), tag="adaptation",
                requires_grad=True)

    def m(self, layer: int) -> Tensor:
        return self.params[f"{self.name}.l{layer}.m"]

    def steps(self, layer: int) -> list[StepParams]:
        return [StepParams(
            wq=self.params[f"{self.name}.l{layer}.s{s}.wq"],
            wk=self.params[f"{self.name}.l{layer}.s{s}.wk"],
            wv=self.params[f"{self.name}.l{layer}.s{s}.wv"],
            wg=self.params[f"{self.name}.l{layer}.s{s}.wg"],
        ) for s in range(self.steps_per_layer)]

    def projection(self, layer: int) -> tuple[Tensor, Tensor]:
        return (self.params[f"{self.name}.l{layer}.proj_w"],
                self.params[f"{self.name}.l{layer}.proj_b"])

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def replace_param(self, name: str, t: Tensor) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = t

    def distill_layer(self, layer: int, tokens: Tensor) -> Tensor:
        r = self.lcd.r_for(self.modality_name)
        return distill(self.m(layer), tokens, self.steps(layer), r,
                       heads=self.lcd.heads, scale_logits=self.lcd.scale_logits,
                       enable_ts=self.lcd.enable_ts, enable_dp=self.lcd.enable_dp,
                       dp_mode=self.lcd.dp_mode)

    def forward(self, features: LayerFeatures) -> Tensor:
        """Distill every tapped layer and pool: (T, N_l, D_l) -> (T, d)."""
        metas = [self.distill_layer(l, features.layers[l]) for l in self.tapped_layers]
        projs = [self.projection(l) for l in self.tapped_layers]
        return aggregate(metas, projs)

    def forward_final(self, features: LayerFeatures) -> Tensor:
        """Distill the single tapped layer, projected but not pooled: (T, K, d)."""
        l = self.tapped_layers[-1]
        mt = self.distill_layer(l, features.layers[l])
        w, b = self.projection(l)
        return linear(mt, w, b)


def lcd_classification_forward(features_v: LayerFeatures, features_a: LayerFeatures,
                               bank_v: MetaTokenBank, bank_a: MetaTokenBank,
                               config: LcdConfig) -> AggregatedTokens:
    """Distill both modalities at every tapped layer and pool across layers."""
    if config.layers != "all":
        raise ValueError("classification distillation taps every layer")
    g = active_graph()
    if g is not None:
        with g.tag("adaptation"):
            return AggregatedTokens(v_bar=bank_v.forward(features_v),
                                    a_bar=bank_a.forward(features_a))
    return AggregatedTokens(v_bar=bank_v.forward(features_v),
                            a_bar=bank_a.forward(features_a))
