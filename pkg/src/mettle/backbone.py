"""Frozen hierarchical transformer towers for the visual and audio streams.

Each tower patch-embeds a 2-D input, then runs pre-norm attention/MLP layers
grouped into stages; between stages 2x2 token neighborhoods are merged and
the channel width doubles. Weights are seeded-random and frozen: the frozen
forward runs without recording, so it contributes zero retained bytes, and
its per-layer outputs are handed to consumers as detached data-tagged leaves.

A bottleneck-adapter variant of the same tower reproduces the conventional
parameter-efficient topology: adapters sit on the residual branch of every
layer, so gradients must travel back through the frozen stack and the tape
retains backbone-internal activations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import io
from .tensorcore import (
    ComputeGraph,
    Rng,
    ShapeError,
    Tensor,
    add,
    gelu,
    layer_norm,
    linear,
    matmul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)
from .tensorcore.engine import active_graph, default_dtype
from .tensorcore.shaping import merge_heads as _merge_heads
from .tensorcore.shaping import split_heads as _split_heads
from .tensorcore.shaping import swap_last as _swap_last


@dataclass(frozen=True)
class ModalityInput:
    height: int
    width: int
    channels: int
    patch: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch


VISUAL_INPUT = ModalityInput(64, 64, 3, 4)
AUDIO_INPUT = ModalityInput(32, 32, 1, 4)


@dataclass(frozen=True)
class BackboneConfig:
    stages: int = 4
    layers_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    base_dim: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    visual: ModalityInput = VISUAL_INPUT
    audio: ModalityInput = AUDIO_INPUT
    shared_weights: bool = False

    def __post_init__(self):
        if len(self.layers_per_stage) != self.stages:
            raise ValueError(f"layers_per_stage {self.layers_per_stage} does not "
                             f"match stages={self.stages}")
        halvings = 2 ** (self.stages - 1)
        for name, m in (("visual", self.visual), ("audio", self.audio)):
            if m.height % m.patch or m.width % m.patch:
                raise ValueError(f"{name}: input {m.height}x{m.width} not divisible "
                                 f"by patch {m.patch}")
            gh, gw = m.grid
            if gh % halvings or gw % halvings:
                raise ValueError(f"{name}: grid {gh}x{gw} not divisible by 2^(stages-1)={halvings}")
        for s in range(self.stages):
            if self.dim(s) % self.heads:
                raise ValueError(f"stage {s}: dim {self.dim(s)} not divisible by "
                                 f"heads={self.heads}")

    def dim(self, stage: int) -> int:
        return self.base_dim * (2 ** stage)

    @property
    def num_layers(self) -> int:
        return sum(self.layers_per_stage)

    def stage_of_layer(self, layer: int) -> int:
        acc = 0
        for s, n in enumerate(self.layers_per_stage):
            acc += n
            if layer < acc:
                return s
        raise ValueError(f"layer {layer} out of range (L={self.num_layers})")

    def grid_at(self, modality: ModalityInput, stage: int) -> tuple[int, int]:
        gh, gw = modality.grid
        return gh // (2 ** stage), gw // (2 ** stage)

    def tokens_at(self, modality: ModalityInput, stage: int) -> int:
        gh, gw = self.grid_at(modality, stage)
        return gh * gw

    def dims_schedule(self) -> list[int]:
        return [self.dim(self.stage_of_layer(l)) for l in range(self.num_layers)]

    def with_depth(self, layers_per_stage) -> "BackboneConfig":
        return replace(self, layers_per_stage=tuple(layers_per_stage),
                       stages=len(layers_per_stage))


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_rank: int = 8

    def __post_init__(self):
        if self.bottleneck_rank < 1:
            raise ValueError("bottleneck_rank must be >= 1")


@dataclass
class LayerFeatures:
    """Per-layer token tensors (T, N_l, D_l) plus per-stage views."""

    layers: list[Tensor]
    stage_ends: list[int]
    grids: list[tuple[int, int]]

    @property
    def stages(self) -> list[Tensor]:
        return [self.layers[i] for i in self.stage_ends]

    def stage_grid(self, stage: int) -> tuple[int, int]:
        return self.grids[self.stage_ends[stage]]


# --- spec-level operations ---------------------------------------------------


def patchify(x: Tensor, patch: int, embed_w: Tensor) -> Tensor:
    """Non-overlapping patch extraction + linear embedding (no bias)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"patchify expects (H,W,C) or (B,H,W,C), got {x.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"input {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    if embed_w.shape[0] != patch * patch * c:
        raise ShapeError(f"embed weight {embed_w.shape} does not match patch "
                         f"volume {patch * patch * c}")
    t = reshape(x, (b, gh, patch, gw, patch, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    t = reshape(t, (b, gh * gw, patch * patch * c))
    out = linear(t, embed_w)
    return reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class LayerParams:
    """Pre-norm attention + MLP parameter set for one encoder layer."""

    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def encoder_layer(x: Tensor, params: LayerParams, heads: int,
                  adapter: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    """x + MHSA(LN(x)), then + MLP(LN(.)) [+ adapter(LN(.)) when given]."""
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by heads {heads}")
    h = layer_norm(x, params.ln1_g, params.ln1_b)
    q = _split_heads(matmul(h, params.wq), heads)
    k = _split_heads(matmul(h, params.wk), heads)
    v = _split_heads(matmul(h, params.wv), heads)
    logits = scale(matmul(q, _swap_last(k)), 1.0 / math.sqrt(d // heads))
    attn = matmul(softmax_rows(logits), v)
    x = add(x, linear(_merge_heads(attn), params.wo, params.bo))
    h2 = layer_norm(x, params.ln2_g, params.ln2_b)
    mlp = linear(gelu(linear(h2, params.w1, params.b1)), params.w2, params.b2)
    x = add(x, mlp)
    if adapter is not None:
        x = add(x, adapter(h2))
    return x


def _merge_tokens(x: Tensor, grid: tuple[int, int], merge_w: Tensor) -> Tensor:
    *lead, n, d = x.shape
    gh, gw = grid
    t = reshape(x, tuple(lead) + (gh // 2, 2, gw // 2, 2, d))
    perm_lead = tuple(range(len(lead)))
    k = len(lead)
    t = transpose(t, perm_lead + (k, k + 2, k + 1, k + 3, k + 4))
    t = reshape(t, tuple(lead) + ((gh // 2) * (gw // 2), 4 * d))
    return linear(t, merge_w)


# --- towers ------------------------------------------------------------------


class Tower:
    """One modality's encoder: patch embed + staged frozen layers."""

    def __init__(self, config: BackboneConfig, modality: ModalityInput, name: str):
        self.config = config
        self.modality = modality
        self.name = name
        self.embed: Optional[Tensor] = None
        self.layers: list[LayerParams] = []
        self.merges: list[Tensor] = []

    def init_params(self, rng: Rng, shared_layers: Optional["Tower"] = None) -> None:
        cfg = self.config
        p = self.modality.patch
        self.embed = Tensor(
            rng.derive(f"{self.name}/embed").xavier_uniform(
                (p * p * self.modality.channels, cfg.base_dim)),
            tag="backbone")
        if shared_layers is not None:
            self.layers = shared_layers.layers
            self.merges = shared_layers.merges
            return
        self.layers = []
        for l in range(cfg.num_layers):
            d = cfg.dim(cfg.stage_of_layer(l))
            r = rng.derive(f"{self.name}/layer{l}")
            hidden = cfg.mlp_ratio * d

            def w(key, shape, rr=r):
                return Tensor(rr.derive(key).xavier_uniform(shape), tag="backbone")

            self.layers.append(LayerParams(
                ln1_g=Tensor(np.ones(d, dtype=default_dtype()), tag="backbone"),
                ln1_b=Tensor(np.zeros(d, dtype=default_dtype()), tag="backbone"),
                wq=w("wq", (d, d)), wk=w("wk", (d, d)), wv=w("wv", (d, d)),
                wo=w("wo", (d, d)),
                bo=Tensor(np.zeros(d, dtype=default_dtype()), tag="backbone"),
                ln2_g=Tensor(np.ones(d, dtype=default_dtype()), tag="backbone"),
                ln2_b=Tensor(np.zeros(d, dtype=default_dtype()), tag="backbone"),
                w1=w("w1", (d, hidden)),
                b1=Tensor(np.zeros(hidden, dtype=default_dtype()), tag="backbone"),
                w2=w("w2", (hidden, d)),
                b2=Tensor(np.zeros(d, dtype=default_dtype()), tag="backbone"),
            ))
        self.merges = []
        for s in range(cfg.stages - 1):
            d = cfg.dim(s)
            self.merges.append(Tensor(
                rng.derive(f"{self.name}/merge{s}").xavier_uniform((4 * d, cfg.dim(s + 1))),
                tag="backbone"))

    def named_params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.embed": self.embed}
        for l, lp in enumerate(self.layers):
            out.update(lp.named(f"{self.name}.layer{l}"))
        for s, m in enumerate(self.merges):
            out[f"{self.name}.merge{s}"] = m
        return out

    def is_frozen(self) -> bool:
        return not any(t.requires_grad for t in self.named_params().values())

    def unfreeze_layer(self, layer: int) -> None:
        """Negative control: make one frozen layer's weights trainable."""
        lp = self.layers[layer]
        thawed = {k: Tensor(v.data, tag="backbone", requires_grad=True)
                  for k, v in vars(lp).items()}
        self.layers[layer] = LayerParams(**thawed)

    def _run_stack(self, x: Tensor,
                   adapter_for: Optional[Callable[[int], Callable]] = None
                   ) -> LayerFeatures:
        cfg = self.config
        tokens = patchify(x, self.modality.patch, self.embed)
        feats: list[Tensor] = []
        grids: list[tuple[int, int]] = []
        stage_ends: list[int] = []
        layer = 0
        for s in range(cfg.stages):
            grid = cfg.grid_at(self.modality, s)
            for _ in range(cfg.layers_per_stage[s]):
                adapter = adapter_for(layer) if adapter_for is not None else None
                tokens = encoder_layer(tokens, self.layers[layer], cfg.heads,
                                       adapter=adapter)
                feats.append(tokens)
                grids.append(grid)
                layer += 1
            stage_ends.append(layer - 1)
            if s < cfg.stages - 1:
                tokens = _merge_tokens(tokens, grid, self.merges[s])
        return LayerFeatures(feats, stage_ends, grids)

    def forward_frozen(self, x: Tensor) -> LayerFeatures:
        """Frozen feature extraction; outputs are detached data-tagged leaves.

        If any tower weight was deliberately unfrozen (negative control), the
        pass is recorded instead so the leak is observable downstream.
        """
        if not self.is_frozen():
            g = active_graph()
            if g is not None:
                with g.tag("backbone"):
                    return self._run_stack(x)
            return self._run_stack(x)
        with no_grad():
            fs = self._run_stack(x)
        fs.layers = [t.detach(tag="data") for t in fs.layers]
        return fs

    def forward_with_adapters(self, x: Tensor, adapters: "AdapterSet") -> LayerFeatures:
        """Record the full stack with trainable adapters on every layer."""
        g = active_graph()
        if g is None:
            raise RuntimeError("forward_with_adapters requires an active graph")

        def adapter_for(layer: int):
            def apply(h: Tensor) -> Tensor:
                with g.tag("adaptation"):
                    return adapters.apply(layer, h)
            return apply

        with g.tag("backbone"):
            return self._run_stack(x, adapter_for)


class AdapterSet:
    """Per-layer bottleneck adapters (down -> relu -> zero-init up)."""

    def __init__(self, config: BackboneConfig, adapter_cfg: AdapterConfig,
                 rng: Rng, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self._dims = config.dims_schedule()
        r = adapter_cfg.bottleneck_rank
        dt = default_dtype()
        for l, d in enumerate(self._dims):
            rr = rng.derive(f"{name}/adapter{l}")
            self.params[f"{name}.adapter{l}.down_w"] = Tensor(
                rr.derive("down").xavier_uniform((d, r)), tag="adaptation",
                requires_grad=True)
            self.params[f"{name}.adapter{l}.down_b"] = Tensor(
                np.zeros(r, dtype=dt), tag="adaptation", requires_grad=True)
            self.params[f"{name}.adapter{l}.up_w"] = Tensor(
                np.zeros((r, d), dtype=dt), tag="adaptation", requires_grad=True)
            self.params[f"{name}.adapter{l}.up_b"] = Tensor(
                np.zeros(d, dtype=dt), tag="adaptation", requires_grad=True)

    def apply(self, layer: int, h: Tensor) -> Tensor:
        p = self.params
        down = linear(h, p[f"{self.name}.adapter{layer}.down_w"],
                      p[f"{self.name}.adapter{layer}.down_b"])
        return linear(relu(down), p[f"{self.name}.adapter{layer}.up_w"],
                      p[f"{self.name}.adapter{layer}.up_b"])

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def replace_param(self, name: str, t: Tensor) -> None:
        self.params[name] = t


class Backbone:
    """Visual + audio towers built from one config and seed."""

    def __init__(self, config: BackboneConfig, rng: Rng):
        self.config = config
        self.visual = Tower(config, config.visual, "visual")
        self.audio = Tower(config, config.audio, "audio")
        self.visual.init_params(rng.derive("backbone/visual"))
        self.audio.init_params(
            rng.derive("backbone/audio"),
            shared_layers=self.visual if config.shared_weights else None)

    def forward_frozen(self, visual_x: Tensor, audio_x: Tensor
                       ) -> tuple[LayerFeatures, LayerFeatures]:
        return self.visual.forward_frozen(visual_x), self.audio.forward_frozen(audio_x)

    def named_params(self) -> dict[str, Tensor]:
        out = self.visual.named_params()
        for k, v in self.audio.named_params().items():
            out.setdefault(k, v)
        return out

    def save_weights(self, path) -> None:
        io.save_tensors(path, {k: v.data for k, v in self.named_params().items()},
                        version=1)

    def load_weights(self, path) -> None:
        arrays, _version = io.load_tensors(path)
        mine = self.named_params()
        missing = sorted(set(mine) - set(arrays))
        if missing:
            raise io.ContainerError(f"weight file missing tensors: {missing[:3]}...")
        dt = default_dtype()
        replacements = {}
        for name, current in mine.items():
            arr = arrays[name]
            if tuple(arr.shape) != current.shape:
                raise io.ContainerError(
                    f"{name}: stored shape {arr.shape} != expected {current.shape}")
            replacements[name] = Tensor(arr.astype(dt), tag="backbone")
        self._install(replacements)

    def _install(self, replacements: dict[str, Tensor]) -> None:
        for tower in (self.visual, self.audio):
            tower.embed = replacements[f"{tower.name}.embed"]
            for l, lp in enumerate(tower.layers):
                fields = {k: replacements[f"{tower.name}.layer{l}.{k}"]
                          for k in vars(lp)}
                tower.layers[l] = LayerParams(**fields)
            for s in range(len(tower.merges)):
                tower.merges[s] = replacements[f"{tower.name}.merge{s}"]
            if self.config.shared_weights:
                # audio aliases visual layer/merge tensors
                self.audio.layers = self.visual.layers
                self.audio.merges = self.visual.merges
