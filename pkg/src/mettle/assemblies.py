"""Model assemblies: frozen-backbone meta-token models and the adapter baseline.

Every assembly flattens (batch, timestamps) into one leading axis, exposes an
ordered registry of trainable parameters, and can rebuild its loss either
from raw inputs or from cached frozen features (cached and direct paths are
numerically identical because frozen features are detached constants).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .backbone import (
    AdapterConfig,
    AdapterSet,
    Backbone,
    BackboneConfig,
    LayerFeatures,
)
from .lcd import LcdConfig, MetaTokenBank, lcd_classification_forward
from .mti import MtiConfig, MtiParams, mti_forward
from .tasks import ClassificationHead, SegmentationHead, classify, fpn_decode
from .tensorcore import (
    ComputeGraph,
    Rng,
    Tensor,
    bce_logits,
    concat,
    cross_entropy_logits,
    no_grad,
    reduce_mean,
)
from .tensorcore.engine import active_graph


def features_layout(cfg: BackboneConfig, modality) -> tuple[list[int], list[tuple[int, int]]]:
    stage_ends, grids = [], []
    layer = 0
    for s in range(cfg.stages):
        grid = cfg.grid_at(modality, s)
        for _ in range(cfg.layers_per_stage[s]):
            grids.append(grid)
            layer += 1
        stage_ends.append(layer - 1)
    return stage_ends, grids


def _flatten_bt(arr: np.ndarray) -> np.ndarray:
    return arr.reshape((-1,) + arr.shape[2:])


class _ParamRegistry:
    """Shared routing of named trainable parameters to their owners."""

    def _owners(self) -> list:
        raise NotImplementedError

    def trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for owner in self._owners():
            out.update(owner.named_params())
        return out

    def replace(self, name: str, t: Tensor) -> None:
        for owner in self._owners():
            if name in owner.named_params():
                owner.replace_param(name, t)
                return
        raise KeyError(name)

    def backbone_params(self) -> dict[str, Tensor]:
        return self.backbone.named_params()

    def param_counts(self) -> tuple[int, int]:
        trainable = sum(t.size for t in self.trainable().values())
        total = trainable + sum(t.size for t in self.backbone_params().values())
        return trainable, total


class MettleClassifier(_ParamRegistry):
    """Frozen towers -> per-layer distillation -> pooled tokens -> linear head."""

    supports_caching = True
    metric_kind = "segment_accuracy"

    def __init__(self, backbone_cfg: BackboneConfig, lcd_cfg: LcdConfig,
                 classes: int, seed: int):
        if lcd_cfg.layers != "all":
            raise ValueError("classification distills every layer")
        rng = Rng(seed)
        self.backbone_cfg = backbone_cfg
        self.lcd_cfg = lcd_cfg
        self.classes = classes
        self.backbone = Backbone(backbone_cfg, rng)
        self.bank_v = MetaTokenBank("bank_v", lcd_cfg, backbone_cfg, "visual",
                                    rng.derive("bank/v"))
        self.bank_a = MetaTokenBank("bank_a", lcd_cfg, backbone_cfg, "audio",
                                    rng.derive("bank/a"))
        self.head = ClassificationHead(lcd_cfg.common_dim, lcd_cfg.common_dim,
                                       classes, rng.derive("head"))

    def _owners(self) -> list:
        return [self.bank_v, self.bank_a, self.head]

    def backbone_frozen(self) -> bool:
        return self.backbone.visual.is_frozen() and self.backbone.audio.is_frozen()

    # -- feature plumbing --

    def extract_features(self, visual: np.ndarray, audio: np.ndarray
                         ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Frozen per-layer features for caching; inputs are (B, T, ...)."""
        assert self.backbone_frozen(), "caching is only sound for a frozen backbone"
        with no_grad():
            fv = self.backbone.visual.forward_frozen(Tensor(_flatten_bt(visual)))
            fa = self.backbone.audio.forward_frozen(Tensor(_flatten_bt(audio)))
        return [t.data for t in fv.layers], [t.data for t in fa.layers]

    def _features_from_arrays(self, arrays_v, arrays_a) -> tuple[LayerFeatures, LayerFeatures]:
        ends_v, grids_v = features_layout(self.backbone_cfg, self.backbone_cfg.visual)
        ends_a, grids_a = features_layout(self.backbone_cfg, self.backbone_cfg.audio)
        fv = LayerFeatures([Tensor(a) for a in arrays_v], ends_v, grids_v)
        fa = LayerFeatures([Tensor(a) for a in arrays_a], ends_a, grids_a)
        return fv, fa

    def _targets_tensor(self, labels: np.ndarray) -> Tensor:
        return Tensor(labels.reshape(-1).astype(float))

    # -- forward paths --

    def _head_loss(self, fv: LayerFeatures, fa: LayerFeatures, labels: np.ndarray):
        agg = lcd_classification_forward(fv, fa, self.bank_v, self.bank_a,
                                         self.lcd_cfg)
        g = active_graph()
        if g is not None:
            with g.tag("head"):
                logits = classify(agg.a_bar, agg.v_bar, self.head)
                loss = cross_entropy_logits(logits, self._targets_tensor(labels))
        else:
            logits = classify(agg.a_bar, agg.v_bar, self.head)
            loss = cross_entropy_logits(logits, self._targets_tensor(labels))
        return loss, logits

    def loss_from_features(self, arrays_v, arrays_a, labels: np.ndarray):
        fv, fa = self._features_from_arrays(arrays_v, arrays_a)
        return self._head_loss(fv, fa, labels)

    def forward_loss(self, visual: np.ndarray, audio: np.ndarray, labels: np.ndarray):
        fv = self.backbone.visual.forward_frozen(Tensor(_flatten_bt(visual)))
        fa = self.backbone.audio.forward_frozen(Tensor(_flatten_bt(audio)))
        return self._head_loss(fv, fa, labels)

    def predict_logits(self, visual: np.ndarray, audio: np.ndarray) -> np.ndarray:
        b, t = visual.shape[:2]
        with no_grad():
            _, logits = self.forward_loss(visual, audio,
                                          np.zeros((b, t), dtype=np.int64))
        return logits.data.reshape(b, t, -1)

    def targets(self, ds) -> np.ndarray:
        return ds.labels


class AdapterClassifier(_ParamRegistry):
    """Figure-style baseline: trainable bottlenecks inside every frozen layer,
    classification head on mean-pooled final-layer tokens."""

    supports_caching = False
    metric_kind = "segment_accuracy"

    def __init__(self, backbone_cfg: BackboneConfig, adapter_cfg: AdapterConfig,
                 classes: int, seed: int):
        rng = Rng(seed)
        self.backbone_cfg = backbone_cfg
        self.classes = classes
        self.backbone = Backbone(backbone_cfg, rng)
        self.adapters_v = AdapterSet(backbone_cfg, adapter_cfg,
                                     rng.derive("adapters/v"), "adpt_v")
        self.adapters_a = AdapterSet(backbone_cfg, adapter_cfg,
                                     rng.derive("adapters/a"), "adpt_a")
        d = backbone_cfg.dim(backbone_cfg.stages - 1)
        self.head = ClassificationHead(d, d, classes, rng.derive("head"))

    def _owners(self) -> list:
        return [self.adapters_v, self.adapters_a, self.head]

    def backbone_frozen(self) -> bool:
        return self.backbone.visual.is_frozen() and self.backbone.audio.is_frozen()

    def forward_loss(self, visual: np.ndarray, audio: np.ndarray, labels: np.ndarray):
        g = active_graph()
        if g is None:
            raise RuntimeError("adapter forward requires an active graph")
        fv = self.backbone.visual.forward_with_adapters(
            Tensor(_flatten_bt(visual)), self.adapters_v)
        fa = self.backbone.audio.forward_with_adapters(
            Tensor(_flatten_bt(audio)), self.adapters_a)
        with g.tag("head"):
            pooled_v = reduce_mean(fv.layers[-1], axes=(-2,))
            pooled_a = reduce_mean(fa.layers[-1], axes=(-2,))
            logits = classify(pooled_a, pooled_v, self.head)
            loss = cross_entropy_logits(logits, Tensor(labels.reshape(-1).astype(float)))
        return loss, logits

    def predict_logits(self, visual: np.ndarray, audio: np.ndarray) -> np.ndarray:
        b, t = visual.shape[:2]
        # adapters want a graph context; no_grad keeps prediction tape-free
        with ComputeGraph(), no_grad():
            _, logits = self.forward_loss(visual, audio,
                                          np.zeros((b, t), dtype=np.int64))
        return logits.data.reshape(b, t, -1)

    def targets(self, ds) -> np.ndarray:
        return ds.labels


class MettleSegmenter(_ParamRegistry):
    """Final-layer distillation feeding meta-token injection over all stages,
    decoded by the pointwise pyramid head."""

    supports_caching = True
    metric_kind = "miou"

    def __init__(self, backbone_cfg: BackboneConfig, lcd_cfg: LcdConfig,
                 mti_cfg: MtiConfig, seed: int, fuse_channels: int = 32):
        rng = Rng(seed)
        self.backbone_cfg = backbone_cfg
        self.lcd_cfg = lcd_cfg
        self.mti_cfg = mti_cfg
        self.backbone = Backbone(backbone_cfg, rng)
        source_layer = mti_cfg.source_layer(backbone_cfg)
        self.bank_v = MetaTokenBank("bank_v", lcd_cfg, backbone_cfg, "visual",
                                    rng.derive("bank/v"), tapped_layers=[source_layer])
        self.bank_a = MetaTokenBank("bank_a", lcd_cfg, backbone_cfg, "audio",
                                    rng.derive("bank/a"), tapped_layers=[source_layer])
        self.mti_params = MtiParams(backbone_cfg, lcd_cfg.common_dim,
                                    rng.derive("mti"))
        stage_dims = [backbone_cfg.dim(s) for s in range(backbone_cfg.stages)]
        self.head = SegmentationHead(stage_dims, fuse_channels, rng.derive("head"))

    def _owners(self) -> list:
        return [self.bank_v, self.bank_a, self.mti_params, self.head]

    def backbone_frozen(self) -> bool:
        return self.backbone.visual.is_frozen() and self.backbone.audio.is_frozen()

    def extract_features(self, visual: np.ndarray, audio: np.ndarray):
        assert self.backbone_frozen(), "caching is only sound for a frozen backbone"
        with no_grad():
            fv = self.backbone.visual.forward_frozen(Tensor(_flatten_bt(visual)))
            fa = self.backbone.audio.forward_frozen(Tensor(_flatten_bt(audio)))
        return [t.data for t in fv.layers], [t.data for t in fa.layers]

    def _features_from_arrays(self, arrays_v, arrays_a):
        ends_v, grids_v = features_layout(self.backbone_cfg, self.backbone_cfg.visual)
        ends_a, grids_a = features_layout(self.backbone_cfg, self.backbone_cfg.audio)
        return (LayerFeatures([Tensor(a) for a in arrays_v], ends_v, grids_v),
                LayerFeatures([Tensor(a) for a in arrays_a], ends_a, grids_a))

    def _decode_loss(self, fv: LayerFeatures, fa: LayerFeatures, masks: np.ndarray):
        g = active_graph()

        def run():
            m_v = self.bank_v.forward_final(fv)
            m_a = self.bank_a.forward_final(fa)
            stages = mti_forward(fv.stages, m_a, m_v, self.mti_cfg, self.mti_params,
                                 scale_logits=self.lcd_cfg.scale_logits)
            stage_grids = [fv.stage_grid(s) for s in range(self.backbone_cfg.stages)]
            logits = fpn_decode(stages, stage_grids, self.head,
                                patch=self.backbone_cfg.visual.patch)
            flat = masks.reshape((-1,) + masks.shape[2:])
            loss = bce_logits(logits, Tensor(flat))
            return loss, logits

        if g is not None:
            with g.tag("adaptation"):
                return run()
        return run()

    def loss_from_features(self, arrays_v, arrays_a, masks: np.ndarray):
        fv, fa = self._features_from_arrays(arrays_v, arrays_a)
        return self._decode_loss(fv, fa, masks)

    def forward_loss(self, visual: np.ndarray, audio: np.ndarray, masks: np.ndarray):
        fv = self.backbone.visual.forward_frozen(Tensor(_flatten_bt(visual)))
        fa = self.backbone.audio.forward_frozen(Tensor(_flatten_bt(audio)))
        return self._decode_loss(fv, fa, masks)

    def predict_logits(self, visual: np.ndarray, audio: np.ndarray) -> np.ndarray:
        b, t = visual.shape[:2]
        h, w = visual.shape[2], visual.shape[3]
        with no_grad():
            _, logits = self.forward_loss(visual, audio,
                                          np.zeros((b, t, h, w)))
        return logits.data.reshape(b, t, h, w)

    def targets(self, ds) -> np.ndarray:
        return ds.masks
