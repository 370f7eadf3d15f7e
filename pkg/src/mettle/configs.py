"""Experiment configuration schema and builders.

The pydantic models are the published JSON contract: unknown keys are
rejected, numeric invariants are enforced at parse time, and the JSON schema
is exported verbatim by the service. Builders turn a validated config into
concrete datasets, assemblies, and a train configuration.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .assemblies import AdapterClassifier, MettleClassifier, MettleSegmenter
from .backbone import AdapterConfig, BackboneConfig, ModalityInput
from .lcd import LcdConfig
from .mti import MtiConfig
from .tasks import (
    SegSampleSpec,
    SyntheticClipSpec,
    gen_classification_dataset,
    gen_segmentation_dataset,
)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InputSection(_Section):
    height: int = Field(ge=4)
    width: int = Field(ge=4)
    channels: int = Field(ge=1)
    patch: int = Field(ge=1)


class BackboneSection(_Section):
    stages: int = Field(default=4, ge=1)
    layers_per_stage: list[int] = [2, 2, 2, 2]
    base_dim: int = Field(default=32, ge=2)
    heads: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=2, ge=1)
    visual: InputSection = InputSection(height=64, width=64, channels=3, patch=4)
    audio: InputSection = InputSection(height=32, width=32, channels=1, patch=4)
    shared_weights: bool = False
    adapter_rank: int = Field(default=8, ge=1)


class LcdSection(_Section):
    k_a: int = Field(default=1, ge=1)
    k_v: int = Field(default=1, ge=1)
    r_a: int = Field(default=1, ge=1)
    r_v: int = Field(default=1, ge=1)
    heads: int = Field(default=1, ge=1)
    scale_logits: bool = True
    common_dim: int = Field(default=64, ge=1)
    share_step_weights: bool = True
    layers: Optional[Literal["all", "final"]] = None  # resolved by task
    per_stage_k: Optional[list[int]] = None
    dp_mode: Literal["linear", "avgpool"] = "linear"
    enable_ts: bool = True
    enable_dp: bool = True


class MtiSection(_Section):
    order: Literal["cross_first", "intra_first"] = "cross_first"
    stages: Optional[list[int]] = None         # 1-based; default all stages
    enable_cross: bool = True
    enable_intra: bool = True
    source_stage: Optional[int] = Field(default=None, ge=1)  # default top stage

    @model_validator(mode="after")
    def _one_branch(self):
        if not (self.enable_cross or self.enable_intra):
            raise ValueError("enable at least one of cross/intra injection")
        return self


class TrainSection(_Section):
    lr: float = Field(default=1e-3, gt=0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=4, ge=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    cache_features: bool = True
    fuse_channels: int = Field(default=32, ge=1)  # segmentation head width


class DatasetSection(_Section):
    t_steps: int = Field(default=5, ge=1)
    classes: int = Field(default=4, ge=1)
    n_train: int = Field(default=80, ge=1)
    n_eval: int = Field(default=40, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0)
    background_prob: float = Field(default=0.25, ge=0, lt=1)
    template_amplitude: float = Field(default=1.0, gt=0)
    min_mask_frac: float = Field(default=0.05, gt=0)
    max_mask_frac: float = Field(default=0.40, gt=0)


class ExperimentConfig(_Section):
    task: Literal["classify", "segment_single", "segment_multi"]
    seed: Optional[int] = None
    backbone: BackboneSection = BackboneSection()
    lcd: LcdSection = LcdSection()
    mti: MtiSection = MtiSection()
    train: TrainSection = TrainSection()
    dataset: DatasetSection = DatasetSection()
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.lcd.layers is not None:
            if self.task == "classify" and self.lcd.layers != "all":
                raise ValueError("classification distills every layer (layers='all')")
            if self.task != "classify" and self.lcd.layers != "final":
                raise ValueError("segmentation distills the final layer only")
        if self.mti.source_stage is not None and self.mti.source_stage > self.backbone.stages:
            raise ValueError("mti.source_stage exceeds backbone stages")
        return self


def to_backbone_config(s: BackboneSection) -> BackboneConfig:
    return BackboneConfig(
        stages=s.stages, layers_per_stage=tuple(s.layers_per_stage),
        base_dim=s.base_dim, heads=s.heads, mlp_ratio=s.mlp_ratio,
        visual=ModalityInput(s.visual.height, s.visual.width, s.visual.channels,
                             s.visual.patch),
        audio=ModalityInput(s.audio.height, s.audio.width, s.audio.channels,
                            s.audio.patch),
        shared_weights=s.shared_weights,
    )


def to_lcd_config(cfg: ExperimentConfig) -> LcdConfig:
    s = cfg.lcd
    layers = s.layers or ("all" if cfg.task == "classify" else "final")
    return LcdConfig(
        k_a=s.k_a, k_v=s.k_v, r_a=s.r_a, r_v=s.r_v, heads=s.heads,
        scale_logits=s.scale_logits, common_dim=s.common_dim,
        share_step_weights=s.share_step_weights, layers=layers,
        per_stage_k=tuple(s.per_stage_k) if s.per_stage_k else None,
        dp_mode=s.dp_mode, enable_ts=s.enable_ts, enable_dp=s.enable_dp,
    )


def to_mti_config(cfg: ExperimentConfig) -> MtiConfig:
    s = cfg.mti
    stages_1b = s.stages or list(range(1, cfg.backbone.stages + 1))
    return MtiConfig(
        order=s.order,
        stages=tuple(i - 1 for i in stages_1b),
        enable_cross=s.enable_cross, enable_intra=s.enable_intra,
        source_stage=s.source_stage or cfg.backbone.stages,
    )


def clip_spec(cfg: ExperimentConfig) -> SyntheticClipSpec:
    b, d = cfg.backbone, cfg.dataset
    return SyntheticClipSpec(
        t_steps=d.t_steps, classes=d.classes,
        visual_shape=(b.visual.height, b.visual.width, b.visual.channels),
        audio_shape=(b.audio.height, b.audio.width, b.audio.channels),
        noise_sigma=d.noise_sigma, background_prob=d.background_prob,
        template_amplitude=d.template_amplitude,
    )


def seg_spec(cfg: ExperimentConfig) -> SegSampleSpec:
    b, d = cfg.backbone, cfg.dataset
    return SegSampleSpec(
        t_steps=d.t_steps, classes=d.classes,
        visual_shape=(b.visual.height, b.visual.width, b.visual.channels),
        audio_shape=(b.audio.height, b.audio.width, b.audio.channels),
        noise_sigma=d.noise_sigma, template_amplitude=d.template_amplitude,
        multi_source=cfg.task == "segment_multi",
        min_mask_frac=d.min_mask_frac, max_mask_frac=d.max_mask_frac,
    )


def build_datasets(cfg: ExperimentConfig, seed: int):
    if cfg.task == "classify":
        spec = clip_spec(cfg)
        return (gen_classification_dataset(spec, seed, cfg.dataset.n_train, "train"),
                gen_classification_dataset(spec, seed, cfg.dataset.n_eval, "eval"))
    spec = seg_spec(cfg)
    return (gen_segmentation_dataset(spec, seed, cfg.dataset.n_train, "train"),
            gen_segmentation_dataset(spec, seed, cfg.dataset.n_eval, "eval"))


def build_model(cfg: ExperimentConfig, seed: int):
    backbone_cfg = to_backbone_config(cfg.backbone)
    lcd_cfg = to_lcd_config(cfg)
    if cfg.task == "classify":
        return MettleClassifier(backbone_cfg, lcd_cfg, cfg.dataset.classes, seed)
    return MettleSegmenter(backbone_cfg, lcd_cfg, to_mti_config(cfg), seed,
                           fuse_channels=cfg.train.fuse_channels)


def build_adapter_baseline(cfg: ExperimentConfig, seed: int) -> AdapterClassifier:
    return AdapterClassifier(to_backbone_config(cfg.backbone),
                             AdapterConfig(cfg.backbone.adapter_rank),
                             cfg.dataset.classes, seed)


def tiny_preset(task: str = "classify", **overrides) -> ExperimentConfig:
    """Desk-top fixture: two stages, narrow dims, short clips."""
    base = dict(
        task=task,
        seed=0,
        backbone=dict(
            stages=2, layers_per_stage=[1, 1], base_dim=8, heads=2, mlp_ratio=2,
            visual=dict(height=16, width=16, channels=3, patch=4),
            audio=dict(height=8, width=8, channels=1, patch=4),
        ),
        lcd=dict(common_dim=16),
        dataset=dict(t_steps=2, classes=4, n_train=16, n_eval=8),
        train=dict(epochs=10, batch_size=4, fuse_channels=8),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def default_preset(task: str = "classify", **overrides) -> ExperimentConfig:
    base = dict(task=task, seed=0)
    base.update(overrides)
    return ExperimentConfig(**base)
