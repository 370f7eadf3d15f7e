"""Synthetic audio-visual tasks with planted, recoverable structure.

Classification clips plant one class-keyed rank-1 template per modality at
event timestamps; segmentation samples plant the template inside a patch-
aligned rectangle whose pixels form the ground-truth mask. Multi-source
segmentation adds a visual distractor template of another class that is
absent from the audio stream, so recovering the mask requires the audio cue.

Template-matching oracles quantify what the planted structure supports: they
bound achievable accuracy/mIoU independently of any learned model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import io
from .tensorcore import (
    Rng,
    ShapeError,
    Tensor,
    add,
    concat,
    cross_entropy_logits,
    linear,
    nearest_upsample,
    relu,
    reshape,
)
from .tensorcore.engine import active_graph, default_dtype


@dataclass(frozen=True)
class SyntheticClipSpec:
    t_steps: int = 5
    classes: int = 4
    visual_shape: tuple[int, int, int] = (64, 64, 3)
    audio_shape: tuple[int, int, int] = (32, 32, 1)
    noise_sigma: float = 0.1
    background_prob: float = 0.25
    template_amplitude: float = 1.0

    def __post_init__(self):
        if self.t_steps < 1 or self.classes < 1:
            raise ValueError("need t_steps >= 1 and classes >= 1")
        if not (0.0 <= self.background_prob < 1.0):
            raise ValueError("background_prob must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SegSampleSpec:
    t_steps: int = 5
    classes: int = 4
    visual_shape: tuple[int, int, int] = (64, 64, 3)
    audio_shape: tuple[int, int, int] = (32, 32, 1)
    noise_sigma: float = 0.1
    template_amplitude: float = 1.0
    multi_source: bool = False
    min_mask_frac: float = 0.05
    max_mask_frac: float = 0.40
    region_align: int = 4     # masks snap to the patch grid

    def __post_init__(self):
        if not (0.0 < self.min_mask_frac < self.max_mask_frac <= 0.40):
            raise ValueError("mask fraction bounds must satisfy 0 < lo < hi <= 0.40")


def _spread_signatures(rng: Rng, count: int, dim: int) -> np.ndarray:
    """Unit channel signatures picked greedily for max-min separation."""
    pool = rng.normal((max(64, 4 * count), dim))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    chosen = [0]
    while len(chosen) < count:
        d = np.full(len(pool), np.inf)
        for c in chosen:
            d = np.minimum(d, np.linalg.norm(pool - pool[c], axis=1))
        d[chosen] = -np.inf
        chosen.append(int(np.argmax(d)))
    return pool[chosen]


def _rank1_template(rng: Rng, shape: tuple[int, int, int], amplitude: float,
                    signature: np.ndarray) -> np.ndarray:
    """Class template: positive rank-1 texture times a unit channel signature.

    Texture factors take two positive levels, so every template pixel points
    along +signature with magnitude in [0.36, 1.96] * amplitude: local
    evidence never vanishes or flips sign inside the planted region."""
    h, w, c = shape
    a = np.where(rng.derive("rows").normal((h,)) >= 0, 1.4, 0.6)
    b = np.where(rng.derive("cols").normal((w,)) >= 0, 1.4, 0.6)
    return amplitude * np.einsum("i,j,k->ijk", a, b, signature)


def class_templates(spec, seed: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Planted per-class templates shared by every split of a dataset seed."""
    root = Rng(seed).derive("templates")
    sig_v = _spread_signatures(root.derive("sigs_v"), spec.classes,
                               spec.visual_shape[-1])
    sig_a = _spread_signatures(root.derive("sigs_a"), spec.classes,
                               spec.audio_shape[-1])
    vis, aud = [], []
    for c in range(spec.classes):
        vis.append(_rank1_template(root.derive(f"v{c}"), spec.visual_shape,
                                   spec.template_amplitude, sig_v[c]))
        aud.append(_rank1_template(root.derive(f"a{c}"), spec.audio_shape,
                                   spec.template_amplitude, sig_a[c]))
    return vis, aud


@dataclass
class ClassificationDataset:
    spec: SyntheticClipSpec
    seed: int
    split: str
    visual: np.ndarray   # (n, T, H, W, C)
    audio: np.ndarray    # (n, T, h, w, 1)
    labels: np.ndarray   # (n, T) ints in [0, classes]

    def __len__(self) -> int:
        return self.visual.shape[0]


@dataclass
class SegmentationDataset:
    spec: SegSampleSpec
    seed: int
    split: str
    visual: np.ndarray        # (n, T, H, W, C)
    audio: np.ndarray         # (n, T, h, w, 1)
    masks: np.ndarray         # (n, T, H, W) in {0, 1}
    sounding: np.ndarray      # (n,) class index of the audible object
    distractor: np.ndarray    # (n,) class index or -1

    def __len__(self) -> int:
        return self.visual.shape[0]


def gen_classification_dataset(spec: SyntheticClipSpec, seed: int, n: int,
                               split: str = "train") -> ClassificationDataset:
    """Class-stratified clips: clip i carries class 1 + (i mod classes)."""
    if n < spec.classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={spec.classes}")
    vis_t, aud_t = class_templates(spec, seed)
    dt = default_dtype()
    t_steps = spec.t_steps
    visual = np.zeros((n, t_steps) + spec.visual_shape, dtype=dt)
    audio = np.zeros((n, t_steps) + spec.audio_shape, dtype=dt)
    labels = np.zeros((n, t_steps), dtype=np.int64)
    root = Rng(seed)
    for i in range(n):
        cls = 1 + (i % spec.classes)
        r = root.derive(f"{split}/clip{i}")
        event = r.derive("events").uniform((t_steps,)) >= spec.background_prob
        if not event.any():
            event[int(r.derive("fallback").integers(0, t_steps, (1,))[0])] = True
        noise_v = r.derive("noise_v").normal((t_steps,) + spec.visual_shape,
                                             std=spec.noise_sigma)
        noise_a = r.derive("noise_a").normal((t_steps,) + spec.audio_shape,
                                             std=spec.noise_sigma)
        visual[i] = noise_v
        audio[i] = noise_a
        for t in range(t_steps):
            if event[t]:
                visual[i, t] += vis_t[cls - 1]
                audio[i, t] += aud_t[cls - 1]
                labels[i, t] = cls
    return ClassificationDataset(spec, seed, split, visual, audio, labels)


def _pick_region(rng: Rng, side: int, align: int, lo_frac: float, hi_frac: float,
                 col_range: tuple[int, int]) -> tuple[int, int, int, int]:
    """Aligned rectangle (r0, c0, h, w) inside the column band, sized to land
    within the mask-fraction bounds."""
    area = side * side
    sizes = [s for s in range(align, side + 1, align)
             if lo_frac * area <= s * s <= hi_frac * area]
    c_lo, c_hi = col_range
    w_sizes = [s for s in sizes if s <= c_hi - c_lo]
    if not sizes or not w_sizes:
        raise ValueError("mask fraction bounds leave no feasible region size")
    s_h = int(sizes[rng.derive("h").integers(0, len(sizes), (1,))[0]])
    s_w = int(w_sizes[rng.derive("w").integers(0, len(w_sizes), (1,))[0]])
    r0 = int(rng.derive("r0").integers(0, (side - s_h) // align + 1, (1,))[0]) * align
    c0 = c_lo + int(rng.derive("c0").integers(
        0, (c_hi - c_lo - s_w) // align + 1, (1,))[0]) * align
    return r0, c0, s_h, s_w


def gen_segmentation_dataset(spec: SegSampleSpec, seed: int, n: int,
                             split: str = "train") -> SegmentationDataset:
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    vis_t, aud_t = class_templates(spec, seed)
    dt = default_dtype()
    t_steps = spec.t_steps
    h, w, _ = spec.visual_shape
    visual = np.zeros((n, t_steps) + spec.visual_shape, dtype=dt)
    audio = np.zeros((n, t_steps) + spec.audio_shape, dtype=dt)
    masks = np.zeros((n, t_steps, h, w), dtype=dt)
    sounding = np.zeros(n, dtype=np.int64)
    distractor = np.full(n, -1, dtype=np.int64)
    root = Rng(seed)
    for i in range(n):
        r = root.derive(f"{split}/sample{i}")
        cls = int(r.derive("cls").integers(1, spec.classes + 1, (1,))[0])
        sounding[i] = cls
        # the sounding object lands in a random half so position carries no label
        left = bool(r.derive("side").integers(0, 2, (1,))[0])
        half = ((0, w // 2) if left else (w // 2, w))
        r0, c0, sh, sw = _pick_region(r.derive("region"), h, spec.region_align,
                                      spec.min_mask_frac, spec.max_mask_frac, half)
        frame = np.zeros(spec.visual_shape, dtype=dt)
        frame[r0:r0 + sh, c0:c0 + sw, :] = vis_t[cls - 1][r0:r0 + sh, c0:c0 + sw, :]
        mask = np.zeros((h, w), dtype=dt)
        mask[r0:r0 + sh, c0:c0 + sw] = 1.0
        if spec.multi_source:
            others = [c for c in range(1, spec.classes + 1) if c != cls]
            d = others[int(r.derive("dcls").integers(0, len(others), (1,))[0])]
            distractor[i] = d
            other_half = ((w // 2, w) if left else (0, w // 2))
            dr0, dc0, dsh, dsw = _pick_region(
                r.derive("dregion"), h, spec.region_align,
                spec.min_mask_frac, spec.max_mask_frac, other_half)
            frame[dr0:dr0 + dsh, dc0:dc0 + dsw, :] = \
                vis_t[d - 1][dr0:dr0 + dsh, dc0:dc0 + dsw, :]
        noise_v = r.derive("noise_v").normal((t_steps,) + spec.visual_shape,
                                             std=spec.noise_sigma)
        noise_a = r.derive("noise_a").normal((t_steps,) + spec.audio_shape,
                                             std=spec.noise_sigma)
        visual[i] = frame[None] + noise_v
        audio[i] = aud_t[cls - 1][None] + noise_a
        masks[i] = mask[None]
    return SegmentationDataset(spec, seed, split, visual, audio, masks,
                               sounding, distractor)


# --- oracles (planted-structure ceilings, independent of any model) ----------


def nearest_template_classify(ds: ClassificationDataset) -> float:
    """Accuracy of the matched-filter classifier over class + background."""
    vis_t, aud_t = class_templates(ds.spec, ds.seed)
    vis = np.stack([np.zeros(ds.spec.visual_shape)] + vis_t)   # class 0 = silence
    aud = np.stack([np.zeros(ds.spec.audio_shape)] + aud_t)
    n, t_steps = ds.labels.shape
    v = ds.visual.reshape(n * t_steps, -1)
    a = ds.audio.reshape(n * t_steps, -1)
    dv = ((v[:, None, :] - vis.reshape(len(vis), -1)[None]) ** 2).sum(-1)
    da = ((a[:, None, :] - aud.reshape(len(aud), -1)[None]) ** 2).sum(-1)
    pred = (dv + da).argmin(axis=1)
    return float((pred == ds.labels.reshape(-1)).mean())


def template_match_segment(ds: SegmentationDataset, audio_aware: bool) -> float:
    """mIoU of per-pixel nearest-template assignment over {background, classes}.

    The audio-aware variant marks pixels assigned to the class identified
    from the audio stream; the visual-only variant cannot tell which
    template sounds and marks pixels assigned to any class."""
    vis_t, aud_t = class_templates(ds.spec, ds.seed)
    n, t_steps = ds.masks.shape[:2]
    ious = []
    for i in range(n):
        for t in range(t_steps):
            v = ds.visual[i, t]
            resid = np.stack([(v ** 2).sum(-1)]
                             + [((v - p) ** 2).sum(-1) for p in vis_t])
            assign = resid.argmin(axis=0)  # 0 = background, 1.. = class
            if audio_aware:
                a = ds.audio[i, t].reshape(-1)
                da = [((a - p.reshape(-1)) ** 2).sum() for p in aud_t]
                pred = assign == (int(np.argmin(da)) + 1)
            else:
                pred = assign > 0
            ious.append(_iou(pred, ds.masks[i, t] > 0.5))
    return float(np.mean(ious))


def _iou(pred: np.ndarray, gt: np.ndarray) -> float:
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0  # both empty by convention
    return float(np.logical_and(pred, gt).sum() / union)


# --- heads -------------------------------------------------------------------


class ClassificationHead:
    """Linear map from concatenated (audio, visual) pooled meta-tokens."""

    def __init__(self, d_a: int, d_v: int, classes: int, rng: Optional[Rng] = None):
        dt = default_dtype()
        self.classes = classes
        w = (rng.derive("w").xavier_uniform((d_a + d_v, classes + 1))
             if rng is not None else np.zeros((d_a + d_v, classes + 1), dtype=dt))
        self.params = {
            "cls.w": Tensor(w, tag="head", requires_grad=True),
            "cls.b": Tensor(np.zeros(classes + 1, dtype=dt), tag="head",
                            requires_grad=True),
        }

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def replace_param(self, name: str, t: Tensor) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = t


def classify(a_bar: Tensor, v_bar: Tensor, head: ClassificationHead) -> Tensor:
    """Per-timestamp logits over classes + background."""
    if a_bar.shape[:-1] != v_bar.shape[:-1]:
        raise ShapeError(f"classify: timestamp axes disagree: {a_bar.shape} "
                         f"vs {v_bar.shape}")
    fused = concat([a_bar, v_bar], axis=-1)
    return linear(fused, head.params["cls.w"], head.params["cls.b"])


class SegmentationHead:
    """Per-stage pointwise reductions fused on the finest grid, then a
    two-layer pointwise head to one logit per pixel."""

    def __init__(self, stage_dims: list[int], fuse_channels: int = 32,
                 rng: Optional[Rng] = None):
        dt = default_dtype()
        self.fuse_channels = fuse_channels
        self.stage_dims = list(stage_dims)
        self.params: dict[str, Tensor] = {}
        for s, d in enumerate(self.stage_dims):
            w = (rng.derive(f"s{s}w").xavier_uniform((d, fuse_channels))
                 if rng is not None else np.zeros((d, fuse_channels), dtype=dt))
            self.params[f"seg.s{s}.w"] = Tensor(w, tag="head", requires_grad=True)
            self.params[f"seg.s{s}.b"] = Tensor(np.zeros(fuse_channels, dtype=dt),
                                                tag="head", requires_grad=True)
        wh = (rng.derive("hw").xavier_uniform((fuse_channels, fuse_channels))
              if rng is not None else np.zeros((fuse_channels, fuse_channels), dtype=dt))
        self.params["seg.hidden.w"] = Tensor(wh, tag="head", requires_grad=True)
        self.params["seg.hidden.b"] = Tensor(np.zeros(fuse_channels, dtype=dt),
                                             tag="head", requires_grad=True)
        # zero-init output: logits start at 0 so the loss starts balanced
        # instead of saturated by deep-residual feature scales
        self.params["seg.out.w"] = Tensor(np.zeros((fuse_channels, 1), dtype=dt),
                                          tag="head", requires_grad=True)
        self.params["seg.out.b"] = Tensor(np.zeros(1, dtype=dt), tag="head",
                                          requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def replace_param(self, name: str, t: Tensor) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = t


def fpn_decode(stage_features: list[Tensor], grids: list[tuple[int, int]],
               head: SegmentationHead, patch: int) -> Tensor:
    """Fuse stage tokens on the stage-0 grid and emit per-pixel logits.

    stage_features[s] is (T, N_s, D_s) on grid grids[s]; output is
    (T, H, W) where H = grid0_h * patch.
    """
    if len(stage_features) != len(head.stage_dims):
        raise ShapeError(f"fpn_decode: expected {len(head.stage_dims)} stages, "
                         f"got {len(stage_features)}")
    g = active_graph()

    def run() -> Tensor:
        g0h, g0w = grids[0]
        acc = None
        for s, v in enumerate(stage_features):
            gh, gw = grids[s]
            f = linear(v, head.params[f"seg.s{s}.w"], head.params[f"seg.s{s}.b"])
            f = reshape(f, v.shape[:-2] + (gh, gw, head.fuse_channels))
            factor = g0h // gh
            if factor > 1:
                f = nearest_upsample(f, factor)
            acc = f if acc is None else add(acc, f)
        h = relu(linear(acc, head.params["seg.hidden.w"], head.params["seg.hidden.b"]))
        logits = linear(h, head.params["seg.out.w"], head.params["seg.out.b"])
        logits = nearest_upsample(logits, patch)
        return reshape(logits, logits.shape[:-1])

    if g is not None:
        with g.tag("head"):
            return run()
    return run()


# --- metrics -----------------------------------------------------------------


def segment_accuracy(pred_logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of timestamps whose argmax class matches the label."""
    if pred_logits.shape[:-1] != labels.shape:
        raise ShapeError(f"segment_accuracy: {pred_logits.shape} vs {labels.shape}")
    pred = pred_logits.argmax(axis=-1)
    return float((pred == labels).mean())


def miou(pred_logits: np.ndarray, gt_masks: np.ndarray) -> float:
    """Mean IoU over mask frames; prediction thresholds the sigmoid at 0.5."""
    if pred_logits.shape != gt_masks.shape:
        raise ShapeError(f"miou: {pred_logits.shape} vs {gt_masks.shape}")
    frames = pred_logits.reshape(-1, *pred_logits.shape[-2:])
    gts = gt_masks.reshape(-1, *gt_masks.shape[-2:])
    vals = [_iou(p > 0.0, g > 0.5) for p, g in zip(frames, gts)]
    return float(np.mean(vals))


_METRICS = {"segment_accuracy": segment_accuracy, "miou": miou}


def metrics(kind: str, pred: np.ndarray, gt: np.ndarray) -> float:
    if kind not in _METRICS:
        raise ValueError(f"unknown metric kind {kind!r}")
    return _METRICS[kind](pred, gt)


# --- serialization -----------------------------------------------------------


def save_dataset(ds, path) -> None:
    arrays = {"visual": ds.visual, "audio": ds.audio}
    meta = {"seed": ds.seed, "split": ds.split, "kind": type(ds).__name__,
            "spec": {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in vars(ds.spec).items()}}
    if isinstance(ds, ClassificationDataset):
        arrays["labels"] = ds.labels.astype(np.float64)
    else:
        arrays["masks"] = ds.masks
        arrays["sounding"] = ds.sounding.astype(np.float64)
        arrays["distractor"] = ds.distractor.astype(np.float64)
    io.save_tensors(path, arrays, version=2)
    io.write_json(str(path) + ".json", meta)


def load_dataset(path):
    arrays, _ = io.load_tensors(path)
    meta = io.read_json(str(path) + ".json")
    spec_kw = {k: (tuple(v) if isinstance(v, list) else v)
               for k, v in meta["spec"].items()}
    if meta["kind"] == "ClassificationDataset":
        return ClassificationDataset(SyntheticClipSpec(**spec_kw), meta["seed"],
                                     meta["split"], arrays["visual"], arrays["audio"],
                                     arrays["labels"].astype(np.int64))
    return SegmentationDataset(SegSampleSpec(**spec_kw), meta["seed"], meta["split"],
                               arrays["visual"], arrays["audio"], arrays["masks"],
                               arrays["sounding"].astype(np.int64),
                               arrays["distractor"].astype(np.int64))
