"""Training loop, gradient-flow audit, memory/runtime comparison, ablations."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import configs
from .tasks import miou, segment_accuracy
from .tensorcore import ComputeGraph, GradientMap, NumericError, Rng, Tensor
from .tensorcore.engine import MemoryLedger


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cache_features: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: GradientMap
             ) -> dict[str, Tensor]:
        """New parameter tensors after one update; missing grads count as zero."""
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        out: dict[str, Tensor] = {}
        for name, p in params.items():
            gt = grads.get(p)
            g = gt.data if gt is not None else np.zeros(p.shape, dtype=p.dtype)
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            out[name] = Tensor(p.data - update, tag=p.tag, requires_grad=True)
        return out


@dataclass
class RunReport:
    task: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    final_metric_train: float = 0.0
    final_metric_eval: float = 0.0
    retained_bytes: dict[str, int] = field(default_factory=dict)
    retained_total: int = 0
    iter_ms_mean: float = 0.0
    iter_ms_sd: float = 0.0
    trainable_params: int = 0
    total_params: int = 0

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params if self.total_params else 0.0

    def epoch_rows(self) -> tuple[list[str], list[list]]:
        header = ["epoch", "loss", "metric"]
        rows = [[e["epoch"], e["loss"], e["metric"]] for e in self.epochs]
        return header, rows

    def summary(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "final_metric_train": self.final_metric_train,
            "final_metric_eval": self.final_metric_eval,
            "retained_bytes": dict(self.retained_bytes),
            "retained_total": self.retained_total,
            "iter_ms_mean": self.iter_ms_mean,
            "iter_ms_sd": self.iter_ms_sd,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
            "trainable_fraction": self.trainable_fraction,
            "epochs_run": len(self.epochs),
        }


def evaluate_metric(model, ds, chunk: int = 8) -> float:
    """Model metric over a dataset, evaluated in fixed-size chunks."""
    preds = []
    for lo in range(0, len(ds), chunk):
        preds.append(model.predict_logits(ds.visual[lo:lo + chunk],
                                          ds.audio[lo:lo + chunk]))
    pred = np.concatenate(preds, axis=0)
    target = model.targets(ds)
    if model.metric_kind == "miou":
        return miou(pred, target)
    return segment_accuracy(pred, target)


def _shuffled(rng: Rng, n: int) -> np.ndarray:
    return np.argsort(rng.uniform((n,)), kind="stable")


def _cache_slices(cache: Optional[list[np.ndarray]], idx: np.ndarray, t_steps: int):
    rows = np.concatenate([np.arange(i * t_steps, (i + 1) * t_steps) for i in idx])
    return [layer[rows] for layer in cache]


def train(model, train_ds, cfg: TrainConfig, eval_ds=None) -> RunReport:
    """Adam training of the assembly's trainable parameters.

    Frozen-backbone assemblies reuse cached per-layer features (numerically
    identical to recomputation); the loop aborts on a non-finite loss.
    """
    report = RunReport(task=type(model).__name__, seed=cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = Rng(cfg.seed).derive("train")
    targets = model.targets(train_ds)
    t_steps = train_ds.visual.shape[1]
    n = len(train_ds)

    cache_v = cache_a = None
    if cfg.cache_features and model.supports_caching and model.backbone_frozen():
        cache_v, cache_a = model.extract_features(train_ds.visual, train_ds.audio)

    iter_secs: list[float] = []
    metric_ds = eval_ds if eval_ds is not None else train_ds
    for epoch in range(cfg.epochs):
        order = _shuffled(rng.derive(f"shuffle{epoch}"), n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            tgt = targets[idx]
            t0 = time.perf_counter()
            with ComputeGraph() as g:
                if cache_v is not None:
                    loss, _ = model.loss_from_features(
                        _cache_slices(cache_v, idx, t_steps),
                        _cache_slices(cache_a, idx, t_steps), tgt)
                else:
                    loss, _ = model.forward_loss(train_ds.visual[idx],
                                                 train_ds.audio[idx], tgt)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                grads = g.backward(loss)
            params = model.trainable()
            for name, t in opt.step(params, grads).items():
                model.replace(name, t)
            iter_secs.append(time.perf_counter() - t0)
            losses.append(float(loss.data))
        report.epochs.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "metric": evaluate_metric(model, metric_ds),
        })

    report.final_metric_train = evaluate_metric(model, train_ds)
    report.final_metric_eval = (evaluate_metric(model, eval_ds)
                                if eval_ds is not None else report.final_metric_train)
    report.retained_bytes, report.retained_total = _retained_snapshot(
        model, train_ds, cfg, cache_v, cache_a)
    per_sample = np.asarray(iter_secs) * 1000.0 / cfg.batch_size
    report.iter_ms_mean = float(per_sample.mean())
    report.iter_ms_sd = float(per_sample.std())
    report.trainable_params, report.total_params = model.param_counts()
    return report


def _retained_snapshot(model, ds, cfg: TrainConfig, cache_v, cache_a
                       ) -> tuple[dict[str, int], int]:
    idx = np.arange(min(cfg.batch_size, len(ds)))
    t_steps = ds.visual.shape[1]
    with ComputeGraph() as g:
        if cache_v is not None:
            loss, _ = model.loss_from_features(_cache_slices(cache_v, idx, t_steps),
                                               _cache_slices(cache_a, idx, t_steps),
                                               model.targets(ds)[idx])
        else:
            loss, _ = model.forward_loss(ds.visual[idx], ds.audio[idx],
                                         model.targets(ds)[idx])
        g.backward(loss)
        led = g.ledger_report()
    return dict(led.retained_bytes), led.total_bytes


@dataclass
class AuditResult:
    passed: bool
    backbone_gradients: list[str]
    backbone_retained_bytes: int

    def __bool__(self) -> bool:
        return self.passed


def gradient_flow_audit(model, visual: np.ndarray, audio: np.ndarray,
                        targets: np.ndarray) -> AuditResult:
    """PASS iff no backbone parameter receives a gradient and no
    backbone-tagged tensor is retained for backward."""
    with ComputeGraph() as g:
        loss, _ = model.forward_loss(visual, audio, targets)
        grads = g.backward(loss)
        led = g.ledger_report()
    offending = sorted(name for name, p in model.backbone_params().items()
                       if grads.get(p) is not None)
    backbone_bytes = led.retained_bytes["backbone"]
    return AuditResult(passed=not offending and backbone_bytes == 0,
                       backbone_gradients=offending,
                       backbone_retained_bytes=backbone_bytes)


@dataclass
class TopologyProfile:
    name: str
    retained_bytes: dict[str, int]
    retained_total: int
    iter_ms_mean: float
    iter_ms_sd: float
    trainable_params: int
    total_params: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params


@dataclass
class MemoryComparison:
    mettle: TopologyProfile
    adapter: TopologyProfile

    @property
    def retained_ratio(self) -> float:
        return self.mettle.retained_total / self.adapter.retained_total

    def rows(self) -> tuple[list[str], list[list]]:
        header = ["topology", "retained_backbone", "retained_adaptation",
                  "retained_head", "retained_data", "retained_total",
                  "iter_ms_mean", "iter_ms_sd", "trainable_params",
                  "total_params", "trainable_fraction"]
        rows = []
        for p in (self.mettle, self.adapter):
            rb = p.retained_bytes
            rows.append([p.name, rb["backbone"], rb["adaptation"], rb["head"],
                         rb["data"], p.retained_total, p.iter_ms_mean, p.iter_ms_sd,
                         p.trainable_params, p.total_params, p.trainable_fraction])
        return header, rows


def profile_topology(model, visual: np.ndarray, audio: np.ndarray,
                     targets: np.ndarray, iters: int, lr: float = 1e-3,
                     name: Optional[str] = None) -> TopologyProfile:
    """Retained bytes and per-iteration training wall time for one topology.

    Every iteration runs the full uncached pipeline (forward, backward, Adam)
    so both topologies are timed under identical rules."""
    opt = Adam(lr)
    times = []
    ledger: Optional[MemoryLedger] = None
    for _ in range(iters):
        t0 = time.perf_counter()
        with ComputeGraph() as g:
            loss, _ = model.forward_loss(visual, audio, targets)
            grads = g.backward(loss)
            if ledger is None:
                ledger = g.ledger_report()
        params = model.trainable()
        for pname, t in opt.step(params, grads).items():
            model.replace(pname, t)
        times.append(time.perf_counter() - t0)
    per_iter = np.asarray(times) * 1000.0 / visual.shape[0]
    trainable, total = model.param_counts()
    return TopologyProfile(
        name=name or type(model).__name__,
        retained_bytes=dict(ledger.retained_bytes),
        retained_total=ledger.total_bytes,
        iter_ms_mean=float(per_iter.mean()), iter_ms_sd=float(per_iter.std()),
        trainable_params=trainable, total_params=total)


def compare_memory(mettle_model, adapter_model, visual: np.ndarray,
                   audio: np.ndarray, targets: np.ndarray,
                   iters: int = 20) -> MemoryComparison:
    """Profile both topologies on identical inputs and assert the
    retained-byte ordering that motivates the frozen-tap design."""
    if mettle_model.backbone_cfg != adapter_model.backbone_cfg:
        raise ValueError("topologies must share one backbone config")
    prof_m = profile_topology(mettle_model, visual, audio, targets, iters,
                              name="mettle")
    prof_a = profile_topology(adapter_model, visual, audio, targets, iters,
                              name="adapter")
    if not prof_m.retained_total < prof_a.retained_total:
        raise NumericError(
            f"retained bytes not reduced: mettle {prof_m.retained_total} vs "
            f"adapter {prof_a.retained_total}")
    return MemoryComparison(mettle=prof_m, adapter=prof_a)


# --- ablation sweeps ---------------------------------------------------------

CLASSIFY_AXES = ("K", "R", "hierarchical_K", "TS", "DP", "avgpool_DP")
SEGMENT_AXES = ("cross", "intra", "order", "mti_placement")
ALL_AXES = CLASSIFY_AXES + SEGMENT_AXES

_BOOL = {"on": True, "off": False}


def parse_grid(axis: str, items: Sequence[str]) -> list:
    if axis not in ALL_AXES:
        raise ValueError(f"invalid axis {axis!r}; known: {', '.join(ALL_AXES)}")
    if not items:
        raise ValueError("empty grid")
    out = []
    for raw in items:
        raw = raw.strip()
        if axis in ("K", "R", "mti_placement"):
            out.append(int(raw))
        elif axis in ("TS", "DP", "avgpool_DP", "cross", "intra"):
            if raw not in _BOOL:
                raise ValueError(f"grid value {raw!r} must be on/off")
            out.append(_BOOL[raw])
        elif axis == "order":
            if raw not in ("cross_first", "intra_first"):
                raise ValueError(f"grid value {raw!r} must be cross_first/intra_first")
            out.append(raw)
        elif axis == "hierarchical_K":
            if raw == "uniform":
                out.append(None)
            else:
                out.append(tuple(int(v) for v in raw.split("-")))
    return out


def apply_axis(config: "configs.ExperimentConfig", axis: str, value):
    """Config copy with the ablation axis applied."""
    upd: dict = {}
    if axis == "K":
        upd = {"lcd": config.lcd.model_copy(update={"k_a": value, "k_v": value})}
    elif axis == "R":
        upd = {"lcd": config.lcd.model_copy(update={"r_a": value, "r_v": value})}
    elif axis == "hierarchical_K":
        per_stage = list(value) if value is not None else None
        upd = {"lcd": config.lcd.model_copy(update={"per_stage_k": per_stage})}
    elif axis == "TS":
        upd = {"lcd": config.lcd.model_copy(update={"enable_ts": value})}
    elif axis == "DP":
        upd = {"lcd": config.lcd.model_copy(update={"enable_dp": value})}
    elif axis == "avgpool_DP":
        upd = {"lcd": config.lcd.model_copy(update={
            "dp_mode": "avgpool" if value else "linear"})}
    elif axis == "cross":
        upd = {"mti": config.mti.model_copy(update={"enable_cross": value})}
    elif axis == "intra":
        upd = {"mti": config.mti.model_copy(update={"enable_intra": value})}
    elif axis == "order":
        upd = {"mti": config.mti.model_copy(update={"order": value})}
    elif axis == "mti_placement":
        upd = {"mti": config.mti.model_copy(update={"source_stage": value})}
    else:
        raise ValueError(f"invalid axis {axis!r}")
    return config.model_copy(update=upd)


def _setting_str(value) -> str:
    if value is None:
        return "uniform"
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return "-".join(str(v) for v in value)
    return str(value)


def ablate(config: "configs.ExperimentConfig", axis: str, grid: Sequence
           ) -> tuple[list[str], list[list]]:
    """One training run per grid setting; rows are CSV-ready."""
    if axis in CLASSIFY_AXES and config.task != "classify":
        raise ValueError(f"axis {axis!r} ablates the distillation pathway; "
                         f"use a classify task")
    if axis in SEGMENT_AXES and config.task == "classify":
        raise ValueError(f"axis {axis!r} ablates injection; use a segment task")
    if axis not in ALL_AXES:
        raise ValueError(f"invalid axis {axis!r}")
    seed = config.seed if config.seed is not None else 0
    header = ["axis", "setting", "final_metric", "trainable_params",
              "retained_bytes", "iter_ms_mean"]
    rows = []
    for value in grid:
        variant = apply_axis(config, axis, value)
        model = configs.build_model(variant, seed)
        train_ds, eval_ds = configs.build_datasets(variant, seed)
        tc = TrainConfig(lr=variant.train.lr, epochs=variant.train.epochs,
                         batch_size=variant.train.batch_size, seed=seed,
                         beta1=variant.train.beta1, beta2=variant.train.beta2,
                         eps=variant.train.eps,
                         cache_features=variant.train.cache_features)
        report = train(model, train_ds, tc, eval_ds)
        rows.append([axis, _setting_str(value), report.final_metric_eval,
                     report.trainable_params, report.retained_total,
                     report.iter_ms_mean])
    return header, rows
