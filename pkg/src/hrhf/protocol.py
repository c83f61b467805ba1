"""Multi-step incremental training, the baselines, and mIoU reports."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import segnet
from .dataset import IGNORE, Scene, StepSpec, full_label, relabel_for_step, split_incremental
from .distill import (DistillConfig, MixedSampler, Pool, SampleBatch, StepResult, hrhf_train_step,
                      label_merge, random_crop, supervised_step)
from .inversion import InversionConfig, invert, sample_targets
from .numcore import AdamState

log = logging.getLogger(__name__)

METHODS = ("HRHF", "FT", "Joint", "NoiseReplay", "HRHF_noKD", "HRHF_noFake")
# methods that replay a pool of old-class images next to the real data
_REPLAY = ("HRHF", "NoiseReplay", "HRHF_noKD")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8
    crop: int | None = 32  # random square crops for training; None uses full images

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("invalid training config")
        if self.crop is not None and self.crop < 1:
            raise ValueError("crop must be positive")


@dataclass
class RunPlan:
    step_spec: StepSpec
    method: str = "HRHF"
    arch: segnet.Arch = field(default_factory=segnet.Arch)
    initial: TrainConfig = field(default_factory=TrainConfig)
    incremental: DistillConfig = field(default_factory=DistillConfig)
    crop: int | None = 32
    inversion: InversionConfig | None = None
    fake_factor: float = 2.0  # fake pool size relative to the real step data
    fake_max: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method in ("HRHF", "HRHF_noKD") and self.inversion is None:
            raise ValueError(f"method {self.method} needs an inversion config")
        if self.fake_factor < 0:
            raise ValueError("fake_factor must be >= 0")

    def distill_config(self):
        if self.method == "HRHF_noKD":
            return dataclasses.replace(self.incremental, lam=0.0)
        return self.incremental

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["step_spec"] = {"steps": [list(s) for s in self.step_spec.steps], "mode": self.step_spec.mode}
        return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    if dataclasses.is_dataclass(obj):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    text = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --- evaluation ----------------------------------------------------------------

def confusion_matrix(gt, pred, num_classes, ignore=IGNORE):
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    keep = gt != ignore
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm):
    """Per-class IoU, NaN where the class appears in neither gt nor prediction."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def _group_mean(iou, channels):
    vals = [iou[c] for c in channels if not np.isnan(iou[c])]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class MetricsReport:
    step: int
    method: str
    class_ids: list  # global class id of every channel
    iou: list  # per channel; None when the union is empty
    groups: dict  # background / old / new / all mean IoU
    seed: int = 0
    config_hash: str = ""
    history: list = field(default_factory=list)

    def to_dict(self):
        return _jsonable(dataclasses.asdict(self))

    def to_json(self):
        def clean(v):
            if isinstance(v, float) and np.isnan(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(self.to_dict()), sort_keys=True, indent=1)

    @property
    def old(self):
        return self.groups["old"]

    @property
    def new(self):
        return self.groups["new"]

    @property
    def all(self):
        return self.groups["all"]


def evaluate_arrays(pred, gt, num_classes, old_channels, new_channels):
    cm = confusion_matrix(gt, pred, num_classes)
    iou = iou_from_confusion(cm)
    groups = {
        "background": _group_mean(iou, [0]),
        "old": _group_mean(iou, old_channels),
        "new": _group_mean(iou, new_channels),
        "all": _group_mean(iou, range(num_classes)),
    }
    return iou, groups


def evaluate(model, scenes, step_spec: StepSpec, step=None, method="", seed=0, config_hash=""):
    """mIoU report of ``model`` against the full ground truth of ``scenes``.

    Old classes are the foreground classes of earlier steps, new classes those
    of ``step`` (at step 0 every foreground class is new); ``all`` averages
    background and every seen class.
    """
    step = model.step if step is None else step
    order = step_spec.class_order(step)
    if model.num_classes != len(order):
        raise ValueError(f"model has {model.num_classes} channels, step {step} needs {len(order)}")
    n_old = step_spec.old_count(step) if step > 0 else 1
    images = np.stack([s.image for s in scenes])
    gt = np.stack([full_label(s.label, step_spec, step) for s in scenes])
    pred = segnet.predict(model, images)
    old = list(range(1, n_old))
    new = list(range(n_old, len(order)))
    iou, groups = evaluate_arrays(pred, gt, len(order), old, new)
    return MetricsReport(step, method, list(order), [None if np.isnan(v) else float(v) for v in iou],
                         groups, seed, config_hash)


# --- training ------------------------------------------------------------------

def _step_arrays(scenes, step_spec, step, full=False):
    images = np.stack([s.image for s in scenes])
    if full:
        labels = np.stack([full_label(s.label, step_spec, step) for s in scenes])
    else:
        labels = np.stack([relabel_for_step(s.label, step_spec, step) for s in scenes])
    return images, labels


def _check(result: StepResult, what):
    if not result.accepted:
        raise DivergenceError(f"non-finite loss during {what}")


def _epoch_means(results):
    return {"kd": float(np.mean([r.kd for r in results])),
            "seg": float(np.mean([r.seg for r in results])),
            "all": float(np.mean([r.loss for r in results]))}


def train_supervised(model, images, labels, config: TrainConfig, rng, what="training"):
    """Plain cross-entropy training; returns (model, per-epoch mean losses)."""
    if len(images) == 0:
        raise ValueError("no training data")
    opt = AdamState(lr=config.lr)
    history = []
    for _ in range(config.epochs):
        perm = rng.permutation(len(images))
        results = []
        # drop the last partial batch unless it is the only one
        n_batches = max(len(perm) // config.batch_size, 1)
        for b in range(n_batches):
            idx = np.sort(perm[b * config.batch_size:(b + 1) * config.batch_size])
            x, y, _ = random_crop(images[idx], labels[idx], config.crop, rng)
            res, opt = supervised_step(model, x, y, opt)
            _check(res, what)
            results.append(res)
        history.append(_epoch_means(results))
    return model, history


def train_initial(plan: RunPlan, scenes, seed=None):
    """Step-0 model trained on step-0 labels."""
    if not scenes:
        raise ValueError("step-0 data is empty")
    seed = plan.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    model = segnet.init_model(plan.arch, plan.step_spec.num_classes(0), rng)
    images, labels = _step_arrays(scenes, plan.step_spec, 0)
    return train_supervised(model, images, labels, plan.initial, rng, "step 0")


def build_fake_pool(plan: RunPlan, teacher, count, rng, seed):
    """Synthetic replay pool (inverted or noise) with cached teacher maps."""
    if count == 0:
        return None, []
    res = plan.inversion.resolution if plan.inversion is not None else (plan.crop or 64)
    if plan.method == "NoiseReplay":
        images = rng.uniform(0.0, 1.0, size=(count, res, res, teacher.arch.in_channels))
        maps = segnet.forward(teacher, images)
        return Pool(images, np.zeros(images.shape[:3], dtype=np.int64), maps), []
    targets = sample_targets(rng, teacher.num_classes, count, plan.inversion.classes_per_image)
    samples = [s for s in invert(teacher, targets, plan.inversion, seed=seed) if s.aborted is None]
    if not samples:
        return None, []
    images = np.stack([s.image for s in samples])
    maps = np.stack([s.teacher_map for s in samples])
    return Pool(images, np.zeros(images.shape[:3], dtype=np.int64), maps), samples


def _crop_pool(pool: Pool, idx, size, rng):
    sub = pool.take(idx)
    x, y, t = random_crop(sub.images, sub.labels, size, rng, teacher=sub.teacher)
    return x, y, t


def run_step(plan: RunPlan, teacher, scenes, step, seed=None):
    """Train the step-``step`` model from ``teacher``; returns (model, info)."""
    if step < 1:
        raise ValueError("incremental steps start at 1")
    seed = plan.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    n_new = len(plan.step_spec.steps[step])
    student = segnet.head_expand(teacher, n_new, rng)
    images, labels = _step_arrays(scenes, plan.step_spec, step)
    cfg = plan.distill_config()
    info = {"fake": 0, "history": []}
    if len(images) == 0:
        raise ValueError(f"step {step} has no data")
    if plan.method == "FT":
        train_cfg = TrainConfig(cfg.epochs, cfg.lr, cfg.batch_size, plan.crop)
        _, info["history"] = train_supervised(student, images, labels, train_cfg, rng, f"step {step}")
        return student, info

    fake_pool = None
    if plan.method in _REPLAY:
        count = int(round(plan.fake_factor * len(images)))
        if plan.fake_max is not None:
            count = min(count, plan.fake_max)
        fake_pool, samples = build_fake_pool(plan, teacher, count, rng, seed=[seed, step])
        info["fake"] = 0 if fake_pool is None else len(fake_pool)
        info["inversion_loss"] = [s.loss for s in samples]
    real_pool = Pool(images, labels, segnet.forward(teacher, images))
    sampler = MixedSampler(len(real_pool), 0 if fake_pool is None else len(fake_pool), cfg, rng)
    opt = AdamState(lr=cfg.lr)
    for _ in range(cfg.epochs):
        results = []
        for real_idx, fake_idx in sampler.epoch():
            xr, yr, tr = _crop_pool(real_pool, np.sort(real_idx), plan.crop, rng)
            parts = [(xr, yr, tr)]
            if len(fake_idx):
                parts.append(_crop_pool(fake_pool, fake_idx, xr.shape[1], rng))
            x = np.concatenate([p[0] for p in parts])
            y = np.concatenate([p[1] for p in parts])
            t = np.concatenate([p[2] for p in parts])
            is_real = np.arange(len(x)) < len(xr)
            batch = SampleBatch(x, is_real, y, t, label_merge(t, y))
            res, opt = hrhf_train_step(teacher, student, batch, cfg, opt)
            _check(res, f"step {step}")
            results.append(res)
        info["history"].append(_epoch_means(results))
    return student, info


def train_joint(plan: RunPlan, scenes, upto=None, seed=None):
    """Offline upper bound: one model on every class up to ``upto`` at once."""
    upto = len(plan.step_spec.steps) - 1 if upto is None else upto
    seed = plan.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    model = segnet.init_model(plan.arch, plan.step_spec.num_classes(upto), rng)
    model.step = upto
    images, labels = _step_arrays(scenes, plan.step_spec, upto, full=True)
    return train_supervised(model, images, labels, plan.initial, rng, "joint")


def step_data(scenes, step_spec: StepSpec):
    return [[scenes[i] for i in idx] for idx in split_incremental(scenes, step_spec)]


def run_plan(plan: RunPlan, train_scenes, test_scenes, initial=None):
    """Run every step of ``plan``; returns (final model, reports per step).

    ``initial`` optionally supplies a trained step-0 model (it is copied).
    """
    h = config_hash(plan)
    if plan.method == "Joint":
        model, hist = train_joint(plan, train_scenes)
        rep = evaluate(model, test_scenes, plan.step_spec, method=plan.method, seed=plan.seed, config_hash=h)
        rep.history = hist
        return model, [rep]
    data = step_data(train_scenes, plan.step_spec)
    if initial is None:
        model, hist = train_initial(plan, data[0])
    else:
        model, hist = initial.copy(), []
    reports = [evaluate(model, test_scenes, plan.step_spec, 0, plan.method, plan.seed, h)]
    reports[0].history = hist
    for t in range(1, len(plan.step_spec.steps)):
        model, info = run_step(plan, model, data[t], t)
        rep = evaluate(model, test_scenes, plan.step_spec, t, plan.method, plan.seed, h)
        rep.history = info["history"]
        reports.append(rep)
    return model, reports
