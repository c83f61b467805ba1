"""Synthesize old-class images from a frozen segmentation model.

Starting from uniform noise, each image is optimized with Adam so that the
aggregated class scores of the teacher match a multi-hot target, under a
smoothness/energy prior and a penalty pulling per-image feature statistics
towards the teacher's batch-norm running statistics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import segnet
from .aggregation import AggregationSpec, DEFAULT_R_SET, pool_node, sample_r
from .numcore import AdamState, NonFiniteError, value_and_grad
from .numcore.ops import softmax

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class InversionConfig:
    steps: int = 300
    lr: float = 0.25
    batch: int = 8
    resolution: int = 64
    stop_loss: float = 0.05
    w_tv: float = 1e-2
    w_l2: float = 1e-4
    w_feat: float = 1e-2
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)
    # probability of 1, 2, ... target classes per image
    classes_per_image: dict = field(default_factory=lambda: {1: 0.6, 2: 0.3, 3: 0.1})

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0 or not self.stop_loss > 0:
            raise ValueError("lr and stop_loss must be positive")
        if min(self.w_tv, self.w_l2, self.w_feat) < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.batch < 1 or self.resolution < 1:
            raise ValueError("batch and resolution must be positive")
        if isinstance(self.aggregation, dict):
            self.aggregation = AggregationSpec(**self.aggregation)
        self.classes_per_image = {int(k): float(v) for k, v in self.classes_per_image.items()}


@dataclass
class FakeSample:
    image: np.ndarray
    target: np.ndarray  # multi-hot over the teacher's channels, background 0
    r: np.ndarray
    loss: float  # best objective reached
    cls_loss: float  # classification term at that image
    initial_cls_loss: float
    teacher_map: np.ndarray
    steps_run: int
    seed: int
    aborted: str | None = None

    def coverage(self, cls=None):
        """Fraction of pixels whose teacher argmax is ``cls`` (default: all targets)."""
        pred = self.teacher_map.argmax(axis=-1)
        classes = np.flatnonzero(self.target) if cls is None else [cls]
        return float(np.isin(pred, classes).mean())


# --- regularizers ----------------------------------------------------------------

def total_variation(x):
    """Squared-difference anisotropic TV over (..., H, W, C), divided by H*W."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    dv = np.diff(x, axis=-3)
    dh = np.diff(x, axis=-2)
    return (np.square(dv).sum(axis=(-3, -2, -1)) + np.square(dh).sum(axis=(-3, -2, -1))) / (h * w)


def image_prior(x, w_tv=1e-2, w_l2=1e-4):
    """w_tv * TV(x) + w_l2 * ||x||^2, both divided by the pixel count."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    l2 = np.square(x).sum(axis=(-3, -2, -1)) / (h * w)
    return w_tv * total_variation(x) + w_l2 * l2


def feature_reg(batch_stats, running_stats):
    """Sum over layers of squared distances between batch and running (mean, var)."""
    if len(batch_stats) != len(running_stats):
        raise ValueError(f"{len(batch_stats)} batch layers vs {len(running_stats)} running layers")
    total = 0.0
    for (mb, vb), (mr, vr) in zip(batch_stats, running_stats):
        total = total + np.square(np.asarray(mb) - mr).sum(axis=-1) \
            + np.square(np.asarray(vb) - vr).sum(axis=-1)
    return total


def running_stats(model):
    return [(model.running[f"bn{i}.mean"], model.running[f"bn{i}.var"])
            for i in range(model.arch.blocks)]


# --- objective -------------------------------------------------------------------

def cls_loss_value(yhat, target, fg_from=1):
    """Binary cross-entropy over foreground channels, divided by the target count."""
    yhat = np.asarray(yhat, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    y, t = yhat[..., fg_from:], target[..., fg_from:]
    bce = -(t * np.log(np.maximum(y, LOG_FLOOR)) + (1 - t) * np.log(np.maximum(1 - y, LOG_FLOOR)))
    return bce.sum(axis=-1) / np.maximum(t.sum(axis=-1), 1.0)


@dataclass
class _Objective:
    net: segnet.NetGraph
    per_image: int  # (N,) objective
    cls: int  # (N,) classification term
    total: int  # scalar seed
    yhat: int


def _build_objective(model, targets, r, config: InversionConfig):
    """Per-image objective graph for a batch with multi-hot ``targets`` (N, C)."""
    net = segnet.build_graph(model, "eval", stats_axes=(1, 2))
    g = net.graph
    agg = config.aggregation
    scores = net.probs if agg.on == "prob" else net.logits
    yhat = pool_node(g, scores, agg, g.const(r) if agg.kind == "SAA" else None)
    if agg.on == "logits":
        yhat = g.sigmoid(yhat)
    targets = np.asarray(targets, dtype=np.float64)
    fg = np.ones(targets.shape[-1])
    fg[0] = 0.0
    n_targets = np.maximum(targets[:, 1:].sum(axis=-1), 1.0)
    pos = g.log(yhat, floor=LOG_FLOOR)
    neg = g.log(g.sub(g.const(1.0), yhat), floor=LOG_FLOOR)
    bce = g.add(g.mul(pos, g.const(targets)), g.mul(neg, g.const((1.0 - targets) * fg)))
    cls = g.div(g.scale(g.sum(bce, axis=-1), factor=-1.0), g.const(n_targets))
    terms = [cls]
    x = net.image
    hw = float(config.resolution * config.resolution)
    if config.w_tv:
        dv = g.sub(g.index(x, index=(slice(None), slice(1, None))), g.index(x, index=(slice(None), slice(None, -1))))
        dh = g.sub(g.index(x, index=(slice(None), slice(None), slice(1, None))),
                   g.index(x, index=(slice(None), slice(None), slice(None, -1))))
        tv = g.add(g.sum(g.square(dv), axis=(1, 2, 3)), g.sum(g.square(dh), axis=(1, 2, 3)))
        terms.append(g.scale(tv, factor=config.w_tv / hw))
    if config.w_l2:
        terms.append(g.scale(g.sum(g.square(x), axis=(1, 2, 3)), factor=config.w_l2 / hw))
    if config.w_feat:
        for (m, v), (mr, vr) in zip(net.stats, running_stats(model)):
            dm = g.sum(g.square(g.sub(m, g.const(mr))), axis=-1)
            dv_ = g.sum(g.square(g.sub(v, g.const(vr))), axis=-1)
            terms.append(g.scale(g.add(dm, dv_), factor=config.w_feat))
    per_image = terms[0]
    for t in terms[1:]:
        per_image = g.add(per_image, t)
    total = g.sum(per_image)
    return _Objective(net, per_image, cls, total, yhat)


def inversion_loss(model, x, y, r, config: InversionConfig | None = None):
    """Objective value for one image ``x`` (H, W, 3) and multi-hot target ``y``."""
    config = InversionConfig(resolution=x.shape[0]) if config is None else config
    if config.aggregation.kind == "SAA" and np.any(np.asarray(r) <= 0):
        raise ValueError("r must be positive")
    obj = _build_objective(model, np.asarray(y)[None], np.broadcast_to(r, (1, len(y))).copy(), config)
    vals = segnet.evaluate(obj.net.graph, segnet.bind(obj.net, model, np.asarray(x)[None]), [obj.total])
    return float(vals[obj.total])


def objective_graph(model, targets, r, config):
    """Expose the objective graph (used by gradient checks)."""
    return _build_objective(model, targets, r, config)


# --- targets and the optimization loop -------------------------------------------

def sample_targets(rng, num_channels, count, classes_per_image=None):
    """Multi-hot targets over foreground channels 1..num_channels-1."""
    weights = classes_per_image or {1: 1.0}
    ks = sorted(weights)
    p = np.array([weights[k] for k in ks], dtype=float)
    out = np.zeros((count, num_channels))
    fg = np.arange(1, num_channels)
    for i in range(count):
        k = min(ks[rng.choice(len(ks), p=p / p.sum())], len(fg))
        out[i, rng.choice(fg, size=k, replace=False)] = 1.0
    return out


def _prepare(teacher, targets, config, seed):
    children = np.random.SeedSequence(seed).spawn(len(targets))
    agg = config.aggregation
    res = config.resolution
    xs, rs = [], []
    for child in children:
        rng = np.random.default_rng(child)
        xs.append(rng.uniform(0.0, 1.0, size=(res, res, teacher.arch.in_channels)))
        if agg.r is not None:
            rs.append(np.full(teacher.num_classes, float(agg.r)))
        else:
            rs.append(sample_r(rng, agg.r_set, teacher.num_classes))
    return np.stack(xs), np.stack(rs)


def _run_chunk(teacher, x, targets, r, config):
    n = len(x)
    best_loss = np.full(n, np.inf)
    best_x = x.copy()
    best_cls = np.zeros(n)
    first_cls = np.zeros(n)
    steps_run = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    opt = AdamState(lr=config.lr)
    for it in range(config.steps + 1):
        obj = _build_objective(teacher, targets[active], r[active], config)
        inputs = segnet.bind(obj.net, teacher, x[active])
        values, grads = value_and_grad(obj.net.graph, inputs, obj.total, wrt=[obj.net.image])
        per = values[obj.per_image]
        cls = values[obj.cls]
        if it == 0:
            first_cls[active] = cls
        improved = per < best_loss[active]
        idx = active[improved]
        best_loss[idx] = per[improved]
        best_cls[idx] = cls[improved]
        best_x[idx] = x[idx]
        steps_run[active] = it
        keep = per >= config.stop_loss
        if it == config.steps:
            break
        active = active[keep]
        if not len(active):
            break
        grad = grads[obj.net.image][keep]
        # Adam on the remaining images; moments are per pixel so images stay independent
        t = it + 1
        m[active] = opt.beta1 * m[active] + (1 - opt.beta1) * grad
        v[active] = opt.beta2 * v[active] + (1 - opt.beta2) * grad * grad
        step = opt.lr * (m[active] / (1 - opt.beta1 ** t)) / (np.sqrt(v[active] / (1 - opt.beta2 ** t)) + opt.eps)
        x[active] = np.clip(x[active] - step, 0.0, 1.0)
    return best_x, best_loss, best_cls, first_cls, steps_run


def invert(teacher, targets, config: InversionConfig, seed=0):
    """Optimize one image per target; returns a list of :class:`FakeSample`.

    The teacher is only evaluated (eval mode), never modified.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or len(targets) == 0:
        raise ValueError("targets must be a non-empty (count, channels) array")
    if targets.shape[1] != teacher.num_classes:
        raise ValueError(f"targets have {targets.shape[1]} channels, teacher has {teacher.num_classes}")
    if np.any(targets[:, 0] != 0):
        raise ValueError("background cannot be an inversion target")
    if np.any(targets[:, 1:].sum(axis=1) < 1):
        raise ValueError("every target needs at least one foreground class")
    x0, r = _prepare(teacher, targets, config, seed)
    samples = {}
    for start in range(0, len(targets), config.batch):
        sl = slice(start, start + config.batch)
        try:
            chunks = [(np.arange(sl.start, min(sl.stop, len(targets))),
                       _run_chunk(teacher, x0[sl].copy(), targets[sl], r[sl], config))]
        except NonFiniteError:
            # isolate the failing image(s)
            chunks = []
            for i in range(sl.start, min(sl.stop, len(targets))):
                try:
                    chunks.append((np.array([i]), _run_chunk(teacher, x0[i:i + 1].copy(),
                                                             targets[i:i + 1], r[i:i + 1], config)))
                except NonFiniteError as exc:
                    log.warning("inversion of sample %d aborted: %s", i, exc)
                    samples[i] = FakeSample(x0[i], targets[i], r[i], float("nan"), float("nan"),
                                            float("nan"), np.zeros(x0[i].shape[:2] + (teacher.num_classes,)),
                                            0, seed, aborted=str(exc))
        for ids, (bx, bl, bc, fc, sr) in chunks:
            maps = segnet.forward(teacher, bx)
            for j, i in enumerate(ids):
                samples[int(i)] = FakeSample(bx[j], targets[i], r[i], float(bl[j]), float(bc[j]),
                                             float(fc[j]), maps[j], int(sr[j]), seed)
    return [samples[i] for i in range(len(targets))]
