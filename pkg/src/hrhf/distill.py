"""Half-real half-fake distillation: losses, label construction, batching, updates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import segnet
from .dataset import IGNORE
from .numcore import AdamState, NonFiniteError, adam_step, value_and_grad

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class DistillConfig:
    lam: float = 1.0
    ratio: tuple = (1, 1)  # real : fake
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 20
    kd_on: str = "both"  # which samples the distillation term covers

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if len(self.ratio) != 2 or any(int(r) != r or r <= 0 for r in self.ratio):
            raise ValueError("ratio parts must be positive integers")
        if self.kd_on not in ("both", "real", "fake"):
            raise ValueError(f"kd_on must be both, real or fake, got {self.kd_on!r}")
        self.ratio = tuple(int(r) for r in self.ratio)


# --- label and probability bookkeeping ---------------------------------------

def rearrange_matrix(num_classes, old_count):
    """0/1 matrix folding channels >= old_count into background (channel 0)."""
    if not 0 < old_count <= num_classes:
        raise ValueError(f"cannot fold {num_classes} channels into {old_count}")
    m = np.zeros((num_classes, old_count))
    m[np.arange(old_count), np.arange(old_count)] = 1.0
    m[old_count:, 0] = 1.0
    return m


def probability_rearrange(s_t, old_count):
    """Add new-class probabilities to background and keep the old channels."""
    s_t = np.asarray(s_t, dtype=np.float64)
    if not 0 < old_count <= s_t.shape[-1]:
        raise ValueError(f"old_count {old_count} incompatible with {s_t.shape[-1]} channels")
    out = s_t[..., :old_count].copy()
    out[..., 0] += s_t[..., old_count:].sum(axis=-1)
    return out


def label_merge(teacher_map, new_labels, ignore=IGNORE):
    """Argmax over [teacher probabilities | one-hot of new classes].

    ``new_labels`` uses channel indices: 0 for background, ``old + j`` for the
    j-th new class.  Ties resolve to the highest channel, so annotated pixels
    win even against a saturated teacher.
    """
    teacher_map = np.asarray(teacher_map, dtype=np.float64)
    new_labels = np.asarray(new_labels)
    if teacher_map.shape[:-1] != new_labels.shape:
        raise ValueError(f"teacher map {teacher_map.shape} and labels {new_labels.shape} differ")
    old = teacher_map.shape[-1]
    valid = new_labels != ignore
    top = int(new_labels[valid].max()) if valid.any() else 0
    n_new = max(top - old + 1, 0)
    onehot = np.zeros(new_labels.shape + (n_new,))
    for j in range(n_new):
        onehot[..., j] = new_labels == old + j
    concat = np.concatenate([teacher_map, onehot], axis=-1)
    c = concat.shape[-1]
    merged = c - 1 - concat[..., ::-1].argmax(axis=-1)
    return np.where(valid, merged, ignore)


def one_hot(labels, num_classes, ignore=IGNORE):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,))
    valid = labels != ignore
    if np.any(labels[valid] >= num_classes):
        raise ValueError("label index out of range")
    idx = np.where(valid, labels, 0)
    np.put_along_axis(out, idx[..., None], valid[..., None].astype(np.float64), axis=-1)
    return out


def kd_loss(teacher, student, pixel_weights=None):
    """Pixel-averaged cross-entropy of ``student`` against soft ``teacher`` maps."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    ce = -(teacher * np.log(np.maximum(student, LOG_FLOOR))).sum(axis=-1)
    if pixel_weights is None:
        return float(ce.mean())
    w = np.broadcast_to(pixel_weights, ce.shape)
    return float((ce * w).sum() / w.sum()) if w.sum() > 0 else 0.0


def seg_loss(labels, s_t, ignore=IGNORE):
    """Pixel-averaged cross-entropy against hard labels, ignored pixels excluded."""
    s_t = np.asarray(s_t, dtype=np.float64)
    labels = np.asarray(labels)
    valid = labels != ignore
    if not valid.any():
        return 0.0
    picked = np.take_along_axis(s_t, np.where(valid, labels, 0)[..., None], axis=-1)[..., 0]
    return float(-np.log(np.maximum(picked[valid], LOG_FLOOR)).sum() / valid.sum())


# --- graph versions ------------------------------------------------------------

def kd_node(g, teacher, rearranged, pixel_weights=None):
    """Add the distillation loss; ``teacher`` and weights are constants."""
    logs = g.log(rearranged, floor=LOG_FLOOR)
    ce = g.sum(g.mul(logs, g.const(teacher)), axis=-1)
    if pixel_weights is None:
        return g.scale(g.mean(ce), factor=-1.0)
    w = np.broadcast_to(pixel_weights, np.asarray(teacher).shape[:-1]).astype(np.float64)
    total = float(w.sum())
    if total == 0:
        return g.scale(g.sum(ce), factor=0.0)
    return g.scale(g.sum(g.mul(ce, g.const(w))), factor=-1.0 / total)


def seg_node(g, labels, probs, num_classes, ignore=IGNORE):
    """Add the segmentation loss against hard ``labels`` (constant)."""
    target = one_hot(labels, num_classes, ignore)
    count = float((np.asarray(labels) != ignore).sum())
    logs = g.log(probs, floor=LOG_FLOOR)
    return g.scale(g.sum(g.mul(logs, g.const(target))), factor=-1.0 / max(count, 1.0))


# --- batching ------------------------------------------------------------------

@dataclass
class Pool:
    """Images with channel-space labels and optional cached teacher maps."""

    images: np.ndarray
    labels: np.ndarray
    teacher: np.ndarray | None = None

    def __len__(self):
        return len(self.images)

    def take(self, idx):
        return Pool(self.images[idx], self.labels[idx],
                    None if self.teacher is None else self.teacher[idx])


@dataclass
class SampleBatch:
    images: np.ndarray
    is_real: np.ndarray
    new_labels: np.ndarray
    teacher: np.ndarray | None = None
    merged: np.ndarray | None = None


def split_counts(batch_size, ratio):
    a, b = ratio
    real = math.ceil(batch_size * a / (a + b))
    return real, batch_size - real


def _assemble(real, fake):
    parts = [p for p in (real, fake) if p is not None and len(p)]
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    teacher = None
    if all(p.teacher is not None for p in parts):
        teacher = np.concatenate([p.teacher for p in parts])
    is_real = np.zeros(len(images), dtype=bool)
    is_real[: len(real) if real is not None else 0] = True
    return SampleBatch(images, is_real, labels, teacher)


def make_batch(real_pool: Pool, fake_pool: Pool | None, config: DistillConfig, rng):
    """One mixed batch: ceil(batch * a / (a + b)) real samples, the rest fake."""
    n_real, n_fake = split_counts(config.batch_size, config.ratio)
    if n_fake and (fake_pool is None or len(fake_pool) == 0):
        log.warning("fake pool is empty; using an all-real batch")
        n_real, n_fake = config.batch_size, 0
    if n_real and len(real_pool) == 0:
        raise ValueError("real pool is empty")
    real = real_pool.take(np.sort(rng.choice(len(real_pool), size=min(n_real, len(real_pool)), replace=False)))
    fake = None
    if n_fake:
        fake = fake_pool.take(np.sort(rng.choice(len(fake_pool), size=min(n_fake, len(fake_pool)), replace=False)))
    return _assemble(real, fake)


class MixedSampler:
    """Epochs over the real pool, each batch topped up with fake samples.

    Real samples are drawn without replacement within an epoch; fake samples
    cycle through a reshuffled permutation of the fake pool.
    """

    def __init__(self, n_real, n_fake, config: DistillConfig, rng):
        self.n_real, self.n_fake, self.rng = n_real, n_fake, rng
        self.real_per, self.fake_per = split_counts(config.batch_size, config.ratio)
        if n_fake == 0:
            if self.fake_per:
                log.warning("fake pool is empty; training on all-real batches")
            self.real_per, self.fake_per = config.batch_size, 0
        self._fake_queue = []

    def _next_fake(self, k):
        out = []
        while len(out) < k:
            if not self._fake_queue:
                self._fake_queue = list(self.rng.permutation(self.n_fake))
            out.append(self._fake_queue.pop(0))
        return np.array(out, dtype=np.int64)

    def epoch(self):
        perm = self.rng.permutation(self.n_real)
        n_batches = max(self.n_real // self.real_per, 1)
        for b in range(n_batches):
            real_idx = perm[b * self.real_per:(b + 1) * self.real_per]
            yield real_idx, self._next_fake(self.fake_per)


def random_crop(images, labels, size, rng, teacher=None):
    """Same random crop window per sample for images, labels (and teacher maps)."""
    if size is None or size >= images.shape[1]:
        return images, labels, teacher
    n, h, w = images.shape[:3]
    ys = rng.integers(0, h - size + 1, size=n)
    xs = rng.integers(0, w - size + 1, size=n)
    ci = np.stack([images[i, y:y + size, x:x + size] for i, (y, x) in enumerate(zip(ys, xs))])
    cl = np.stack([labels[i, y:y + size, x:x + size] for i, (y, x) in enumerate(zip(ys, xs))])
    ct = None
    if teacher is not None:
        ct = np.stack([teacher[i, y:y + size, x:x + size] for i, (y, x) in enumerate(zip(ys, xs))])
    return ci, cl, ct


# --- updates -------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    kd: float
    seg: float
    accepted: bool = True


def _apply(student, net, grads, opt):
    names = list(net.params)
    params = [student.params[n] for n in names]
    new_params, opt = adam_step(params, [grads[net.params[n]] for n in names], opt)
    for n, p in zip(names, new_params):
        student.params[n] = p
    return opt


def supervised_step(model, images, labels, opt: AdamState):
    """One Adam step of plain per-pixel cross-entropy (train-mode batchnorm)."""
    net = segnet.build_graph(model, "train")
    g = net.graph
    loss = seg_node(g, labels, net.probs, model.num_classes)
    try:
        values, grads = value_and_grad(g, segnet.bind(net, model, images), loss,
                                       wrt=list(net.params.values()))
        opt = _apply(model, net, grads, opt)
    except NonFiniteError as exc:
        log.warning("rejected non-finite supervised step: %s", exc)
        return StepResult(float("nan"), 0.0, float("nan"), False), opt
    segnet.update_running(model, [(values[m], values[v]) for m, v in net.stats])
    val = float(values[loss])
    return StepResult(val, 0.0, val), opt


def kd_weights(is_real, kd_on):
    if kd_on == "both":
        return np.ones(len(is_real))
    return (is_real if kd_on == "real" else ~is_real).astype(np.float64)


def loss_graph(student, teacher_maps, merged, is_real, config: DistillConfig):
    """Train-mode student graph with the KD, segmentation and combined loss nodes.

    Returns ``(net, kd, seg, total)`` where ``total = lam * kd + seg``.
    """
    old = teacher_maps.shape[-1]
    net = segnet.build_graph(student, "train")
    g = net.graph
    rearranged = g.matmul(net.probs, g.const(rearrange_matrix(student.num_classes, old)))
    pix = kd_weights(np.asarray(is_real), config.kd_on)[:, None, None]
    kd = kd_node(g, teacher_maps, rearranged, pix)
    seg = seg_node(g, merged, net.probs, student.num_classes)
    total = g.add(g.scale(kd, factor=float(config.lam)), seg)
    return net, kd, seg, total


def hrhf_train_step(teacher, student, batch: SampleBatch, config: DistillConfig, opt: AdamState):
    """One update of ``student`` on lambda * KD + segmentation loss.

    The teacher only runs in eval mode.  The student and ``opt`` are updated
    only when the loss and gradients are finite; otherwise the step is
    rejected and nothing changes.
    """
    old = teacher.num_classes
    t_maps = batch.teacher if batch.teacher is not None else segnet.forward(teacher, batch.images)
    if t_maps.shape[-1] != old:
        raise ValueError("teacher maps do not match the teacher head")
    merged = batch.merged if batch.merged is not None else label_merge(t_maps, batch.new_labels)
    net, kd, seg, total = loss_graph(student, t_maps, merged, batch.is_real, config)
    try:
        values, grads = value_and_grad(net.graph, segnet.bind(net, student, batch.images), total,
                                       wrt=list(net.params.values()))
        opt = _apply(student, net, grads, opt)
    except NonFiniteError as exc:
        log.warning("rejected non-finite distillation step: %s", exc)
        return StepResult(float("nan"), float("nan"), float("nan"), False), opt
    segnet.update_running(student, [(values[m], values[v]) for m, v in net.stats])
    return StepResult(float(values[total]), float(values[kd]), float(values[seg])), opt
