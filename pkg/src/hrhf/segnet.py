"""Toy stride-1 fully convolutional segmentation network.

Layout: ``blocks`` x (3x3 conv -> batchnorm -> relu), then a 1x1 conv head to
``num_classes`` channels and a per-pixel softmax.  Images are NHWC float64.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import Graph, evaluate

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Arch:
    in_channels: int = 3
    width: int = 16
    blocks: int = 4
    kernel: int = 3

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelState:
    arch: Arch
    num_classes: int
    params: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)
    step: int = 0

    def copy(self):
        return copy.deepcopy(self)

    def param_names(self):
        return list(self.params)

    def equals(self, other):
        """Bit-level equality of architecture, parameters and running stats."""
        if (self.arch, self.num_classes, self.step) != (other.arch, other.num_classes, other.step):
            return False
        for mine, theirs in ((self.params, other.params), (self.running, other.running)):
            if list(mine) != list(theirs):
                return False
            for k in mine:
                a, b = mine[k], theirs[k]
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def param_shapes(arch: Arch, num_classes: int):
    shapes = {}
    cin = arch.in_channels
    for i in range(arch.blocks):
        shapes[f"conv{i}.w"] = (arch.kernel, arch.kernel, cin, arch.width)
        shapes[f"bn{i}.gamma"] = (arch.width,)
        shapes[f"bn{i}.beta"] = (arch.width,)
        cin = arch.width
    shapes["head.w"] = (cin, num_classes)
    shapes["head.b"] = (num_classes,)
    return shapes


def param_count(arch: Arch, num_classes: int) -> int:
    return int(sum(np.prod(s) for s in param_shapes(arch, num_classes).values()))


def init_model(arch: Arch, num_classes: int, rng) -> ModelState:
    params = {}
    for name, shape in param_shapes(arch, num_classes).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(".beta") or name == "head.b":
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    running = {}
    for i in range(arch.blocks):
        running[f"bn{i}.mean"] = np.zeros(arch.width)
        running[f"bn{i}.var"] = np.ones(arch.width)
    return ModelState(arch, num_classes, params, running, step=0)


def head_expand(model: ModelState, new_class_count: int, rng=None, sigma=0.01) -> ModelState:
    """Student initialization: copy everything, append ``new_class_count`` head channels."""
    if new_class_count < 0:
        raise ValueError("new_class_count must be non-negative")
    student = model.copy()
    if new_class_count == 0:
        return student
    if rng is None:
        rng = np.random.default_rng(0)
    w, b = model.params["head.w"], model.params["head.b"]
    student.params["head.w"] = np.concatenate(
        [w, rng.normal(0.0, sigma, size=(w.shape[0], new_class_count))], axis=1)
    student.params["head.b"] = np.concatenate([b, rng.normal(0.0, sigma, size=new_class_count)])
    student.num_classes = model.num_classes + new_class_count
    student.step = model.step + 1
    return student


@dataclass
class NetGraph:
    """A forward graph of one model over one input batch."""

    graph: Graph
    image: int
    params: dict
    logits: int
    probs: int
    # (mean, var) nodes of every pre-batchnorm activation
    stats: list
    mode: str


def build_graph(model: ModelState, mode="eval", stats_axes=(0, 1, 2), graph=None, image=None,
                with_stats=True):
    """Add the network to ``graph`` (new one by default).

    ``mode='train'`` normalizes with batch statistics over ``(0, 1, 2)``;
    ``mode='eval'`` uses the running statistics as constants.  In both modes
    ``stats`` holds differentiable (mean, var) nodes over ``stats_axes``
    (left empty in eval mode when ``with_stats`` is false).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    g = Graph() if graph is None else graph
    x = g.input("image") if image is None else image
    p = {name: g.input(name) for name in model.params}
    h = x
    stats = []
    for i in range(model.arch.blocks):
        h = g.conv2d(h, p[f"conv{i}.w"])
        if mode == "train":
            mean = g.mean(h, axis=(0, 1, 2))
            var = g.var(h, axis=(0, 1, 2))
            norm_mean, norm_var = mean, var
            if tuple(stats_axes) != (0, 1, 2):
                mean = g.mean(h, axis=tuple(stats_axes))
                var = g.var(h, axis=tuple(stats_axes))
        else:
            norm_mean = g.const(model.running[f"bn{i}.mean"])
            norm_var = g.const(model.running[f"bn{i}.var"])
            if with_stats:
                mean = g.mean(h, axis=tuple(stats_axes))
                var = g.var(h, axis=tuple(stats_axes))
        if mode == "train" or with_stats:
            stats.append((mean, var))
        h = g.batchnorm(h, norm_mean, norm_var, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], eps=BN_EPS)
        h = g.relu(h)
    logits = g.add(g.matmul(h, p["head.w"]), p["head.b"])
    probs = g.softmax(logits, axis=-1)
    g.outputs = [probs]
    return NetGraph(g, x, p, logits, probs, stats, mode)


def bind(net: NetGraph, model: ModelState, images):
    inputs = {net.image: images}
    for name, node in net.params.items():
        inputs[node] = model.params[name]
    return inputs


def as_batch(images):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"expected HxWxC or NxHxWxC images, got {images.shape}")
    return images, single


def update_running(model: ModelState, batch_stats):
    for i, (mean, var) in enumerate(batch_stats):
        for key, val in (("mean", mean), ("var", var)):
            name = f"bn{i}.{key}"
            model.running[name] = (1.0 - BN_MOMENTUM) * model.running[name] + BN_MOMENTUM * val


def forward(model: ModelState, images, mode="eval", return_stats=False, logits=False):
    """Per-pixel class probabilities (a score map) for one image or a batch.

    Train mode normalizes with batch statistics and updates the running
    statistics of ``model`` in place.
    """
    batch, single = as_batch(images)
    if batch.shape[-1] != model.arch.in_channels:
        raise ValueError(f"model expects {model.arch.in_channels} channels, got {batch.shape[-1]}")
    net = build_graph(model, mode, with_stats=return_stats)
    want = [net.probs, net.logits] + [n for pair in net.stats for n in pair]
    vals = evaluate(net.graph, bind(net, model, batch), want)
    stats = [(vals[m], vals[v]) for m, v in net.stats]
    if mode == "train":
        update_running(model, stats)
    out = vals[net.logits] if logits else vals[net.probs]
    if single:
        out = out[0]
    return (out, stats) if return_stats else out


def predict(model: ModelState, images, chunk=32):
    """Eval-mode argmax label map; ties go to the lowest channel."""
    batch, single = as_batch(images)
    labels = np.concatenate([forward(model, batch[i:i + chunk]).argmax(axis=-1)
                             for i in range(0, len(batch), chunk)])
    return labels[0] if single else labels
