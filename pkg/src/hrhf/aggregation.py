"""Spatial pooling of per-class score maps into image-level class scores.

Score maps are laid out ``(..., H, W, C)``; pooling reduces the two spatial
axes.  ``saa_pool`` is the normalized log-sum-exp

    y_k = (1/r) * log( mean_ij exp(r * s_ij^k) )

which moves from the spatial mean (r -> 0) to the spatial max (r -> inf).
"""
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import register_op

DEFAULT_R_SET = (0.5, 1.0, 5.0, 10.0, 20.0)
KINDS = ("SAA", "AVG", "MAX")


@dataclass(frozen=True)
class AggregationSpec:
    kind: str = "SAA"
    r: float | None = None  # fixed r; None draws from r_set per (image, class)
    r_set: Sequence[float] = DEFAULT_R_SET
    on: str = "prob"  # "prob" or "logits"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if self.r is not None and not self.r > 0:
            raise ValueError("r must be positive")
        if not self.r_set or any(not v > 0 for v in self.r_set):
            raise ValueError("r_set must be non-empty and positive")
        if self.on not in ("prob", "logits"):
            raise ValueError(f"unknown aggregation input {self.on!r}")


def _spatial(s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim < 3:
        raise ValueError(f"score map needs (..., H, W, C), got shape {s.shape}")
    return s


def _per_class_r(r, pooled_shape):
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0) or not np.all(np.isfinite(r)):
        raise ValueError("r must be positive and finite")
    return np.broadcast_to(r, pooled_shape)


def _saa_weights(s, r):
    """Stabilized exp(r*(s - max)) and the per-class max."""
    m = s.max(axis=(-3, -2), keepdims=True)
    e = np.exp(r[..., None, None, :] * (s - m))
    return e, m[..., 0, 0, :]


def saa_pool(score_map, r):
    """Scale-aware aggregation; ``r`` is a scalar or broadcastable to the pooled shape."""
    s = _spatial(score_map)
    pooled = s.shape[:-3] + s.shape[-1:]
    r = _per_class_r(r, pooled)
    e, m = _saa_weights(s, r)
    y = m + np.log(e.mean(axis=(-3, -2))) / r
    return _clamp_to_bounds(y, s, m, r)


def _clamp_to_bounds(y, s, m, r):
    """Clamp into [max(mean, max - log(N)/r), max], decided in exact arithmetic.

    The exact pooled value always lies in that interval; the stabilized float
    form can leave it by a few ulps (e.g. on constant maps).  ``math.fsum``
    rounds the exact sum once, so the sign tests below are exact.
    """
    n = s.shape[-3] * s.shape[-2]
    flat = s.reshape(s.shape[:-3] + (n, s.shape[-1]))
    out = np.array(y, dtype=np.float64)
    for idx in np.ndindex(out.shape):
        vals = flat[idx[:-1] + (slice(None), idx[-1])].tolist()
        mx = float(m[idx])
        # smallest float not below the exact mean (capped at the max)
        mu = math.fsum(vals) / n
        while mu < mx and math.fsum(vals + [-mu] * n) > 0:
            mu = float(np.nextafter(mu, np.inf))
        # smallest float whose distance to the max does not exceed log(N)/r
        bound = math.log(n) / float(r[idx])
        gap_lo = mx - bound
        while math.fsum([mx, -gap_lo, -bound]) > 0:
            gap_lo = float(np.nextafter(gap_lo, np.inf))
        out[idx] = min(max(float(out[idx]), mu, gap_lo), mx)
    return out


def saa_weights(score_map, r):
    """d saa_pool / d s: the spatial softmax of r*s, per class."""
    s = _spatial(score_map)
    r = _per_class_r(r, s.shape[:-3] + s.shape[-1:])
    e, _ = _saa_weights(s, r)
    return e / e.sum(axis=(-3, -2), keepdims=True)


def avg_pool(score_map):
    return _spatial(score_map).mean(axis=(-3, -2))


def max_pool(score_map):
    return _spatial(score_map).max(axis=(-3, -2))


def sample_r(rng, r_set=DEFAULT_R_SET, class_count=1):
    """Independent uniform draws from ``r_set``, one per class."""
    if len(r_set) == 0:
        raise ValueError("r_set must be non-empty")
    picks = rng.integers(0, len(r_set), size=class_count)
    return np.asarray(r_set, dtype=np.float64)[picks]


def pool(score_map, spec: AggregationSpec, r=None):
    if spec.kind == "AVG":
        return avg_pool(score_map)
    if spec.kind == "MAX":
        return max_pool(score_map)
    return saa_pool(score_map, spec.r if r is None else r)


# --- graph primitives ------------------------------------------------------
# saa_pool takes r as a second (constant) input so it can vary per image.

def _saa_f(v, at):
    return saa_pool(v[0], v[1])


def _saa_b(g, v, out, at, needs):
    return (g[..., None, None, :] * saa_weights(v[0], v[1]) if needs[0] else None, None)


def _avg_f(v, at):
    return avg_pool(v[0])


def _avg_b(g, v, out, at, needs):
    h, w = v[0].shape[-3:-1]
    return (np.broadcast_to(g[..., None, None, :] / (h * w), v[0].shape).copy(),)


def _argmax_spatial(s):
    flat = s.reshape(s.shape[:-3] + (-1, s.shape[-1]))
    return flat.argmax(axis=-2)


def _max_f(v, at):
    return max_pool(v[0])


def _max_b(g, v, out, at, needs):
    s = v[0]
    flat_shape = s.shape[:-3] + (s.shape[-3] * s.shape[-2], s.shape[-1])
    idx = _argmax_spatial(s)
    gx = np.zeros(flat_shape)
    np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
    return (gx.reshape(s.shape),)


def _max_branch(v, at):
    return _argmax_spatial(v[0])


def _sigmoid_f(v, at):
    return 0.5 * (1.0 + np.tanh(0.5 * v[0]))


def _sigmoid_b(g, v, out, at, needs):
    return (g * out * (1.0 - out),)


register_op("saa_pool", _saa_f, _saa_b)
register_op("avg_pool", _avg_f, _avg_b)
register_op("max_pool", _max_f, _max_b, _max_branch)
register_op("sigmoid", _sigmoid_f, _sigmoid_b)


def pool_node(g, s_node, spec: AggregationSpec, r_node=None):
    """Add the pooling selected by ``spec`` to graph ``g``."""
    if spec.kind == "AVG":
        return g.avg_pool(s_node)
    if spec.kind == "MAX":
        return g.max_pool(s_node)
    if r_node is None:
        r_node = g.const(spec.r)
    return g.saa_pool(s_node, r_node)
