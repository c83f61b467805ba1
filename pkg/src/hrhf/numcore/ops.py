"""Core primitives and their backward rules.

Every backward returns one gradient per input with exactly that input's
shape.  Broadcasting follows numpy; gradients are summed back with
:func:`unbroadcast`.
"""
import numpy as np

from .graph import register_op


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shape_check(a, b):
    np.broadcast_shapes(a.shape, b.shape)


# --- elementwise -----------------------------------------------------------

def _add_f(v, at):
    _binary_shape_check(*v)
    return v[0] + v[1]


def _add_b(g, v, out, at, needs):
    return (unbroadcast(g, v[0].shape) if needs[0] else None,
            unbroadcast(g, v[1].shape) if needs[1] else None)


def _sub_f(v, at):
    _binary_shape_check(*v)
    return v[0] - v[1]


def _sub_b(g, v, out, at, needs):
    return (unbroadcast(g, v[0].shape) if needs[0] else None,
            unbroadcast(-g, v[1].shape) if needs[1] else None)


def _mul_f(v, at):
    _binary_shape_check(*v)
    return v[0] * v[1]


def _mul_b(g, v, out, at, needs):
    return (unbroadcast(g * v[1], v[0].shape) if needs[0] else None,
            unbroadcast(g * v[0], v[1].shape) if needs[1] else None)


def _div_f(v, at):
    _binary_shape_check(*v)
    return v[0] / v[1]


def _div_b(g, v, out, at, needs):
    return (unbroadcast(g / v[1], v[0].shape) if needs[0] else None,
            unbroadcast(-g * out / v[1], v[1].shape) if needs[1] else None)


def _scale_f(v, at):
    return v[0] * at["factor"]


def _scale_b(g, v, out, at, needs):
    return (g * at["factor"],)


def _square_f(v, at):
    return v[0] * v[0]


def _square_b(g, v, out, at, needs):
    return (2.0 * v[0] * g,)


def _exp_f(v, at):
    return np.exp(v[0])


def _exp_b(g, v, out, at, needs):
    return (g * out,)


def _log_f(v, at):
    floor = at.get("floor")
    x = v[0] if floor is None else np.maximum(v[0], floor)
    return np.log(x)


def _log_b(g, v, out, at, needs):
    floor = at.get("floor")
    if floor is None:
        return (g / v[0],)
    live = v[0] > floor
    return (np.where(live, g / np.where(live, v[0], 1.0), 0.0),)


def _log_branch(v, at):
    floor = at.get("floor")
    return None if floor is None else v[0] > floor


def _relu_f(v, at):
    return np.maximum(v[0], 0.0)


def _relu_b(g, v, out, at, needs):
    # subgradient 0 at the kink
    return (g * (v[0] > 0.0),)


def _relu_branch(v, at):
    return v[0] > 0.0


# --- reductions and structure ---------------------------------------------

def _axis(at):
    ax = at.get("axis")
    return tuple(ax) if isinstance(ax, (list, tuple)) else ax


def _sum_f(v, at):
    return np.asarray(v[0].sum(axis=_axis(at), keepdims=at.get("keepdims", False)))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _sum_b(g, v, out, at, needs):
    return (np.array(_expand_reduced(g, v[0].shape, _axis(at), at.get("keepdims", False))),)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if np.isscalar(axis) else axis
    return int(np.prod([shape[a] for a in axes]))


def _mean_f(v, at):
    return np.asarray(v[0].mean(axis=_axis(at), keepdims=at.get("keepdims", False)))


def _mean_b(g, v, out, at, needs):
    n = _count(v[0].shape, _axis(at))
    return (np.array(_expand_reduced(g, v[0].shape, _axis(at), at.get("keepdims", False))) / n,)


def _var_f(v, at):
    # biased (population) variance
    return np.asarray(v[0].var(axis=_axis(at), keepdims=at.get("keepdims", False)))


def _var_b(g, v, out, at, needs):
    x = v[0]
    ax = _axis(at)
    n = _count(x.shape, ax)
    centered = x - x.mean(axis=ax, keepdims=True)
    gx = _expand_reduced(g, x.shape, ax, at.get("keepdims", False))
    return (2.0 / n * centered * gx,)


def _reshape_f(v, at):
    return v[0].reshape(at["shape"])


def _reshape_b(g, v, out, at, needs):
    return (g.reshape(v[0].shape),)


def _index_f(v, at):
    return np.array(v[0][at["index"]])


def _index_b(g, v, out, at, needs):
    # index must not select an element twice
    gx = np.zeros_like(v[0])
    gx[at["index"]] += g
    return (gx,)


def _concat_f(v, at):
    return np.concatenate(v, axis=at.get("axis", -1))


def _concat_b(g, v, out, at, needs):
    ax = at.get("axis", -1)
    bounds = np.cumsum([x.shape[ax] for x in v])[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def _matmul_f(v, at):
    a, w = v
    if a.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ValueError(f"matmul shapes {a.shape} x {w.shape}")
    return a @ w


def _matmul_b(g, v, out, at, needs):
    a, w = v
    ga = g @ w.T if needs[0] else None
    gw = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if needs[1] else None
    return ga, gw


# --- softmax -------------------------------------------------------------

def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_f(v, at):
    return softmax(v[0], at.get("axis", -1))


def _softmax_b(g, v, out, at, needs):
    ax = at.get("axis", -1)
    return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)


# --- convolution (NHWC, stride 1, zero 'same' padding) ---------------------

def _rows(x, kh, kw):
    """Zero-pad and stack the ``kw`` horizontal shifts on the channel axis."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x
    if kw == 1:
        return xp
    return np.concatenate([xp[:, :, dx:dx + x.shape[2], :] for dx in range(kw)], axis=-1)


def conv2d(x, w):
    kh, kw, cin, cout = w.shape
    n, h, wd, c = x.shape
    if c != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    xh = _rows(x, kh, kw)
    wr = w.reshape(kh, kw * cin, cout)
    out = xh[:, 0:h] @ wr[0]
    for dy in range(1, kh):
        out += xh[:, dy:dy + h] @ wr[dy]
    return out


def _conv_f(v, at):
    return conv2d(v[0], v[1])


def _conv_b(g, v, out, at, needs):
    x, w = v
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    gx = gw = None
    if needs[0]:
        # correlation with the spatially flipped, channel-transposed kernel
        gx = conv2d(g, np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2)))
    if needs[1]:
        xh = _rows(x, kh, kw)
        gw = np.zeros((kh, kw * cin, cout))
        for i in range(n):
            gi = g[i].reshape(-1, cout)
            for dy in range(kh):
                gw[dy] += xh[i, dy:dy + h].reshape(-1, kw * cin).T @ gi
        gw = gw.reshape(w.shape)
    return gx, gw


# --- batch normalization (statistics supplied as inputs) -------------------

def _bn_f(v, at):
    x, mean, var, gamma, beta = v
    inv = 1.0 / np.sqrt(var + at.get("eps", 1e-5))
    return (x - mean) * inv * gamma + beta


def _bn_b(g, v, out, at, needs):
    x, mean, var, gamma, beta = v
    c = x.shape[-1]
    inv = 1.0 / np.sqrt(var + at.get("eps", 1e-5))
    if not all(a.shape == (c,) for a in (mean, var, gamma, beta)):
        gg = g * gamma
        return (gg * inv if needs[0] else None,
                unbroadcast(-gg * inv, mean.shape) if needs[1] else None,
                unbroadcast(gg * (x - mean) * (-0.5 * inv ** 3), var.shape) if needs[2] else None,
                unbroadcast(g * (x - mean) * inv, gamma.shape) if needs[3] else None,
                unbroadcast(g, beta.shape) if needs[4] else None)
    # per-channel statistics: reduce over a 2-D (pixels, channels) view
    g2 = g.reshape(-1, c)
    gg = g2 * gamma
    xc = x.reshape(-1, c) - mean if (needs[2] or needs[3]) else None
    gx = (gg * inv).reshape(x.shape) if needs[0] else None
    gmean = -gg.sum(axis=0) * inv if needs[1] else None
    gvar = (gg * xc).sum(axis=0) * (-0.5 * inv ** 3) if needs[2] else None
    ggamma = (g2 * xc).sum(axis=0) * inv if needs[3] else None
    gbeta = g2.sum(axis=0) if needs[4] else None
    return gx, gmean, gvar, ggamma, gbeta


register_op("add", _add_f, _add_b)
register_op("sub", _sub_f, _sub_b)
register_op("mul", _mul_f, _mul_b)
register_op("div", _div_f, _div_b)
register_op("scale", _scale_f, _scale_b)
register_op("square", _square_f, _square_b)
register_op("exp", _exp_f, _exp_b)
register_op("log", _log_f, _log_b, _log_branch)
register_op("relu", _relu_f, _relu_b, _relu_branch)
register_op("sum", _sum_f, _sum_b)
register_op("mean", _mean_f, _mean_b)
register_op("var", _var_f, _var_b)
register_op("reshape", _reshape_f, _reshape_b)
register_op("index", _index_f, _index_b)
register_op("concat", _concat_f, _concat_b)
register_op("matmul", _matmul_f, _matmul_b)
register_op("softmax", _softmax_f, _softmax_b)
register_op("conv2d", _conv_f, _conv_b)
register_op("batchnorm", _bn_f, _bn_b)
