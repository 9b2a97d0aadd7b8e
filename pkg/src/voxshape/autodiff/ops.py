"""Forward/backward kernels for the dense primitives and their node-level wrappers.

Volumes are laid out ``[N, C, D, H, W]``; convolution kernels are
``[out, in, 3, 3, 3]`` except the transposed convolution, whose kernel is
``[in, out, 3, 3, 3]`` so that it can share weights with (and be the exact
adjoint of) a stride-2 convolution.
"""

from __future__ import annotations

import itertools

import numpy as np

from voxshape import config
from voxshape.autodiff.core import Node, PrimitiveKind as K, forward, register
from voxshape.errors import ShapeError

_OFFSETS = list(itertools.product(range(3), repeat=3))


def _out_extent(n, stride):
    return -(-n // stride)


# ---------------------------------------------------------------- convolution


def _im2col(x, stride):
    """[N,C,D,H,W] -> [C*27, N*Do*Ho*Wo] with zero padding 1."""
    n, c, d, h, w = x.shape
    do, ho, wo = (_out_extent(e, stride) for e in (d, h, w))
    xp = np.zeros((c, n, d + 2, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3, 4)
    cols = np.empty((c, 27, n, do, ho, wo), dtype=x.dtype)
    s = stride
    for i, (a, b, e) in enumerate(_OFFSETS):
        cols[:, i] = xp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s]
    return cols.reshape(c * 27, -1), (do, ho, wo)


def _col2im(cols, n, c, in_shape, out_shape, stride):
    """Adjoint of :func:`_im2col`."""
    d, h, w = in_shape
    do, ho, wo = out_shape
    cols = cols.reshape(c, 27, n, do, ho, wo)
    xp = np.zeros((c, n, d + 2, h + 2, w + 2), dtype=cols.dtype)
    s = stride
    for i, (a, b, e) in enumerate(_OFFSETS):
        xp[:, :, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s] += cols[:, i]
    return xp[:, :, 1:-1, 1:-1, 1:-1].transpose(1, 0, 2, 3, 4)


def _to_mat(y):
    """[N,O,...] -> [O, N*V]."""
    return y.transpose(1, 0, 2, 3, 4).reshape(y.shape[1], -1)


def _from_mat(m, n, spatial):
    return m.reshape((m.shape[0], n) + tuple(spatial)).transpose(1, 0, 2, 3, 4)


def _check_conv(kind, x, w, b, in_axis):
    if x.ndim != 5:
        raise ShapeError(kind, f"input must be [N,C,D,H,W], got ndim={x.ndim}")
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeError(kind, f"kernel must be [*,*,3,3,3], got {w.shape}")
    if w.shape[in_axis] != x.shape[1]:
        raise ShapeError(kind, f"channel dim: input has {x.shape[1]}, kernel expects {w.shape[in_axis]}")
    if b is not None and b.shape != (w.shape[1 - in_axis],):
        raise ShapeError(kind, f"bias dim: expected ({w.shape[1 - in_axis]},), got {b.shape}")


def _conv_fwd(stride, name):
    def fwd(x, w, b=None):
        _check_conv(name, x, w, b, in_axis=1)
        cols, spatial = _im2col(x, stride)
        out = w.reshape(w.shape[0], -1) @ cols
        y = _from_mat(out, x.shape[0], spatial)
        if b is not None:
            y = y + b.reshape(1, -1, 1, 1, 1)
        return y, (x, w, cols, spatial, b is not None)

    return fwd


def _conv_bwd(stride):
    def bwd(ctx, g, needs):
        x, w, cols, spatial, has_b = ctx
        gm = _to_mat(g)
        gx = gw = gb = None
        if needs[0] and stride == 1:
            # same-padding correlation: the input gradient is a correlation of g with the flipped kernel
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gcols, _ = _im2col(g, 1)
            gx = _from_mat(wf.reshape(wf.shape[0], -1) @ gcols, x.shape[0], x.shape[2:])
        elif needs[0]:
            dcols = w.reshape(w.shape[0], -1).T @ gm
            gx = _col2im(dcols, x.shape[0], x.shape[1], x.shape[2:], spatial, stride)
        if needs[1]:
            gw = (gm @ cols.T).reshape(w.shape)
        if has_b and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if has_b else (gx, gw)

    return bwd


def _tconv_fwd(y, w, b=None, out_shape=None):
    _check_conv("transposed_conv3d", y, w, b, in_axis=0)
    if out_shape is None:
        out_shape = tuple(2 * e for e in y.shape[2:])
    out_shape = tuple(int(e) for e in out_shape)
    for i, (o, e) in enumerate(zip(out_shape, y.shape[2:])):
        if _out_extent(o, 2) != e:
            raise ShapeError("transposed_conv3d", f"out extent {o} on axis {i} does not halve to {e}")
    dcols = w.reshape(w.shape[0], -1).T @ _to_mat(y)
    out = _col2im(dcols, y.shape[0], w.shape[1], out_shape, y.shape[2:], 2)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1, 1)
    return out, (y, w, b is not None)


def _tconv_bwd(ctx, g, needs):
    y, w, has_b = ctx
    cols, _ = _im2col(g, 2)
    gy = gw = gb = None
    if needs[0]:
        gy = _from_mat(w.reshape(w.shape[0], -1) @ cols, y.shape[0], y.shape[2:])
    if needs[1]:
        gw = (_to_mat(y) @ cols.T).reshape(w.shape)
    if has_b and needs[2]:
        gb = g.sum(axis=(0, 2, 3, 4))
    return (gy, gw, gb) if has_b else (gy, gw)


register(K.CONV3D, _conv_fwd(1, "conv3d"), _conv_bwd(1))
register(K.CONV3D_STRIDE2, _conv_fwd(2, "conv3d_stride2"), _conv_bwd(2))
register(K.TRANSPOSED_CONV3D, _tconv_fwd, _tconv_bwd)


# ---------------------------------------------------------------- dense / norm


def _dense_fwd(x, w, b=None):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("dense", f"input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("dense", f"bias dim: expected ({w.shape[1]},), got {b.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def _dense_bwd(ctx, g, needs):
    x, w, has_b = ctx
    gx = g @ w.T if needs[0] else None
    gw = x.T @ g if needs[1] else None
    if has_b:
        return gx, gw, (g.sum(axis=0) if needs[2] else None)
    return gx, gw


def _instance_norm_fwd(x, gamma, beta, eps=config.IN_EPS):
    if x.ndim < 3:
        raise ShapeError("instance_norm", f"input must be [N,C,...], got ndim={x.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("instance_norm", f"channel dim: input has {c}, scale {gamma.shape}, shift {beta.shape}")
    axes = tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y, (xhat, inv, gamma, axes, bshape)


def _instance_norm_bwd(ctx, g, needs):
    xhat, inv, gamma, axes, bshape = ctx
    gx = ggamma = gbeta = None
    if needs[0]:
        dxhat = g * gamma.reshape(bshape)
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
    red = (0,) + axes
    if needs[1]:
        ggamma = (g * xhat).sum(axis=red)
    if needs[2]:
        gbeta = g.sum(axis=red)
    return gx, ggamma, gbeta


register(K.DENSE, _dense_fwd, _dense_bwd)
register(K.INSTANCE_NORM, _instance_norm_fwd, _instance_norm_bwd)


# ---------------------------------------------------------------- elementwise


def _leaky_relu_fwd(x, slope=config.LEAKY_SLOPE):
    mask = x >= 0
    return np.where(mask, x, slope * x), (mask, slope)


def _leaky_relu_bwd(ctx, g, needs):
    mask, slope = ctx
    return (np.where(mask, g, slope * g),)


def _sigmoid_fwd(x):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return y, y


def _sigmoid_bwd(y, g, needs):
    return (g * y * (1.0 - y),)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(kind, f"shape mismatch {a.shape} vs {b.shape}")


def _add_fwd(a, b):
    _same_shape("add", a, b)
    return a + b, None


def _add_bwd(ctx, g, needs):
    return g, g


def _mul_scalar_fwd(x, c=1.0):
    return x * x.dtype.type(c), c


def _mul_scalar_bwd(c, g, needs):
    return (g * g.dtype.type(c),)


def _add_scalar_fwd(x, c=0.0):
    return x + x.dtype.type(c), None


def _add_scalar_bwd(ctx, g, needs):
    return (g,)


def _emul_fwd(a, b):
    _same_shape("elementwise_mul", a, b)
    return a * b, (a, b)


def _emul_bwd(ctx, g, needs):
    a, b = ctx
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _div_fwd(a, b):
    _same_shape("div", a, b)
    return a / b, (a, b)


def _div_bwd(ctx, g, needs):
    a, b = ctx
    ga = g / b if needs[0] else None
    gb = -g * a / (b * b) if needs[1] else None
    return ga, gb


register(K.LEAKY_RELU, _leaky_relu_fwd, _leaky_relu_bwd)
register(K.SIGMOID, _sigmoid_fwd, _sigmoid_bwd)
register(K.ADD, _add_fwd, _add_bwd)
register(K.MUL_SCALAR, _mul_scalar_fwd, _mul_scalar_bwd)
register(K.ADD_SCALAR, _add_scalar_fwd, _add_scalar_bwd)
register(K.ELEMENTWISE_MUL, _emul_fwd, _emul_bwd)
register(K.DIV, _div_fwd, _div_bwd)


# ---------------------------------------------------------------- structural


def _reduce_sum_fwd(x, axis=None):
    if axis is not None:
        axis = tuple(np.atleast_1d(axis).tolist())
    return np.asarray(x.sum(axis=axis)), (x.shape, axis)


def _reduce_sum_bwd(ctx, g, needs):
    shape, axis = ctx
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    kept = list(shape)
    for a in axis:
        kept[a] = 1
    return (np.broadcast_to(g.reshape(kept), shape).copy(),)


def _gap_fwd(x):
    if x.ndim < 3:
        raise ShapeError("global_avg_pool", f"input must be [N,C,...], got ndim={x.ndim}")
    axes = tuple(range(2, x.ndim))
    return x.mean(axis=axes), x.shape


def _gap_bwd(shape, g, needs):
    count = int(np.prod(shape[2:]))
    g = g.reshape(g.shape + (1,) * (len(shape) - 2)) / count
    return (np.broadcast_to(g, shape).copy(),)


def _reshape_fwd(x, shape=None):
    try:
        return x.reshape(shape), x.shape
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {shape}") from None


def _reshape_bwd(shape, g, needs):
    return (g.reshape(shape),)


def _concat_fwd(*xs, axis=0):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError("concat", f"shape {x.shape} incompatible with {ref} off axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    return np.concatenate(xs, axis=axis), (sizes, axis)


def _concat_bwd(ctx, g, needs):
    sizes, axis = ctx
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _take_fwd(x, index=None):
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("take", f"index out of range for leading extent {x.shape[0]}")
    return x[index], (x.shape, index)


def _take_bwd(ctx, g, needs):
    shape, index = ctx
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, index, g)
    return (out,)


def _center_fwd(x):
    if x.ndim != 2:
        raise ShapeError("center", f"expected [B, P], got {x.shape}")
    return x - x.mean(axis=0, keepdims=True), None


def _center_bwd(ctx, g, needs):
    return (g - g.mean(axis=0, keepdims=True),)


register(K.REDUCE_SUM, _reduce_sum_fwd, _reduce_sum_bwd)
register(K.GLOBAL_AVG_POOL, _gap_fwd, _gap_bwd)
register(K.RESHAPE, _reshape_fwd, _reshape_bwd)
register(K.CONCAT, _concat_fwd, _concat_bwd)
register(K.TAKE, _take_fwd, _take_bwd)
register(K.CENTER, _center_fwd, _center_bwd)


# ---------------------------------------------------------------- node API


def _batched(x):
    """Promote a single [C,D,H,W] volume to a batch of one."""
    if x.value.ndim == 4:
        return reshape(x, (1,) + x.shape), True
    return x, False


def _conv_like(kind, x, w, b, **attrs):
    x, squeeze = _batched(x)
    inputs = [x, w] if b is None else [x, w, b]
    y = forward(kind, inputs, **attrs)
    return reshape(y, y.shape[1:]) if squeeze else y


def conv3d(x, w, b=None) -> Node:
    return _conv_like(K.CONV3D, x, w, b)


def conv3d_stride2(x, w, b=None) -> Node:
    return _conv_like(K.CONV3D_STRIDE2, x, w, b)


def transposed_conv3d(y, w, b=None, out_shape=None) -> Node:
    return _conv_like(K.TRANSPOSED_CONV3D, y, w, b, out_shape=out_shape)


def dense(x, w, b=None) -> Node:
    return forward(K.DENSE, [x, w] if b is None else [x, w, b])


def instance_norm(x, gamma, beta, eps=config.IN_EPS) -> Node:
    return forward(K.INSTANCE_NORM, [x, gamma, beta], eps=eps)


def leaky_relu(x, slope=config.LEAKY_SLOPE) -> Node:
    return forward(K.LEAKY_RELU, [x], slope=slope)


def sigmoid(x) -> Node:
    return forward(K.SIGMOID, [x])


def add(a, b) -> Node:
    return forward(K.ADD, [a, b])


def sub(a, b) -> Node:
    return add(a, mul_scalar(b, -1.0))


def mul_scalar(x, c) -> Node:
    return forward(K.MUL_SCALAR, [x], c=c)


def add_scalar(x, c) -> Node:
    return forward(K.ADD_SCALAR, [x], c=c)


def mul(a, b) -> Node:
    return forward(K.ELEMENTWISE_MUL, [a, b])


def div(a, b) -> Node:
    return forward(K.DIV, [a, b])


def reduce_sum(x, axis=None) -> Node:
    return forward(K.REDUCE_SUM, [x], axis=axis)


def mean(x) -> Node:
    return mul_scalar(reduce_sum(x), 1.0 / x.value.size)


def global_avg_pool(x) -> Node:
    return forward(K.GLOBAL_AVG_POOL, [x])


def reshape(x, shape) -> Node:
    return forward(K.RESHAPE, [x], shape=tuple(shape))


def concat(xs, axis=0) -> Node:
    return forward(K.CONCAT, list(xs), axis=axis)


def take(x, index) -> Node:
    return forward(K.TAKE, [x], index=np.asarray(index, dtype=np.intp))


def center(x) -> Node:
    return forward(K.CENTER, [x])
