"""Central finite-difference verification of the backward kernels."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from voxshape import config
from voxshape.autodiff.core import Node, PrimitiveKind as K, backward, forward
from voxshape.autodiff import ops

STEP = 1e-4


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def numeric_grad(f: Callable[[list], float], arrays: list, which: int, h: float = STEP) -> np.ndarray:
    """d f / d arrays[which] by central differences; ``arrays`` is restored."""
    x = arrays[which]
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arrays)
        flat[i] = orig - h
        fm = f(arrays)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def check_composite(fn: Callable[..., Node], arrays: Sequence[np.ndarray], wrt: Sequence[int] | None = None,
                    h: float = STEP) -> float:
    """Max relative error between backward() and finite differences for a scalar-valued ``fn``."""
    arrays = [np.array(a, dtype=config.CHECK_DTYPE) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    nodes = [Node(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    root = fn(*nodes)
    backward(root)

    def f(arrs):
        return float(fn(*(Node(a) for a in arrs)).value)

    worst = 0.0
    for i in wrt:
        num = numeric_grad(f, arrays, i, h)
        ana = nodes[i].grad if nodes[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(ana, num))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _lattice_safe_grid(rng, v_shape, out_shape, margin=1e-3):
    """A random affine theta whose sample points keep clear of voxel-lattice kinks."""
    from voxshape import geometry

    extents = np.array(v_shape[::-1], dtype=np.float64)  # x, y, z
    while True:
        theta = rng.uniform(-0.4, 0.4, size=(1, 9))
        grid = geometry.generate_grid(geometry.build_affine_matrix(theta[0]), out_shape)
        idx = (grid.reshape(3, -1) + 1) * (extents[:, None] - 1) / 2
        frac = idx - np.floor(idx)
        if np.all(np.minimum(frac, 1 - frac) > margin):
            return theta


def _trial(kind: K, rng):
    """Random inputs (float64), attrs and the primitive applied as a node function."""
    if kind in (K.CONV3D, K.CONV3D_STRIDE2):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        return [x, w, b], {}
    if kind == K.TRANSPOSED_CONV3D:
        y = rng.standard_normal((1, 3, 2, 2, 2))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        return [y, w, b], {"out_shape": (4, 3, 4)}
    if kind == K.DENSE:
        return [rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)], {}
    if kind == K.INSTANCE_NORM:
        return [rng.standard_normal((2, 3, 3, 3, 3)), rng.standard_normal(3), rng.standard_normal(3)], {}
    if kind == K.LEAKY_RELU:
        return [_away_from_zero(rng, (4, 5))], {}
    if kind in (K.SIGMOID, K.MUL_SCALAR, K.ADD_SCALAR, K.REDUCE_SUM, K.CENTER):
        attrs = {K.MUL_SCALAR: {"c": 1.7}, K.ADD_SCALAR: {"c": -0.3}, K.REDUCE_SUM: {"axis": (1,)}}.get(kind, {})
        return [rng.standard_normal((4, 5))], attrs
    if kind in (K.ADD, K.ELEMENTWISE_MUL):
        return [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}
    if kind == K.DIV:
        return [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4))], {}
    if kind == K.GLOBAL_AVG_POOL:
        return [rng.standard_normal((2, 3, 2, 3, 2))], {}
    if kind == K.RESHAPE:
        return [rng.standard_normal((2, 6))], {"shape": (3, 4)}
    if kind == K.CONCAT:
        return [rng.standard_normal((2, 3)), rng.standard_normal((4, 3))], {"axis": 0}
    if kind == K.TAKE:
        return [rng.standard_normal((3, 4))], {"index": np.array([2, 0, 2])}
    if kind == K.AFFINE_MATRIX:
        return [rng.uniform(-1, 1, (2, 9))], {}
    if kind == K.AFFINE_GRID:
        m = np.zeros((2, 4, 4))
        m[:, :3, :] = rng.standard_normal((2, 3, 4))
        m[:, 3, 3] = 1.0
        return [m], {"out_shape": (2, 3, 4)}
    if kind == K.TRILINEAR_SAMPLE:
        from voxshape import geometry

        v = rng.uniform(0, 1, (1, 4, 5, 4))
        theta = _lattice_safe_grid(rng, (4, 5, 4), (3, 3, 3))
        grid = geometry.generate_grid(geometry.build_affine_matrix(theta[0]), (3, 3, 3))[None]
        return [v, grid], {}
    raise ValueError(f"no trial defined for {kind}")


def gradient_check(kind: K, trial: Callable | None = None, seed: int = 0, h: float = STEP) -> float:
    """Max relative error of ``kind``'s backward against central differences (64-bit).

    ``trial`` optionally maps a numpy Generator to ``(inputs, attrs)``.
    """
    rng = np.random.default_rng(seed)
    inputs, attrs = (trial or (lambda r: _trial(kind, r)))(rng)
    inputs = [np.asarray(a, dtype=config.CHECK_DTYPE) for a in inputs]
    out_shape = forward(kind, [Node(a) for a in inputs], **attrs).shape
    weights = rng.standard_normal(out_shape)

    def fn(*nodes):
        y = forward(kind, list(nodes), **attrs)
        return ops.reduce_sum(ops.mul(y, Node(weights)))

    return check_composite(fn, inputs, h=h)
