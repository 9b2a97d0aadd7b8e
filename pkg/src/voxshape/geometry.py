"""Affine transform model, parameter normalizer, grid generation and trilinear resampling.

Parameters are a flat 9-vector ``[rot_x, rot_y, rot_z, t_x, t_y, t_z, s_x, s_y, s_z]``
(radians, normalized-coordinate offsets, log scales).  The matrix is
``T(t) @ Rz @ Ry @ Rx @ diag(exp(s))`` and maps output (template-space)
coordinates to input coordinates, i.e. resampling is backward warping.

Normalized coordinates are corner aligned: index ``i`` on an axis of extent
``n`` sits at ``-1 + 2 i / (n - 1)``.  Grid channel 0 is x (the last, fastest
array axis), channel 2 is z (the first spatial axis).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voxshape.autodiff.core import Node, PrimitiveKind as K, forward, register
from voxshape.autodiff import ops
from voxshape.errors import NotTrainedError, ShapeError

N_PARAMS = 9


def _rotations(rot):
    """Per-axis rotation matrices and their derivatives for a [B, 3] angle array."""
    c, s = np.cos(rot), np.sin(rot)
    b = rot.shape[0]
    z, o = np.zeros(b), np.ones(b)

    def m(*rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    cx, cy, cz = c.T
    sx, sy, sz = s.T
    rx = m((o, z, z), (z, cx, -sx), (z, sx, cx))
    ry = m((cy, z, sy), (z, o, z), (-sy, z, cy))
    rz = m((cz, -sz, z), (sz, cz, z), (z, z, o))
    drx = m((z, z, z), (z, -sx, -cx), (z, cx, -sx))
    dry = m((-sy, z, cy), (z, z, z), (-cy, z, -sy))
    drz = m((-sz, -cz, z), (cz, -sz, z), (z, z, z))
    return (rx, ry, rz), (drx, dry, drz)


def _affine_matrix_fwd(theta):
    if theta.ndim != 2 or theta.shape[1] != N_PARAMS:
        raise ShapeError("affine_matrix", f"expected [B, 9] parameters, got {theta.shape}")
    (rx, ry, rz), derivs = _rotations(theta[:, 0:3])
    scale = np.exp(theta[:, 6:9])
    rot = rz @ ry @ rx
    a = rot * scale[:, None, :]
    out = np.zeros((theta.shape[0], 4, 4), dtype=theta.dtype)
    out[:, :3, :3] = a
    out[:, :3, 3] = theta[:, 3:6]
    out[:, 3, 3] = 1.0
    return out, ((rx, ry, rz), derivs, scale, a)


def _affine_matrix_bwd(ctx, g, needs):
    (rx, ry, rz), (drx, dry, drz), scale, a = ctx
    ga = g[:, :3, :3]
    s = scale[:, None, :]
    grad = np.zeros((g.shape[0], N_PARAMS), dtype=g.dtype)
    grad[:, 0] = np.sum(ga * (rz @ ry @ drx) * s, axis=(1, 2))
    grad[:, 1] = np.sum(ga * (rz @ dry @ rx) * s, axis=(1, 2))
    grad[:, 2] = np.sum(ga * (drz @ ry @ rx) * s, axis=(1, 2))
    grad[:, 3:6] = g[:, :3, 3]
    grad[:, 6:9] = np.sum(ga * a, axis=1)
    return (grad,)


def build_affine_matrix(p) -> np.ndarray:
    """4x4 matrix for a 9-vector, or [B,4,4] for a [B,9] batch."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    m, _ = _affine_matrix_fwd(p.reshape(-1, N_PARAMS))
    return m[0] if single else m


def affine_matrix(theta: Node) -> Node:
    return forward(K.AFFINE_MATRIX, [theta])


def normalized_coords(out_shape, dtype=np.float64) -> np.ndarray:
    """[3, D, H, W] array of (x, y, z) corner-aligned coordinates."""
    d, h, w = out_shape
    if min(d, h, w) < 2:
        raise ShapeError("generate_grid", f"extents must be >= 2, got {tuple(out_shape)}")
    zs, ys, xs = (np.linspace(-1.0, 1.0, n, dtype=dtype) for n in (d, h, w))
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([x, y, z])


def _affine_grid_fwd(m, out_shape=None):
    if m.ndim != 3 or m.shape[1:] != (4, 4):
        raise ShapeError("affine_grid", f"expected [B,4,4] matrices, got {m.shape}")
    coords = normalized_coords(out_shape, m.dtype).reshape(3, -1)
    grid = m[:, :3, :3] @ coords + m[:, :3, 3:4]
    return grid.reshape((m.shape[0], 3) + tuple(out_shape)), coords


def _affine_grid_bwd(coords, g, needs):
    gf = g.reshape(g.shape[0], 3, -1)
    gm = np.zeros((g.shape[0], 4, 4), dtype=g.dtype)
    gm[:, :3, :3] = gf @ coords.T
    gm[:, :3, 3] = gf.sum(axis=2)
    return (gm,)


def generate_grid(m, out_shape) -> np.ndarray:
    """Sampling grid [3,D,H,W] for a 4x4 matrix (or [B,3,D,H,W] for [B,4,4])."""
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    grid, _ = _affine_grid_fwd(m.reshape(-1, 4, 4), out_shape=tuple(out_shape))
    return grid[0] if single else grid


def affine_grid(m: Node, out_shape) -> Node:
    return forward(K.AFFINE_GRID, [m], out_shape=tuple(out_shape))


_SNAP_TOL = 1e-5


def _snap(f):
    r = np.rint(f)
    return np.where(np.abs(f - r) < _SNAP_TOL, r, f)


def _corner_terms(v, grid):
    b, d, h, w = v.shape
    out_spatial = grid.shape[2:]
    g = grid.reshape(b, 3, -1)
    # continuous voxel indices, in float64 and snapped so lattice points sample exactly
    fx, fy, fz = (_snap((g[:, a].astype(np.float64) + 1) * ((n - 1) / 2)) for a, n in ((0, w), (1, h), (2, d)))
    x0, y0, z0 = np.floor(fx), np.floor(fy), np.floor(fz)
    tx, ty, tz = ((f - f0).astype(grid.dtype) for f, f0 in ((fx, x0), (fy, y0), (fz, z0)))
    x0, y0, z0 = x0.astype(np.intp), y0.astype(np.intp), z0.astype(np.intp)
    base = (np.arange(b, dtype=np.intp) * (d * h * w))[:, None]
    corners = []
    for dz in (0, 1):
        zi = z0 + dz
        wz = tz if dz else 1 - tz
        vz = (zi >= 0) & (zi < d)
        for dy in (0, 1):
            yi = y0 + dy
            wy = ty if dy else 1 - ty
            vy = vz & (yi >= 0) & (yi < h)
            for dx in (0, 1):
                xi = x0 + dx
                wx = tx if dx else 1 - tx
                valid = vy & (xi >= 0) & (xi < w)
                flat = np.where(valid, base + (zi * h + yi) * w + xi, 0)
                corners.append((flat, valid, (dx, dy, dz), (wx, wy, wz)))
    return corners, out_spatial, (w, h, d)


def _trilinear_fwd(v, grid):
    if v.ndim != 4 or grid.ndim != 5 or grid.shape[1] != 3 or grid.shape[0] != v.shape[0]:
        raise ShapeError("trilinear_sample", f"volume {v.shape} incompatible with grid {grid.shape}")
    corners, out_spatial, extents = _corner_terms(v, grid)
    vf = v.reshape(-1)
    out = np.zeros(corners[0][0].shape, dtype=np.result_type(v, grid))
    for flat, valid, _, (wx, wy, wz) in corners:
        out += np.where(valid, vf[flat], 0) * (wx * wy * wz)
    return out.reshape((v.shape[0],) + out_spatial), (v, corners, extents, grid.shape)


def _trilinear_bwd(ctx, g, needs):
    v, corners, (w, h, d), grid_shape = ctx
    gf = g.reshape(g.shape[0], -1)
    gv = ggrid = None
    if needs[0]:
        acc = np.zeros(v.size, dtype=np.float64)
        for flat, valid, _, (wx, wy, wz) in corners:
            acc += np.bincount(flat.ravel(), weights=(gf * (wx * wy * wz) * valid).ravel(), minlength=v.size)
        gv = acc.astype(v.dtype).reshape(v.shape)
    if needs[1]:
        vf = v.reshape(-1)
        dfx = np.zeros_like(gf)
        dfy = np.zeros_like(gf)
        dfz = np.zeros_like(gf)
        for flat, valid, (dx, dy, dz), (wx, wy, wz) in corners:
            val = np.where(valid, vf[flat], 0)
            sx, sy, sz = (1 if dx else -1), (1 if dy else -1), (1 if dz else -1)
            dfx += val * sx * wy * wz
            dfy += val * wx * sy * wz
            dfz += val * wx * wy * sz
        ggrid = np.stack([dfx * gf * ((w - 1) / 2), dfy * gf * ((h - 1) / 2), dfz * gf * ((d - 1) / 2)], axis=1)
        ggrid = ggrid.reshape(grid_shape).astype(g.dtype, copy=False)
    return gv, ggrid


def trilinear_sample(v: Node, grid: Node) -> Node:
    """Differentiable resampling of [B,D,H,W] volumes at [B,3,Do,Ho,Wo] grid points.

    Corners outside the volume contribute zero.
    """
    return forward(K.TRILINEAR_SAMPLE, [v, grid])


register(K.AFFINE_MATRIX, _affine_matrix_fwd, _affine_matrix_bwd)
register(K.AFFINE_GRID, _affine_grid_fwd, _affine_grid_bwd)
register(K.TRILINEAR_SAMPLE, _trilinear_fwd, _trilinear_bwd)


def resample(v: np.ndarray, m: np.ndarray, out_shape=None) -> np.ndarray:
    """Non-differentiable convenience: backward-warp one volume with a 4x4 matrix."""
    v = np.asarray(v)
    out_shape = tuple(out_shape or v.shape)
    grid = generate_grid(m, out_shape).astype(v.dtype)
    out, _ = _trilinear_fwd(v[None], grid[None])
    return out[0]


def transform_volume(v: np.ndarray, p) -> np.ndarray:
    """Resample ``v`` so that its content moves by the affine map of parameters ``p``.

    The object is scaled, rotated, then shifted; sampling uses the inverse matrix.
    """
    fwd_m = build_affine_matrix(p)
    return resample(v, np.linalg.inv(fwd_m))


# ---------------------------------------------------------------- normalizer


@dataclass
class NormalizerState:
    running_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_PARAMS, dtype=np.float32))
    momentum: float = 0.9
    updates_seen: int = 0


def normalize_params(batch: Node, state: NormalizerState, mode: str = "train") -> Node:
    """Remove the mean of each transform parameter.

    In train mode the mini-batch column mean is subtracted (differentiable) and
    the running mean is updated; eval mode subtracts the running mean.
    """
    batch = batch if isinstance(batch, Node) else Node(batch)
    if batch.value.ndim != 2 or batch.shape[1] != N_PARAMS or batch.shape[0] < 1:
        raise ShapeError("normalize_params", f"expected [B>=1, 9], got {batch.shape}")
    if mode == "train":
        batch_mean = batch.value.mean(axis=0)
        rm = state.running_mean
        state.running_mean = (state.momentum * rm + (1 - state.momentum) * batch_mean).astype(rm.dtype)
        state.updates_seen += 1
        return ops.center(batch)
    if mode == "eval":
        if state.updates_seen == 0:
            raise NotTrainedError("parameter normalizer has no running statistics yet")
        shift = np.broadcast_to(-state.running_mean.astype(batch.dtype), batch.shape).copy()
        return ops.add(batch, Node(shift))
    raise ValueError(f"unknown mode {mode!r}")


def polar_symmetric_factor(a: np.ndarray) -> np.ndarray:
    """Symmetric positive factor P of the polar decomposition A = U P."""
    u, s, vt = np.linalg.svd(a)
    return vt.T @ np.diag(s) @ vt
