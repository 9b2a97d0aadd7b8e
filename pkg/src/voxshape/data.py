"""Synthetic segmentation population: three parametric structure classes, repeat
scans, pose augmentation, the VXS1 volume format and the dataset manifest.

Class 0 is a bent capsule (hippocampus-like), class 1 a tapering C-shaped
arc (caudate-like), class 2 a curved lens (putamen-like).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from voxshape import geometry
from voxshape.errors import BadMagic, Truncated, UnsupportedDtype, VoxShapeError

NUM_CLASSES = 3
CLASS_NAMES = ("hippocampus-like", "caudate-like", "putamen-like")
LATENT_NAMES = ("elongation", "bend", "thickness", "bulge_amp", "bulge_phase", "taper", "noise_a", "noise_b")

# mean, std of the six continuous latent entries per class
_LATENT_DIST = {
    0: ((1.50, 1.10, 0.40, 0.30, 0.50, 0.30), (0.08, 0.25, 0.025, 0.12, 0.18, 0.15)),
    1: ((1.90, 2.60, 0.36, 0.25, 0.50, 0.80), (0.10, 0.30, 0.025, 0.10, 0.18, 0.12)),
    2: ((1.30, 0.35, 0.42, 0.15, 0.50, 0.25), (0.08, 0.15, 0.03, 0.07, 0.18, 0.12)),
}
_TUBE_SAMPLES = 48
_SURFACE_NOISE = 0.045
_REPEAT_LATENT_NOISE = 0.02
_REPEAT_FLIP_RATE = 0.005


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: int
    structure_class: int
    latent: tuple

    @classmethod
    def sample(cls, subject_id: int, structure_class: int, latent_seed: int) -> "SubjectSpec":
        return cls(subject_id, structure_class, sample_latent(structure_class, latent_seed))


def sample_latent(structure_class: int, latent_seed: int) -> tuple:
    if structure_class not in _LATENT_DIST:
        raise ValueError(f"unknown structure class {structure_class}")
    rng = np.random.default_rng([latent_seed, structure_class])
    mu, sd = (np.array(v) for v in _LATENT_DIST[structure_class])
    cont = mu + sd * np.clip(rng.standard_normal(6), -2.5, 2.5)
    cont[4] = cont[4] % 1.0
    seeds = rng.integers(0, 2**31 - 1, size=2)
    return tuple(float(v) for v in cont) + tuple(float(s) for s in seeds)


def _surface_noise(points, seed_a, seed_b):
    rng = np.random.default_rng([int(seed_a), int(seed_b)])
    total = np.zeros(points.shape[1:])
    for _ in range(5):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(2.0, 4.5)
        phase = rng.uniform(0, 2 * np.pi)
        total += np.sin(freq * np.tensordot(direction, points, axes=1) + phase)
    return _SURFACE_NOISE * total / np.sqrt(2.5)


def _tube_sdf(points, length, bend, thickness, bulge_amp, bulge_pos, taper, flat_z):
    t = np.linspace(0.0, 1.0, _TUBE_SAMPLES)
    bend = max(abs(bend), 1e-3)
    radius_arc = length / bend
    phi = bend * (t - 0.5)
    cx = radius_arc * np.sin(phi)
    cy = radius_arc * (1 - np.cos(phi))
    cy -= cy.mean()
    r = thickness * (1 + taper * (0.5 - t)) * (1 + bulge_amp * np.exp(-(((t - bulge_pos) / 0.14) ** 2)))
    r = np.maximum(r, 0.04)
    px, py, pz = (points[i].reshape(-1, 1) for i in range(3))
    dist = np.sqrt((px - cx) ** 2 + (py - cy) ** 2 + (pz / flat_z) ** 2) - r
    return dist.min(axis=1).reshape(points.shape[1:])


def _lens_sdf(points, length, bend, thickness, bulge_amp, bulge_phase, taper):
    x, y, z = points
    y = y - bend * (x**2 - 0.25)
    ang = np.arctan2(y, x)
    mod = 1 + bulge_amp * np.cos(2 * ang - 2 * np.pi * bulge_phase)
    a, b = 0.5 * length * mod, 0.62 * length
    c = thickness * (1 + taper * x)
    c = np.maximum(c, 0.08)
    q = np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)
    return (q - 1) * np.minimum(np.minimum(a, b), c)


def _sdf(spec: SubjectSpec, points):
    el, bend, thick, bamp, bphase, taper, na, nb = spec.latent
    if spec.structure_class == 0:
        d = _tube_sdf(points, el, bend, thick, bamp, 0.15 + 0.7 * bphase, taper, flat_z=0.85)
    elif spec.structure_class == 1:
        d = _tube_sdf(points, el, bend, thick, bamp, 0.1 + 0.5 * bphase, taper, flat_z=1.0)
    else:
        d = _lens_sdf(points, el, bend, thick, bamp, bphase, taper)
    return d + _surface_noise(points, na, nb)


def _render(spec: SubjectSpec, extent: int, offset=(0.0, 0.0, 0.0)):
    pts = geometry.normalized_coords((extent,) * 3) + np.asarray(offset, dtype=np.float64).reshape(3, 1, 1, 1)
    sdf = _sdf(spec, pts)
    # smooth occupancy from a steep sigmoid of the signed distance, binarized at 1/2
    occ = np.clip(1.0 / (1.0 + np.exp(np.clip(sdf / 0.02, -50, 50))), 0.0, 1.0)
    return (occ >= 0.5).astype(np.float32)


def synth_subject(spec: SubjectSpec, extent: int = 32) -> np.ndarray:
    """Binary [extent]^3 volume of the subject, centred on its centroid."""
    if extent < 16:
        raise ValueError("extent must be >= 16")
    vol = _render(spec, extent)
    if vol.sum() == 0:
        raise VoxShapeError(f"subject {spec.subject_id}: latent produced an empty volume")
    com = np.array(ndimage.center_of_mass(vol))  # z, y, x indices
    offset = (com[::-1] * 2 / (extent - 1)) - 1.0  # x, y, z normalized
    vol = _render(spec, extent, offset)
    if vol.sum() == 0:
        raise VoxShapeError(f"subject {spec.subject_id}: latent produced an empty volume")
    return vol


def boundary_mask(vol: np.ndarray) -> np.ndarray:
    b = vol > 0.5
    return b ^ ndimage.binary_erosion(b) | (ndimage.binary_dilation(b) ^ b)


def simulate_repeat_scan(spec: SubjectSpec, noise_seed: int, extent: int = 32) -> np.ndarray:
    """Second acquisition of the same subject: jittered shape latent plus boundary voxel flips."""
    rng = np.random.default_rng([int(noise_seed), spec.subject_id])
    lat = np.array(spec.latent)
    lat[:6] = lat[:6] * (1 + _REPEAT_LATENT_NOISE * rng.standard_normal(6))
    repeat = SubjectSpec(spec.subject_id, spec.structure_class, tuple(float(v) for v in lat))
    vol = synth_subject(repeat, extent)
    flips = boundary_mask(vol) & (rng.random(vol.shape) < _REPEAT_FLIP_RATE)
    vol[flips] = 1.0 - vol[flips]
    return vol


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    max_rot_deg: float = 35.0
    max_scale_frac: float = 0.5
    scale_mode: str = "per-axis"
    max_trans: float = 0.0

    def __post_init__(self):
        if min(self.max_rot_deg, self.max_scale_frac, self.max_trans) < 0:
            raise ValueError("augmentation bounds must be non-negative")
        if self.scale_mode not in ("global", "per-axis"):
            raise ValueError(f"scale_mode must be 'global' or 'per-axis', got {self.scale_mode!r}")


TRAIN_AUGMENT = AugmentSpec()
QUERY_SIMILARITY = AugmentSpec(15.0, 0.2, "global", 0.0)
QUERY_AFFINE = AugmentSpec(15.0, 0.2, "per-axis", 0.0)


def sample_pose(a: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random 9-parameter pose within the bounds of ``a``."""
    p = np.zeros(9)
    p[0:3] = np.deg2rad(rng.uniform(-a.max_rot_deg, a.max_rot_deg, 3))
    p[3:6] = rng.uniform(-a.max_trans, a.max_trans, 3)
    if a.scale_mode == "global":
        scales = np.full(3, rng.uniform(1 - a.max_scale_frac, 1 + a.max_scale_frac))
    else:
        scales = rng.uniform(1 - a.max_scale_frac, 1 + a.max_scale_frac, 3)
    p[6:9] = np.log(scales)
    return p


def mirror_pose(p: np.ndarray) -> np.ndarray:
    """Antithetic partner of a sampled pose: angles and offsets negated, each scale s replaced by 2 - s.

    Both maps preserve the sampling distribution of ``sample_pose``, so the partner is an
    equally likely draw whose parameters cancel ``p``'s to first order.
    """
    q = np.asarray(p, dtype=np.float64).copy()
    q[0:6] = -q[0:6]
    q[6:9] = np.log(2.0 - np.exp(q[6:9]))
    return q


def apply_pose(v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Warp ``v`` by pose ``p``, keeping values in [0, 1] and the input dtype."""
    if not np.any(p):
        return v.copy()
    return np.clip(geometry.transform_volume(v, p), 0.0, 1.0).astype(v.dtype)


def augment(v: np.ndarray, a: AugmentSpec, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return apply_pose(v, sample_pose(a, rng))


# ---------------------------------------------------------------- VXS1 files

_VOL_MAGIC = b"VXS1"
_VOL_HEADER = struct.Struct("<4sIIII")


def write_volume(path, v: np.ndarray) -> None:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    d, h, w = v.shape
    payload = np.ascontiguousarray(v, dtype="<f4").tobytes()
    Path(path).write_bytes(_VOL_HEADER.pack(_VOL_MAGIC, d, h, w, 0) + payload)


def read_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _VOL_HEADER.size:
        if not raw.startswith(_VOL_MAGIC[: len(raw)]):
            raise BadMagic(f"{path}: not a VXS1 volume")
        raise Truncated(f"{path}: header is {len(raw)} bytes, need {_VOL_HEADER.size}")
    magic, d, h, w, dtype = _VOL_HEADER.unpack_from(raw)
    if magic != _VOL_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if dtype != 0:
        raise UnsupportedDtype(f"{path}: dtype flag {dtype} (only 0 = float32 supported)")
    need = 4 * d * h * w
    payload = raw[_VOL_HEADER.size:]
    if len(payload) != need:
        raise Truncated(f"{path}: payload is {len(payload)} bytes, header declares {need}")
    return np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)


# ---------------------------------------------------------------- datasets

SPLITS = ("train", "val", "test")
SPLIT_RATIO = (165, 50, 100)
REPEAT_SUBJECTS = 20


@dataclass(frozen=True)
class ManifestRow:
    subject_id: int
    structure_class: int
    latent_seed: int
    split: str

    @property
    def spec(self) -> SubjectSpec:
        return SubjectSpec.sample(self.subject_id, self.structure_class, self.latent_seed)


def split_counts(n_subjects: int, ratio=SPLIT_RATIO) -> tuple:
    """Split sizes proportional to ``ratio`` (default 165:50:100), by largest remainder."""
    if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) <= 0:
        raise ValueError(f"split ratio needs three non-negative parts, got {ratio}")
    total = sum(ratio)
    raw = [n_subjects * r / total for r in ratio]
    counts = [int(np.floor(x)) for x in raw]
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[: n_subjects - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def make_manifest(n_subjects: int, seed: int, ratio=SPLIT_RATIO) -> list:
    """Subjects with round-robin classes inside each split so every split is class balanced."""
    counts = split_counts(n_subjects, ratio)
    rng = np.random.default_rng(seed)
    latent_seeds = rng.integers(0, 2**31 - 1, size=n_subjects)
    rows, sid = [], 0
    for split, count in zip(SPLITS, counts):
        for j in range(count):
            rows.append(ManifestRow(sid, j % NUM_CLASSES, int(latent_seeds[sid]), split))
            sid += 1
    return rows


def write_manifest(path, rows) -> None:
    lines = [f"{r.subject_id},{r.structure_class},{r.latent_seed},{r.split}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sid, cls, seed, split = line.split(",")
        rows.append(ManifestRow(int(sid), int(cls), int(seed), split))
    return rows


def repeat_subject_ids(rows) -> list:
    """Test subjects that receive a simulated repeat scan (first 20 of the test split)."""
    return [r.subject_id for r in rows if r.split == "test"][:REPEAT_SUBJECTS]


def volume_path(root, subject_id: int, repeat: bool = False) -> Path:
    return Path(root) / ("repeats" if repeat else "volumes") / f"{subject_id:04d}.vxs"


@dataclass
class Dataset:
    """In-memory view of a generated dataset."""

    rows: list
    volumes: dict
    repeats: dict

    def split(self, name: str) -> list:
        return [r for r in self.rows if r.split == name]

    def by_class(self, name: str) -> dict:
        out = {c: [] for c in range(NUM_CLASSES)}
        for r in self.split(name):
            out[r.structure_class].append(r)
        return out


def generate_dataset(n_subjects: int, seed: int, extent: int = 32, ratio=SPLIT_RATIO) -> Dataset:
    rows = make_manifest(n_subjects, seed, ratio)
    volumes = {r.subject_id: synth_subject(r.spec, extent) for r in rows}
    repeats = {sid: simulate_repeat_scan(rows[sid].spec, rows[sid].latent_seed, extent)
               for sid in repeat_subject_ids(rows)}
    return Dataset(rows, volumes, repeats)


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "repeats").mkdir(parents=True, exist_ok=True)
    write_manifest(root / "manifest.csv", ds.rows)
    for sid, v in ds.volumes.items():
        write_volume(volume_path(root, sid), v)
    for sid, v in ds.repeats.items():
        write_volume(volume_path(root, sid, repeat=True), v)


def load_dataset(root) -> Dataset:
    root = Path(root)
    rows = read_manifest(root / "manifest.csv")
    volumes = {r.subject_id: read_volume(volume_path(root, r.subject_id)) for r in rows}
    repeats = {}
    for sid in repeat_subject_ids(rows):
        p = volume_path(root, sid, repeat=True)
        if p.exists():
            repeats[sid] = read_volume(p)
    return Dataset(rows, volumes, repeats)
