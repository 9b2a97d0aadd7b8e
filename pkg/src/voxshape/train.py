"""ADAM training loop with the reconstruction-weight ramp, class-balanced batches and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from voxshape import data, losses
from voxshape.autodiff import backward, ops
from voxshape.errors import BadMagic, NumericError, Truncated, VersionMismatch
from voxshape.model import ModelConfig, ShapeModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps_adam: float = 1e-8
    batch_size: int = 12
    per_structure: int = 4
    epochs: int = 40
    passes_per_epoch: int = 24
    seed: int = 0
    zeta_start: float = 1e-10
    zeta_end: float = 1e-3
    clip_norm: float | None = 10.0
    template_sigma: float = 0.0
    antithetic_poses: bool = True
    augment: data.AugmentSpec = field(default_factory=lambda: data.TRAIN_AUGMENT)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.augment, dict):
            self.augment = data.AugmentSpec(**self.augment)

    def check(self, num_structures: int):
        if self.batch_size != self.per_structure * num_structures:
            raise ValueError(f"batch_size {self.batch_size} != per_structure {self.per_structure} x "
                             f"{num_structures} structures")

    @property
    def schedule(self) -> losses.ZetaSchedule:
        return losses.ZetaSchedule(self.zeta_start, self.zeta_end, self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, s: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected ADAM update of ``params`` (name -> Node) in place."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    s.step += 1
    c1 = 1.0 - b1**s.step
    c2 = 1.0 - b2**s.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = s.m.get(name)
        v = s.v.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        s.m[name], s.v[name] = m, v
        p.value = (p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale grads in place to global L2 norm ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total


# ---------------------------------------------------------------- training


@dataclass
class EpochStats:
    epoch: int
    align_dice: float
    recon_dice: float
    zeta: float
    seconds: float


@dataclass
class Trainer:
    model: ShapeModel
    cfg: TrainConfig
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0  # completed epochs

    def __post_init__(self):
        self.cfg.check(self.model.cfg.num_structures)


def batches_for_epoch(dataset: data.Dataset, cfg: TrainConfig, rng: np.random.Generator,
                      num_structures: int) -> list:
    """Lists of subject ids; every batch holds ``per_structure`` subjects of each class."""
    pools = dataset.by_class("train")
    sizes = [len(pools[c]) for c in range(num_structures)]
    if min(sizes) < cfg.per_structure:
        raise ValueError(f"need >= {cfg.per_structure} training subjects per structure, have {sizes}")
    n_batches = -(-cfg.passes_per_epoch * max(sizes) // cfg.per_structure)
    queues = {c: [] for c in range(num_structures)}
    batches = []
    for _ in range(n_batches):
        batch = []
        for c in range(num_structures):
            if len(queues[c]) < cfg.per_structure:
                queues[c].extend(rng.permutation([r.subject_id for r in pools[c]]).tolist())
            batch.extend(queues[c][:cfg.per_structure])
            del queues[c][:cfg.per_structure]
        batches.append(batch)
    return batches


def seed_subjects(dataset: data.Dataset, num_structures: int) -> dict:
    """Per class, the training subject with highest mean Dice to its classmates (an 'average' subject)."""
    out = {}
    for c, rows in dataset.by_class("train").items():
        if c >= num_structures:
            continue
        vols = [dataset.volumes[r.subject_id] for r in rows]
        scores = [np.mean([losses.dice_value(a, b) for b in vols]) for a in vols]
        out[c] = rows[int(np.argmax(scores))].subject_id
    return out


def init_templates(model: ShapeModel, dataset: data.Dataset, sigma: float = 0.0) -> dict:
    seeds = seed_subjects(dataset, model.cfg.num_structures)
    for c, sid in seeds.items():
        model.init_template(c, dataset.volumes[sid], sigma)
    return seeds


def train_step(model: ShapeModel, x: np.ndarray, classes, zeta: float, cfg: TrainConfig,
               adam: AdamState) -> dict:
    out = model.forward(x, mode="train")
    ref = ops.take(model.templates(), classes)
    lb = losses.total_loss(out.aligned, ref, out.recon, zeta, batched=True)
    if not np.isfinite(lb.total.value):
        raise NumericError("non-finite loss")
    model.zero_grad()
    backward(lb.total)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    if cfg.clip_norm:
        clip_grads(grads, cfg.clip_norm)
    adam_step(model.params, grads, adam, cfg.lr, cfg.betas, cfg.eps_adam)
    return {"align": -float(lb.alignment.value), "recon": -float(lb.reconstruction.value),
            "loss": float(lb.total.value)}


def batch_poses(n: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Augmentation poses for one batch.

    With ``antithetic_poses`` the second half mirrors the first, so the batch-mean pose stays
    near zero. The train-mode normalizer subtracts that mean from every prediction, and a
    large batch-mean pose would otherwise be an alignment error shared by the whole batch.
    """
    if not cfg.antithetic_poses:
        return np.stack([data.sample_pose(cfg.augment, rng) for _ in range(n)])
    half = [data.sample_pose(cfg.augment, rng) for _ in range(-(-n // 2))]
    return np.stack(half + [data.mirror_pose(p) for p in half])[:n]


def train_epoch(trainer: Trainer, dataset: data.Dataset, epoch: int) -> EpochStats:
    """Run 1-based ``epoch``; randomness is drawn from (seed, epoch) so resumption is exact."""
    model, cfg = trainer.model, trainer.cfg
    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, epoch])
    z = losses.zeta(epoch, cfg.schedule)
    classes_of = {r.subject_id: r.structure_class for r in dataset.rows}
    aligns, recons = [], []
    for batch in batches_for_epoch(dataset, cfg, rng, model.cfg.num_structures):
        poses = batch_poses(len(batch), cfg, rng)
        x = np.stack([data.apply_pose(dataset.volumes[sid], p) for sid, p in zip(batch, poses)])
        classes = np.array([classes_of[sid] for sid in batch])
        try:
            res = train_step(model, x, classes, z, cfg, trainer.adam)
        except NumericError as err:
            raise NumericError(f"epoch {epoch}, batch subjects {batch}: {err}") from err
        aligns.append(res["align"])
        recons.append(res["recon"])
    trainer.epoch = epoch
    return EpochStats(epoch, float(np.mean(aligns)), float(np.mean(recons)), z, time.perf_counter() - t0)


STATS_HEADER = "epoch,align_dice,recon_dice,zeta,seconds"


def append_stats(path, stats: EpochStats) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write(STATS_HEADER + "\n")
        fh.write(f"{stats.epoch},{stats.align_dice:.6f},{stats.recon_dice:.6f},{stats.zeta:.6g},{stats.seconds:.3f}\n")


def fit(trainer: Trainer, dataset: data.Dataset, out_dir=None, until_epoch: int | None = None) -> list:
    """Train from ``trainer.epoch + 1`` up to ``until_epoch`` (default: cfg.epochs)."""
    until = trainer.cfg.epochs if until_epoch is None else until_epoch
    if trainer.epoch == 0 and trainer.adam.step == 0:
        seeds = init_templates(trainer.model, dataset, trainer.cfg.template_sigma)
        log.info("templates initialized from subjects %s", seeds)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = []
    for epoch in range(trainer.epoch + 1, until + 1):
        stats = train_epoch(trainer, dataset, epoch)
        history.append(stats)
        log.info("epoch %d: align %.4f recon %.4f zeta %.3g (%.1fs)", epoch, stats.align_dice,
                 stats.recon_dice, stats.zeta, stats.seconds)
        if out_dir:
            append_stats(out_dir / "stats.csv", stats)
            save_checkpoint(out_dir / f"epoch{epoch:03d}.vxck", trainer)
            save_checkpoint(out_dir / "last.vxck", trainer)
    return history


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VXCK"
CKPT_VERSION = 1


def _record(name: str, arr: np.ndarray) -> bytes:
    enc = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(trainer: Trainer) -> bytes:
    model = trainer.model
    header = {
        "model_config": model.cfg.to_dict(),
        "train_config": trainer.cfg.to_dict(),
        "epoch": trainer.epoch,
        "adam_step": trainer.adam.step,
        # the epoch RNG is a pure function of (seed, epoch), so this pair is the full RNG state
        "rng": {"seed": trainer.cfg.seed, "next_epoch": trainer.epoch + 1},
        "normalizer": {"momentum": model.normalizer.momentum, "updates_seen": model.normalizer.updates_seen},
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    records = [_record("normalizer.running_mean", model.normalizer.running_mean)]
    for name, p in model.params.items():
        records.append(_record("param/" + name, p.value))
    for name in model.params:
        if name in trainer.adam.m:
            records.append(_record("adam.m/" + name, trainer.adam.m[name]))
            records.append(_record("adam.v/" + name, trainer.adam.v[name]))
    out = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hdr)) + hdr + struct.pack("<I", len(records))
    return out + b"".join(records)


def save_checkpoint(path, trainer: Trainer) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(checkpoint_bytes(trainer))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise Truncated(f"{self.path}: checkpoint truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Trainer:
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    if rd.take(4) != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a VXCK checkpoint")
    version, hlen = rd.unpack("<II")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(rd.take(hlen))
    (n_records,) = rd.unpack("<I")
    records = {}
    for _ in range(n_records):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode()
        (ndim,) = rd.unpack("<B")
        dims = rd.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        records[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if rd.pos != len(raw):
        raise Truncated(f"{path}: {len(raw) - rd.pos} trailing bytes")

    model = ShapeModel(ModelConfig(**header["model_config"]))
    for name, p in model.params.items():
        arr = records["param/" + name]
        if arr.shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, model expects {p.shape}")
        p.value = arr
    model.normalizer.running_mean = records["normalizer.running_mean"]
    model.normalizer.momentum = header["normalizer"]["momentum"]
    model.normalizer.updates_seen = header["normalizer"]["updates_seen"]
    tcfg = header["train_config"]
    cfg = TrainConfig(**tcfg)
    adam = AdamState(step=header["adam_step"])
    for name in model.params:
        if "adam.m/" + name in records:
            adam.m[name] = records["adam.m/" + name]
            adam.v[name] = records["adam.v/" + name]
    return Trainer(model=model, cfg=cfg, adam=adam, epoch=header["epoch"])
