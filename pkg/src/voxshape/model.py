"""Spatial transformer + learned templates + residual convolutional autoencoder."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from voxshape import config, geometry
from voxshape.autodiff import Node, no_grad, ops
from voxshape.errors import ShapeError


@dataclass
class ModelConfig:
    volume_extent: int = 32
    stn_channels: list = field(default_factory=lambda: [8, 16, 32, 32])
    cae_channels: list = field(default_factory=lambda: [8, 16, 32])
    descriptor_dim: int = 32
    leaky_slope: float = config.LEAKY_SLOPE
    num_structures: int = 3
    decoder_head_channels: int = 4
    init_seed: int = 0

    def __post_init__(self):
        self.stn_channels = [int(c) for c in self.stn_channels]
        self.cae_channels = [int(c) for c in self.cae_channels]
        if self.volume_extent % (2 ** len(self.cae_channels)):
            raise ValueError("volume_extent must be divisible by 2**len(cae_channels)")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be >= 1")

    @property
    def bottleneck_extent(self) -> int:
        return self.volume_extent // 2 ** len(self.cae_channels)

    @property
    def decoder_channels(self) -> list:
        return list(reversed(self.cae_channels[:-1])) + [self.decoder_head_channels]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    """Batched outputs; index ``i`` of each field belongs to sample ``i``."""

    theta: Node
    aligned: Node
    descriptor: Node
    recon: Node


def _he(rng, shape, fan_in, slope):
    return rng.standard_normal(shape) * np.sqrt(2.0 / ((1 + slope**2) * fan_in))


def smooth_seed(volume: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Soft version of a binary seed subject used to initialize a template."""
    return ndimage.gaussian_filter(np.asarray(volume, dtype=np.float64), sigma)


def template_logits_from(volume: np.ndarray, lo: float = 1e-4) -> np.ndarray:
    v = np.clip(np.asarray(volume, dtype=np.float64), lo, 1 - lo)
    return np.log(v) - np.log1p(-v)


class ShapeModel:
    """All learnable state plus the forward computation.

    ``params`` maps names to leaf nodes; ``normalizer`` holds the running
    transform-parameter mean used in eval mode.
    """

    def __init__(self, cfg: ModelConfig | None = None, dtype=config.TRAIN_DTYPE):
        self.cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.normalizer = geometry.NormalizerState()
        self.params: OrderedDict[str, Node] = OrderedDict()
        self._init_params(np.random.default_rng(self.cfg.init_seed))

    # ------------------------------------------------------------ parameters

    def _add(self, name, value):
        self.params[name] = Node(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _add_conv(self, name, cin, cout, rng, transposed=False, bias=False):
        slope = self.cfg.leaky_slope
        if transposed:
            self._add(name + ".w", _he(rng, (cin, cout, 3, 3, 3), cin * 27, slope))
        else:
            self._add(name + ".w", _he(rng, (cout, cin, 3, 3, 3), cin * 27, slope))
        if bias:
            self._add(name + ".b", np.zeros(cout))

    def _add_norm(self, name, c):
        self._add(name + ".g", np.ones(c))
        self._add(name + ".b", np.zeros(c))

    def _init_params(self, rng):
        cfg = self.cfg
        cin = 1
        for i, c in enumerate(cfg.stn_channels):
            self._add_conv(f"stn.conv{i}", cin, c, rng)
            self._add_norm(f"stn.norm{i}", c)
            cin = c
        # zero-initialized head: an untrained network predicts the identity transform
        self._add("stn.fc.w", np.zeros((cin, geometry.N_PARAMS)))
        self._add("stn.fc.b", np.zeros(geometry.N_PARAMS))

        cin = 1
        for i, c in enumerate(cfg.cae_channels):
            self._add_conv(f"enc{i}.down", cin, c, rng)
            self._add_norm(f"enc{i}.norm_a", c)
            self._add_conv(f"enc{i}.conv", c, c, rng)
            self._add_norm(f"enc{i}.norm_b", c)
            cin = c
        flat = cin * cfg.bottleneck_extent**3
        self._add("enc.fc.w", rng.standard_normal((flat, cfg.descriptor_dim)) / np.sqrt(flat))
        self._add("enc.fc.b", np.zeros(cfg.descriptor_dim))

        self._add("dec.fc.w", rng.standard_normal((cfg.descriptor_dim, flat)) / np.sqrt(cfg.descriptor_dim))
        self._add("dec.fc.b", np.zeros(flat))
        last = len(cfg.decoder_channels) - 1
        for i, c in enumerate(cfg.decoder_channels):
            self._add_conv(f"dec{i}.up", cin, c, rng, transposed=True)
            self._add_norm(f"dec{i}.norm_a", c)
            if i < last:
                self._add_conv(f"dec{i}.conv", c, c, rng)
                self._add_norm(f"dec{i}.norm_b", c)
            cin = c
        self._add_conv("dec.out", cin, 1, rng, bias=True)

        ext = cfg.volume_extent
        for s in range(cfg.num_structures):
            self._add(f"template{s}", np.zeros((ext, ext, ext)))

    def astype(self, dtype) -> "ShapeModel":
        """Copy of the model with every parameter cast to ``dtype``."""
        other = ShapeModel.__new__(ShapeModel)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.normalizer = geometry.NormalizerState(self.normalizer.running_mean.copy(), self.normalizer.momentum,
                                                    self.normalizer.updates_seen)
        other.params = OrderedDict(
            (k, Node(p.value.astype(dtype), requires_grad=True, name=k)) for k, p in self.params.items()
        )
        return other

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def init_template(self, structure_id: int, seed_volume: np.ndarray, sigma: float = 0.0):
        """Start a template from one subject (smoothed with ``sigma`` voxels; 0 keeps it as is)."""
        self._check_structure(structure_id)
        vol = smooth_seed(seed_volume, sigma) if sigma > 0 else seed_volume
        self.params[f"template{structure_id}"].value = template_logits_from(vol).astype(self.dtype)

    # ------------------------------------------------------------ pieces

    def _p(self, name) -> Node:
        return self.params[name]

    def _check_volumes(self, x: Node):
        e = self.cfg.volume_extent
        if x.value.ndim != 4 or x.shape[1:] != (e, e, e):
            raise ShapeError("model", f"expected [B,{e},{e},{e}] volumes, got {x.shape}")

    def _check_structure(self, structure_id):
        if not 0 <= int(structure_id) < self.cfg.num_structures:
            raise IndexError(f"structure id {structure_id} outside [0, {self.cfg.num_structures})")

    def _norm_act(self, x, name):
        x = ops.instance_norm(x, self._p(name + ".g"), self._p(name + ".b"))
        return ops.leaky_relu(x, self.cfg.leaky_slope)

    def stn_localize(self, x_in, mode: str = "train") -> Node:
        """[B,D,H,W] volumes -> [B,9] normalized transform parameters."""
        x_in = x_in if isinstance(x_in, Node) else Node(np.asarray(x_in, dtype=self.dtype))
        self._check_volumes(x_in)
        h = ops.reshape(x_in, (x_in.shape[0], 1) + x_in.shape[1:])
        for i in range(len(self.cfg.stn_channels)):
            h = ops.conv3d_stride2(h, self._p(f"stn.conv{i}.w"))
            h = self._norm_act(h, f"stn.norm{i}")
        h = ops.global_avg_pool(h)
        theta = ops.dense(h, self._p("stn.fc.w"), self._p("stn.fc.b"))
        return geometry.normalize_params(theta, self.normalizer, mode)

    def align(self, x_in, theta: Node) -> Node:
        x_in = x_in if isinstance(x_in, Node) else Node(np.asarray(x_in, dtype=self.dtype))
        grid = geometry.affine_grid(geometry.affine_matrix(theta), x_in.shape[1:])
        return geometry.trilinear_sample(x_in, grid)

    def templates(self) -> Node:
        """All templates as a [S,D,H,W] probability node."""
        parts = [ops.reshape(self._p(f"template{s}"), (1,) + self._p(f"template{s}").shape)
                 for s in range(self.cfg.num_structures)]
        logits = parts[0] if len(parts) == 1 else ops.concat(parts, axis=0)
        return ops.sigmoid(logits)

    def get_template(self, structure_id: int) -> Node:
        self._check_structure(structure_id)
        return ops.sigmoid(self._p(f"template{structure_id}"))

    def encode(self, x) -> Node:
        """[B,D,H,W] aligned volumes -> [B, descriptor_dim]."""
        x = x if isinstance(x, Node) else Node(np.asarray(x, dtype=self.dtype))
        self._check_volumes(x)
        b = x.shape[0]
        h = ops.reshape(x, (b, 1) + x.shape[1:])
        for i in range(len(self.cfg.cae_channels)):
            d = self._norm_act(ops.conv3d_stride2(h, self._p(f"enc{i}.down.w")), f"enc{i}.norm_a")
            r = ops.instance_norm(ops.conv3d(d, self._p(f"enc{i}.conv.w")),
                                  self._p(f"enc{i}.norm_b.g"), self._p(f"enc{i}.norm_b.b"))
            h = ops.leaky_relu(ops.add(r, d), self.cfg.leaky_slope)
        h = ops.reshape(h, (b, -1))
        return ops.dense(h, self._p("enc.fc.w"), self._p("enc.fc.b"))

    def decode(self, z) -> Node:
        """[B, descriptor_dim] -> [B,D,H,W] reconstruction in (0, 1)."""
        z = z if isinstance(z, Node) else Node(np.asarray(z, dtype=self.dtype))
        cfg = self.cfg
        if z.value.ndim != 2 or z.shape[1] != cfg.descriptor_dim:
            raise ShapeError("decode", f"expected [B,{cfg.descriptor_dim}] descriptors, got {z.shape}")
        b = z.shape[0]
        be = cfg.bottleneck_extent
        h = ops.dense(z, self._p("dec.fc.w"), self._p("dec.fc.b"))
        h = ops.leaky_relu(ops.reshape(h, (b, cfg.cae_channels[-1], be, be, be)), cfg.leaky_slope)
        last = len(cfg.decoder_channels) - 1
        for i in range(last + 1):
            ext = be * 2 ** (i + 1)
            u = self._norm_act(ops.transposed_conv3d(h, self._p(f"dec{i}.up.w"), out_shape=(ext,) * 3),
                               f"dec{i}.norm_a")
            if i == last:
                # full-resolution block is a plain upsampling (cost is dominated by this extent)
                h = u
                break
            r = ops.instance_norm(ops.conv3d(u, self._p(f"dec{i}.conv.w")),
                                  self._p(f"dec{i}.norm_b.g"), self._p(f"dec{i}.norm_b.b"))
            h = ops.leaky_relu(ops.add(r, u), cfg.leaky_slope)
        out = ops.conv3d(h, self._p("dec.out.w"), self._p("dec.out.b"))
        e = cfg.volume_extent
        return ops.sigmoid(ops.reshape(out, (b, e, e, e)))

    def forward(self, x_in, mode: str = "train") -> ForwardOutput:
        x_in = x_in if isinstance(x_in, Node) else Node(np.asarray(x_in, dtype=self.dtype))
        theta = self.stn_localize(x_in, mode)
        aligned = self.align(x_in, theta)
        z = self.encode(aligned)
        return ForwardOutput(theta=theta, aligned=aligned, descriptor=z, recon=self.decode(z))

    def describe(self, volumes, batch_size: int = 12) -> np.ndarray:
        """Eval-mode descriptors for a stack of volumes (no graph kept)."""
        volumes = np.asarray(volumes, dtype=self.dtype)
        if volumes.ndim == 3:
            volumes = volumes[None]
        out = []
        with no_grad():
            for i in range(0, len(volumes), batch_size):
                x = Node(volumes[i:i + batch_size])
                theta = self.stn_localize(x, mode="eval")
                out.append(self.encode(self.align(x, theta)).value)
        return np.concatenate(out, axis=0)
