"""Affine-invariant volumetric shape descriptors learned with a spatial transformer and an autoencoder."""

from voxshape import autodiff, geometry  # noqa: F401  (geometry registers its primitives)

__version__ = "0.1.0"
