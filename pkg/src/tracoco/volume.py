"""Volume and crop geometry.

Grids are plain numpy arrays of shape (H, W, C) in row-major order. Crops use
the convention ``origin = center - size // 2`` with half-open extent
``[origin, origin + size)`` on every axis.

Randomness always comes from an explicit ``numpy.random.Generator``; nothing
here touches global RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, GeometryError

Index3 = Tuple[int, int, int]

DEFAULT_MIN_OVERLAP = 0.25
DEFAULT_MAX_TRIES = 1000


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed % 2**64))


def _triple(value, name="value") -> Index3:
    if np.isscalar(value):
        value = (value,) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise GeometryError(f"{name} must have 3 components, got {len(value)}")
    return value


@dataclass(frozen=True)
class CropLattice:
    """Axis-aligned sub-lattice of a volume, identified by its center voxel."""

    center: Index3
    size: Index3

    def __post_init__(self):
        object.__setattr__(self, "center", _triple(self.center, "center"))
        object.__setattr__(self, "size", _triple(self.size, "size"))
        for axis, s in enumerate(self.size):
            if s < 1:
                raise GeometryError(f"crop size must be >= 1 on axis {axis}, got {s}")

    @classmethod
    def from_origin(cls, origin, size) -> "CropLattice":
        origin, size = _triple(origin, "origin"), _triple(size, "size")
        return cls(tuple(o + s // 2 for o, s in zip(origin, size)), size)

    @property
    def origin(self) -> Index3:
        return tuple(c - s // 2 for c, s in zip(self.center, self.size))

    @property
    def stop(self) -> Index3:
        return tuple(o + s for o, s in zip(self.origin, self.size))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, e) for o, e in zip(self.origin, self.stop))

    @property
    def volume(self) -> int:
        return int(np.prod(self.size))

    def check_fits(self, dims) -> None:
        dims = _triple(dims, "dims")
        for axis, (o, e, d) in enumerate(zip(self.origin, self.stop, dims)):
            if o < 0 or e > d:
                raise GeometryError(
                    f"crop extent [{o}, {e}) on axis {axis} exceeds volume extent [0, {d})"
                )


@dataclass(frozen=True)
class TranslatedCropPair:
    first: CropLattice
    second: CropLattice

    def __post_init__(self):
        if self.first.size != self.second.size:
            raise GeometryError("translated crops must share a size")

    @property
    def intersection(self) -> Tuple[Index3, Index3]:
        """Global ``(start, stop)`` of the overlap box; may be empty."""
        lo = tuple(max(a, b) for a, b in zip(self.first.origin, self.second.origin))
        hi = tuple(min(a, b) for a, b in zip(self.first.stop, self.second.stop))
        return lo, hi

    @property
    def intersection_shape(self) -> Index3:
        lo, hi = self.intersection
        return tuple(max(0, h - l) for l, h in zip(lo, hi))

    @property
    def intersection_volume(self) -> int:
        return int(np.prod(self.intersection_shape))

    def is_empty(self) -> bool:
        return self.intersection_volume == 0

    def local_slices(self, which: str) -> Tuple[slice, slice, slice]:
        """Slices selecting the overlap inside the ``which`` crop's local frame."""
        lattice = self._lattice(which)
        lo, hi = self.intersection
        if self.is_empty():
            raise GeometryError("translated crops do not intersect")
        return tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, lattice.origin))

    def _lattice(self, which: str) -> CropLattice:
        if which == "first":
            return self.first
        if which == "second":
            return self.second
        raise ValueError(f"which must be 'first' or 'second', got {which!r}")


def extract_crop(grid: np.ndarray, lattice: CropLattice) -> np.ndarray:
    if grid.ndim < 3:
        raise GeometryError(f"expected a 3D grid, got {grid.ndim} dims")
    lattice.check_fits(grid.shape[-3:])
    return grid[(..., *lattice.slices)]


def sample_crop_lattice(dims, crop_size, rng: np.random.Generator) -> CropLattice:
    dims, crop_size = _triple(dims, "dims"), _triple(crop_size, "crop_size")
    for axis, (d, c) in enumerate(zip(dims, crop_size)):
        if c > d:
            raise GeometryError(f"crop size {c} exceeds volume size {d} on axis {axis}")
    origin = tuple(int(rng.integers(0, d - c + 1)) for d, c in zip(dims, crop_size))
    return CropLattice.from_origin(origin, crop_size)


def sample_translated_pair(
    dims,
    crop_size,
    rng: np.random.Generator,
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP,
    max_tries: int = DEFAULT_MAX_TRIES,
) -> TranslatedCropPair:
    """Sample two distinct, overlapping crops of one volume.

    The first crop is uniform over feasible placements; the second is drawn
    uniformly by rejection until its centre differs from the first and the
    overlap covers at least ``min_overlap_fraction`` of the crop volume.
    """
    if not 0.0 < min_overlap_fraction <= 1.0:
        raise ConfigError(f"min_overlap_fraction must be in (0, 1], got {min_overlap_fraction}")
    first = sample_crop_lattice(dims, crop_size, rng)
    needed = max(1, int(np.ceil(min_overlap_fraction * first.volume - 1e-9)))
    for _ in range(max_tries):
        second = sample_crop_lattice(dims, crop_size, rng)
        if second.center == first.center:
            continue
        pair = TranslatedCropPair(first, second)
        if pair.intersection_volume >= needed:
            return pair
    raise ConfigError(
        f"no translated pair with overlap >= {min_overlap_fraction:g} found in {max_tries} "
        f"attempts for dims {tuple(dims)} and crop {tuple(crop_size)}"
    )


def map_intersection_to_local(pair: TranslatedCropPair, which: str):
    """List of ``(global_index, local_index)`` for every overlap voxel."""
    origin = pair._lattice(which).origin
    lo, hi = pair.intersection
    out = []
    for g in product(*(range(l, h) for l, h in zip(lo, hi))):
        out.append((g, tuple(a - o for a, o in zip(g, origin))))
    return out


def add_uniform_noise(grid: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    if amplitude < 0:
        raise ConfigError(f"noise amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return grid.copy()
    noise = rng.uniform(-amplitude, amplitude, size=grid.shape)
    return (grid + noise).astype(grid.dtype, copy=False)


def flip(volume: np.ndarray, label: Optional[np.ndarray], axes: Sequence[int]):
    """Deterministically reverse the given spatial axes of volume (and label)."""
    if label is not None and label.shape != volume.shape:
        raise GeometryError(f"label shape {label.shape} does not match volume shape {volume.shape}")
    axes = tuple(axes)
    if not axes:
        return volume.copy(), None if label is None else label.copy()
    volume = np.ascontiguousarray(np.flip(volume, axis=axes))
    if label is not None:
        label = np.ascontiguousarray(np.flip(label, axis=axes))
    return volume, label


def random_flip(volume, label, rng: np.random.Generator, axes=(0, 1, 2), p: float = 0.5):
    """Flip each axis in ``axes`` independently with probability ``p``.

    One uniform draw is consumed per candidate axis, so the stream position is
    independent of the outcome.
    """
    if label is not None and label.shape != volume.shape:
        raise GeometryError(f"label shape {label.shape} does not match volume shape {volume.shape}")
    chosen = [a for a in axes if rng.random() < p]
    return flip(volume, label, chosen)

