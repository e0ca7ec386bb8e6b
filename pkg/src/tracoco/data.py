"""Volume files, CT-style preprocessing, dataset splits and synthetic phantoms.

Volume file layout (little-endian)::

    b"TRCC" | u32 version=1 | u8 dtype (1=float32 image, 2=uint8 label)
    | 3*u32 dims (H, W, C) | 3*f32 spacing (mm) | payload (row-major, C fastest)
    | optional: b"LBL0" | uint8 label payload

A dtype-2 file carries only a label grid.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, MetadataError
from .volume import make_rng

MAGIC = b"TRCC"
LABEL_TAG = b"LBL0"
VERSION = 1
DTYPE_IMAGE = 1
DTYPE_LABEL = 2
_HEADER = struct.Struct("<4sIB3I3f")


@dataclass
class VolumeRecord:
    id: str
    image: Optional[np.ndarray]
    label: Optional[np.ndarray] = None
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.image is not None and self.label is not None and self.image.shape != self.label.shape:
            raise FormatError(f"record {self.id}: label shape {self.label.shape} != image shape {self.image.shape}")
        if self.label is not None and not np.isin(self.label, (0, 1)).all():
            raise FormatError(f"record {self.id}: label values must be 0 or 1")

    @property
    def dims(self):
        return (self.image if self.image is not None else self.label).shape


def write_volume(record: VolumeRecord, path) -> None:
    if record.image is not None:
        dtype, payload = DTYPE_IMAGE, np.ascontiguousarray(record.image, dtype="<f4")
    elif record.label is not None:
        dtype, payload = DTYPE_LABEL, np.ascontiguousarray(record.label, dtype=np.uint8)
    else:
        raise FormatError(f"record {record.id} has neither image nor label")
    if payload.ndim != 3:
        raise FormatError(f"record {record.id} must be 3D, got shape {payload.shape}")
    parts = [_HEADER.pack(MAGIC, VERSION, dtype, *payload.shape, *record.spacing), payload.tobytes()]
    if dtype == DTYPE_IMAGE and record.label is not None:
        parts += [LABEL_TAG, np.ascontiguousarray(record.label, dtype=np.uint8).tobytes()]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


def read_volume(path, record_id: Optional[str] = None) -> VolumeRecord:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, version, dtype, h, w, c, sx, sy, sz = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype not in (DTYPE_IMAGE, DTYPE_LABEL):
        raise FormatError(f"unknown dtype code {dtype}", offset=8)
    if min(h, w, c) < 1:
        raise FormatError(f"invalid dims {(h, w, c)}", offset=9)
    n = h * w * c
    pos = _HEADER.size
    itemsize = 4 if dtype == DTYPE_IMAGE else 1
    end = pos + n * itemsize
    if len(data) < end:
        raise FormatError(f"payload needs {n * itemsize} bytes, found {len(data) - pos}", offset=pos)
    arr = np.frombuffer(data, dtype="<f4" if dtype == DTYPE_IMAGE else np.uint8, count=n, offset=pos)
    arr = arr.reshape(h, w, c).copy()
    image, label = (arr.astype(np.float32), None) if dtype == DTYPE_IMAGE else (None, arr)
    pos = end
    if pos < len(data):
        if dtype != DTYPE_IMAGE or data[pos:pos + 4] != LABEL_TAG:
            raise FormatError("unexpected trailing bytes", offset=pos)
        pos += 4
        if len(data) - pos != n:
            raise FormatError(f"label section needs {n} bytes, found {len(data) - pos}", offset=pos)
        label = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).reshape(h, w, c).copy()
        if not np.isin(label, (0, 1)).all():
            raise FormatError("label values must be 0 or 1", offset=pos)
    rid = record_id if record_id is not None else Path(path).name.split(".")[0]
    return VolumeRecord(rid, image, label, (sx, sy, sz))


# -- preprocessing ----------------------------------------------------------


def clip_and_scale(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ConfigError(f"clip bounds must satisfy lo < hi, got ({lo}, {hi})")
    x = np.clip(image.astype(np.float64), lo, hi)
    span = x.max() - x.min()
    if span == 0:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - x.min()) / span).astype(np.float32)


def resample(record: VolumeRecord, target_spacing) -> VolumeRecord:
    """Trilinear resampling for the image, nearest neighbour for the label."""
    if record.spacing is None:
        raise MetadataError(f"record {record.id} has no spacing; cannot resample")
    target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
    if np.any(target <= 0):
        raise ConfigError("target spacing must be positive")
    spacing = np.asarray(record.spacing, dtype=np.float64)
    if np.allclose(spacing, target, rtol=0, atol=1e-6):
        return record
    dims = np.asarray(record.dims)
    out_dims = np.maximum(1, np.round(dims * spacing / target)).astype(int)
    zoom = out_dims / dims
    image = label = None
    if record.image is not None:
        image = ndimage.zoom(record.image, zoom, order=1, mode="nearest", grid_mode=False).astype(np.float32)
    if record.label is not None:
        label = ndimage.zoom(record.label, zoom, order=0, mode="nearest", grid_mode=False).astype(np.uint8)
    return VolumeRecord(record.id, image, label, tuple(float(s) for s in target))


def preprocess_ct(record: VolumeRecord, clip_lo: float = -125.0, clip_hi: float = 275.0,
                  target_spacing=None) -> VolumeRecord:
    """Clip intensities (Hounsfield units by default), min-max scale to [0, 1],
    then optionally resample to ``target_spacing``."""
    if target_spacing is not None and record.spacing is None:
        raise MetadataError(f"record {record.id} has no spacing; cannot resample")
    out = VolumeRecord(record.id, clip_and_scale(record.image, clip_lo, clip_hi), record.label, record.spacing)
    if target_spacing is not None:
        out = resample(out, target_spacing)
        if out.image is not None:
            out.image = np.clip(out.image, 0.0, 1.0)
    return out


# -- splits -----------------------------------------------------------------


@dataclass
class SplitSpec:
    labelled: List[str]
    unlabelled: List[str]
    validation: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        groups = [set(self.labelled), set(self.unlabelled), set(self.validation), set(self.test)]
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise ConfigError("split id sets must be pairwise disjoint")
        if not self.labelled:
            raise ConfigError("split must contain at least one labelled id")

    def to_json(self) -> str:
        return json.dumps(
            {"labelled": self.labelled, "unlabelled": self.unlabelled, "validation": self.validation,
             "test": self.test, "seed": self.seed},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(d["labelled"], d["unlabelled"], d.get("validation", []), d.get("test", []), d.get("seed", 0))


def make_split(ids: Sequence[str], labelled_fraction: float, seed: int, n_val: int = 0, n_test: int = 0,
               n_labelled: Optional[int] = None) -> SplitSpec:
    """Shuffle ``ids`` by seed, reserve test and validation ids, and label
    ``round(labelled_fraction * n_train)`` of the rest (or ``n_labelled``)."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("ids must be unique")
    if n_labelled is None and not 0.0 < labelled_fraction < 1.0:
        raise ConfigError(f"labelled fraction must be in (0, 1), got {labelled_fraction}")
    if n_val < 0 or n_test < 0 or n_val + n_test >= len(ids):
        raise ConfigError(f"not enough ids ({len(ids)}) for {n_val} validation and {n_test} test")
    order = make_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    k = n_labelled if n_labelled is not None else int(round(labelled_fraction * len(train)))
    if k < 1:
        raise ConfigError(f"labelled fraction {labelled_fraction} of {len(train)} training ids yields no labelled ids")
    if k > len(train):
        raise ConfigError(f"cannot label {k} of {len(train)} training ids")
    return SplitSpec(sorted(train[:k]), sorted(train[k:]), sorted(val), sorted(test), seed)


# -- synthetic phantoms -----------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    dims: Tuple[int, int, int] = (48, 48, 48)
    n_objects: Tuple[int, int] = (1, 3)
    radius_range: Tuple[float, float] = (5.0, 10.0)
    bg_mean: float = 0.35
    contrast: float = 0.3
    noise_sigma: float = 0.1
    distractor_density: float = 4.0
    distractor_radius: Tuple[float, float] = (1.5, 3.0)
    # Distractors reuse the foreground intensity so only shape/size cues separate them.
    distractor_contrast: Optional[float] = None
    # Per-object contrast is drawn from contrast * U(1 - jitter, 1 + jitter).
    contrast_jitter: float = 0.0
    # Relative amplitude of low-frequency radius modulation (0 = exact ellipsoids).
    shape_jitter: float = 0.0
    bias_amplitude: float = 0.0
    smooth_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid radius range {self.radius_range}")
        if 2 * hi + 2 > min(dims):
            raise ConfigError(f"radius {hi} does not fit inside dims {dims}")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if not 1 <= self.n_objects[0] <= self.n_objects[1]:
            raise ConfigError(f"invalid object count range {self.n_objects}")
        if self.distractor_density < 0:
            raise ConfigError("distractor density must be >= 0")
        if not 0 <= self.contrast_jitter <= 1 or not 0 <= self.shape_jitter < 1:
            raise ConfigError("contrast_jitter must be in [0, 1] and shape_jitter in [0, 1)")


def ellipsoid_mask(dims, center, radii, rotation=None, modulation=None) -> np.ndarray:
    """Voxels whose centre satisfies ``sum(((R^T (x - c)) / r)^2) <= 1``.

    ``modulation`` is an optional ``(amplitudes, directions)`` pair that bumps
    the surface by ``1 + sum(a_k * cos(3 * u . d_k))`` along unit direction u.
    """
    grid = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij"), axis=-1)
    d = grid - np.asarray(center, dtype=np.float64)
    if rotation is not None:
        d = d @ np.asarray(rotation)
    rho = np.sqrt(((d / np.asarray(radii, dtype=np.float64)) ** 2).sum(axis=-1))
    if modulation is None:
        return rho <= 1.0
    amps, dirs = modulation
    u = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
    bump = 1.0 + (amps[None, None, None, :] * np.cos(3.0 * (u @ dirs.T))).sum(axis=-1)
    return rho <= bump


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def synth_volume(cfg: SynthConfig, rng: np.random.Generator, record_id: str) -> VolumeRecord:
    dims = cfg.dims
    label = np.zeros(dims, dtype=bool)
    lo, hi = cfg.radius_range
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    image = np.full(dims, cfg.bg_mean, dtype=np.float64)
    for _ in range(n):
        radii = rng.uniform(lo, hi, size=3)
        margin = np.ceil(radii.max() * (1 + cfg.shape_jitter)) + 1
        center = [rng.uniform(min(margin, d / 2), max(d - 1 - margin, d / 2)) for d in dims]
        modulation = None
        if cfg.shape_jitter:
            dirs = rng.normal(size=(3, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            modulation = (rng.uniform(0, cfg.shape_jitter / 3, size=3), dirs)
        obj = ellipsoid_mask(dims, center, radii, _random_rotation(rng), modulation)
        contrast = cfg.contrast * rng.uniform(1 - cfg.contrast_jitter, 1 + cfg.contrast_jitter)
        image[obj & ~label] += contrast
        label |= obj

    distractors = np.zeros(dims, dtype=bool)
    n_dis = int(rng.poisson(cfg.distractor_density))
    dlo, dhi = cfg.distractor_radius
    for _ in range(n_dis):
        r = rng.uniform(dlo, dhi)
        center = [rng.uniform(0, d - 1) for d in dims]
        distractors |= ellipsoid_mask(dims, center, (r, r, r))
    distractors &= ~ndimage.binary_dilation(label, iterations=2)

    dc = cfg.contrast if cfg.distractor_contrast is None else cfg.distractor_contrast
    image[distractors] += dc
    if cfg.bias_amplitude:
        axes = [np.linspace(-1, 1, d) for d in dims]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        w = rng.normal(size=3)
        image += cfg.bias_amplitude * np.tanh(w[0] * gx + w[1] * gy + w[2] * gz)
    if cfg.smooth_sigma:
        image = ndimage.gaussian_filter(image, cfg.smooth_sigma)
    if cfg.noise_sigma:
        image += rng.normal(0.0, cfg.noise_sigma, size=dims)
    return VolumeRecord(record_id, image.astype(np.float32), label.astype(np.uint8))


def synth_generate(cfg: SynthConfig, n: int, prefix: str = "case") -> List[VolumeRecord]:
    if n < 1:
        raise ConfigError("need at least one volume")
    rng = make_rng(cfg.seed)
    width = max(3, len(str(n - 1)))
    return [synth_volume(cfg, rng, f"{prefix}{i:0{width}d}") for i in range(n)]


def write_dataset(records: Sequence[VolumeRecord], directory, split: Optional[SplitSpec] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_volume(rec, directory / f"{rec.id}.trcc")
    if split is not None:
        (directory / "split.json").write_text(split.to_json())
    return directory


def load_dataset(directory):
    """Return ``({id: VolumeRecord}, SplitSpec or None)`` for a dataset directory."""
    directory = Path(directory)
    records = {p.name[:-5]: read_volume(p) for p in sorted(directory.glob("*.trcc"))}
    split_path = directory / "split.json"
    split = SplitSpec.from_json(split_path.read_text()) if split_path.exists() else None
    return records, split
