"""3D CutMix: cuboid masks, mixing of inputs and pseudo-label fields, and the
mixed cross-pseudo-supervision loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .objectives import CLASS_DIM, CrcConfig, pseudo_label_loss
from .volume import _triple, add_uniform_noise

DEFAULT_FRACTION_RANGE = (0.2, 0.5)


@dataclass(frozen=True)
class CutMixMask:
    dims: Tuple[int, int, int]
    origin: Tuple[int, int, int]
    size: Tuple[int, int, int]

    @property
    def fraction(self) -> float:
        return float(np.prod(self.size)) / float(np.prod(self.dims))

    @property
    def array(self) -> np.ndarray:
        m = np.zeros(self.dims, dtype=np.uint8)
        m[tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))] = 1
        return m


def _feasible_sizes(dims, lo, hi):
    axes = [np.arange(1, d + 1) for d in dims]
    frac = (
        axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    ) / float(np.prod(dims))
    return np.argwhere((frac >= lo) & (frac <= hi)) + 1


def sample_mask(dims, rng: np.random.Generator, fraction_range=DEFAULT_FRACTION_RANGE, max_tries: int = 50) -> CutMixMask:
    """One uniformly placed cuboid whose volume fraction lies in ``fraction_range``.

    Box sides follow the volume's aspect ratio scaled by the cube root of a
    target fraction drawn uniformly from the range. If rounding keeps missing
    a narrow range, a box is drawn from the enumerated feasible sizes instead.
    """
    dims = _triple(dims, "dims")
    lo, hi = (float(v) for v in fraction_range)
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"fraction range must satisfy 0 <= lo <= hi <= 1, got {fraction_range}")
    if min(dims) < 1:
        raise ConfigError(f"mask dims must be >= 1, got {dims}")
    total = float(np.prod(dims))
    if hi == 0.0:
        return CutMixMask(dims, (0, 0, 0), (0, 0, 0))

    size = None
    for _ in range(max_tries):
        target = rng.uniform(lo, hi) if hi > lo else lo
        scale = target ** (1.0 / 3.0)
        cand = tuple(int(min(d, max(1, round(d * scale)))) for d in dims)
        if lo <= np.prod(cand) / total <= hi:
            size = cand
            break
    if size is None:
        feasible = _feasible_sizes(dims, lo, hi)
        if len(feasible) == 0:
            raise ConfigError(f"no integer cuboid in {dims} has volume fraction in [{lo}, {hi}]")
        size = tuple(int(v) for v in feasible[rng.integers(len(feasible))])
    origin = tuple(int(rng.integers(0, d - s + 1)) for d, s in zip(dims, size))
    return CutMixMask(dims, origin, size)


def _mask_like(m, ref):
    arr = m.array if isinstance(m, CutMixMask) else m
    if isinstance(ref, torch.Tensor):
        arr = torch.as_tensor(np.asarray(arr), device=ref.device).bool()
    else:
        arr = np.asarray(arr).astype(bool)
    return arr


def mix_volumes(x_i, x_j, m):
    """``(1 - m) * x_i + m * x_j`` as an exact voxelwise selection."""
    if x_i.shape != x_j.shape:
        raise ShapeError(f"cannot mix shapes {tuple(x_i.shape)} and {tuple(x_j.shape)}")
    mask = _mask_like(m, x_i)
    if tuple(mask.shape) != tuple(x_i.shape[-3:]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match volume {tuple(x_i.shape)}")
    if isinstance(x_i, torch.Tensor):
        return torch.where(mask, x_j, x_i)
    return np.where(mask, x_j, x_i)


def mix_pseudo_labels(y_i, y_j, m):
    """Mix two probability fields ``(..., 2, H, W, C)``; the class axis is broadcast."""
    if y_i.shape != y_j.shape:
        raise ShapeError(f"cannot mix shapes {tuple(y_i.shape)} and {tuple(y_j.shape)}")
    if y_i.shape[CLASS_DIM] != 2:
        raise ShapeError(f"expected a 2-class field, got shape {tuple(y_i.shape)}")
    return mix_volumes(y_i, y_j, m)


def _noisy(batch: torch.Tensor, amplitude: float, rng: np.random.Generator) -> torch.Tensor:
    if amplitude == 0:
        return batch
    noise = add_uniform_noise(np.zeros(batch.shape, dtype=np.float64), amplitude, rng)
    return batch + torch.from_numpy(noise).to(batch.dtype)


def cutmix_semi_loss(
    models,
    x_i: torch.Tensor,
    x_j: torch.Tensor,
    rng: np.random.Generator,
    crc_cfg: CrcConfig = CrcConfig(),
    fraction_range=DEFAULT_FRACTION_RANGE,
    noise_amplitude: float = 0.2,
    kind: str = "crc",
    independent_noise: bool = False,
):
    """Mixed cross pseudo-supervision for a batch of unlabelled crop pairs.

    ``models`` is a ``(model1, model2)`` pair mapping ``(N, 1, H, W, C)`` crops
    to probability fields. Pseudo-labels come from the unmixed crops under
    noise ``xi'`` and are mixed with one mask per batch element; each model is
    then trained on the noised mixed crops against the peer's mixed
    pseudo-labels.
    """
    model1, model2 = models
    if x_i.shape != x_j.shape:
        raise ShapeError(f"cutmix inputs differ in shape: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    spatial = tuple(x_i.shape[-3:])
    masks = [sample_mask(spatial, rng, fraction_range) for _ in range(x_i.shape[0])]
    mask = torch.from_numpy(np.stack([m.array for m in masks])[:, None].astype(bool))

    with torch.no_grad():
        xi_n = _noisy(x_i, noise_amplitude, rng)
        xj_n = _noisy(x_j, noise_amplitude, rng)
        both = torch.cat([xi_n, xj_n])
        p1 = model1(both)
        if independent_noise:
            both = torch.cat([_noisy(x_i, noise_amplitude, rng), _noisy(x_j, noise_amplitude, rng)])
        p2 = model2(both)
        n = x_i.shape[0]
        y1 = torch.where(mask, p1[n:], p1[:n])
        y2 = torch.where(mask, p2[n:], p2[:n])

    mixed = torch.where(mask, x_j, x_i)
    in1 = _noisy(mixed, noise_amplitude, rng)
    in2 = _noisy(mixed, noise_amplitude, rng) if independent_noise else in1
    out1 = model1(in1)
    out2 = model2(in2)
    fn = pseudo_label_loss(kind)
    return fn(y2, out1, crc_cfg) + fn(y1, out2, crc_cfg)
