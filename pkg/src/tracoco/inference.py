"""Sliding-window inference, argmax decisions and connected-component
thresholding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import List, Tuple

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, GeometryError
from .volume import _triple

CCT_FRACTION = 1.0 / 1500.0


@dataclass(frozen=True)
class WindowPlan:
    dims: Tuple[int, int, int]
    window: Tuple[int, int, int]
    strides: Tuple[int, int, int]
    axis_origins: Tuple[Tuple[int, ...], ...]

    @property
    def origins(self) -> List[Tuple[int, int, int]]:
        return list(product(*self.axis_origins))

    def __len__(self):
        return int(np.prod([len(a) for a in self.axis_origins]))

    def coverage(self) -> np.ndarray:
        counts = np.zeros(self.dims, dtype=np.int32)
        for o in self.origins:
            counts[tuple(slice(a, a + w) for a, w in zip(o, self.window))] += 1
        return counts

    def describe(self) -> dict:
        return {
            "dims": list(self.dims),
            "window": list(self.window),
            "strides": list(self.strides),
            "n_windows": len(self),
            "axis_origins": [list(a) for a in self.axis_origins],
        }


def plan_windows(dims, window, strides) -> WindowPlan:
    dims, window, strides = _triple(dims, "dims"), _triple(window, "window"), _triple(strides, "strides")
    axis_origins = []
    for axis, (d, w, s) in enumerate(zip(dims, window, strides)):
        if w > d:
            raise GeometryError(f"window {w} larger than volume {d} on axis {axis}")
        if s < 1:
            raise GeometryError(f"stride must be >= 1 on axis {axis}, got {s}")
        if s > w:
            raise GeometryError(f"stride {s} exceeds window {w} on axis {axis}; voxels would be skipped")
        o = list(range(0, d - w + 1, s))
        if o[-1] != d - w:
            o.append(d - w)
        axis_origins.append(tuple(o))
    return WindowPlan(dims, window, strides, tuple(axis_origins))


@torch.no_grad()
def sliding_window_infer(model, volume: np.ndarray, plan: WindowPlan, batch_size: int = 1) -> np.ndarray:
    """Average the model's softmax output over every window covering each voxel.

    Returns a float32 ``(2, H, W, C)`` field. The model sees clean input.
    The default of one window per forward pass keeps every window's output
    bitwise independent of its batch neighbours; larger batches are faster but
    may differ in the last float32 bit.
    """
    if tuple(volume.shape) != plan.dims:
        raise GeometryError(f"plan built for {plan.dims} but volume has shape {volume.shape}")
    acc = np.zeros((2,) + plan.dims, dtype=np.float64)
    counts = np.zeros(plan.dims, dtype=np.float64)
    origins = plan.origins
    was_training = model.training
    model.eval()
    try:
        for start in range(0, len(origins), batch_size):
            chunk = origins[start:start + batch_size]
            sls = [tuple(slice(a, a + w) for a, w in zip(o, plan.window)) for o in chunk]
            x = torch.from_numpy(np.stack([volume[s] for s in sls]).astype(np.float32))[:, None]
            out = model(x).double().numpy()
            for s, o in zip(sls, out):
                acc[(slice(None),) + s] += o
                counts[s] += 1.0
    finally:
        model.train(was_training)
    return (acc / counts).astype(np.float32)


def binarize(field: np.ndarray) -> np.ndarray:
    """Foreground where ``p_fg > p_bg``; exact ties go to background."""
    return (field[1] > field[0]).astype(np.uint8)


def _structure(connectivity: int):
    ranks = {6: 1, 18: 2, 26: 3}
    if connectivity not in ranks:
        raise ConfigError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, ranks[connectivity])


def cct_threshold(dims, fraction: float = CCT_FRACTION) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"CCT fraction must be in (0, 1], got {fraction}")
    # NB: guard against 27000/1500 = 18.000000000000004 rounding up to 19.
    return int(math.ceil(fraction * float(np.prod(dims)) - 1e-9))


def cct_filter(mask: np.ndarray, fraction: float = CCT_FRACTION, connectivity: int = 26) -> np.ndarray:
    """Drop foreground components with fewer than ``ceil(fraction * volume)`` voxels."""
    threshold = cct_threshold(mask.shape, fraction)
    labels, n = ndimage.label(mask > 0, structure=_structure(connectivity))
    if n == 0:
        return np.zeros_like(mask, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= threshold
    keep[0] = False
    return keep[labels].astype(np.uint8)
