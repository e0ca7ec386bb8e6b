"""Loss terms for translation-consistent co-training.

Probability fields are torch tensors with the class axis (background,
foreground) immediately before the three spatial axes: ``(2, H, W, C)`` or
``(N, 2, H, W, C)``. Every loss is a voxel mean so magnitudes do not depend on
crop size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError, GeometryError, NumericError, ShapeError
from .volume import TranslatedCropPair

EPS_PROB = 1e-7
DICE_EPS = 1e-5
CLASS_DIM = -4


@dataclass(frozen=True)
class TraConfig:
    alpha: float = 1.0
    beta_reg: float = 0.1
    # +1 applies the entropy term as written (minimising -H); -1 flips it.
    reg_sign: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta_reg < 0:
            raise ConfigError("alpha and beta_reg must be non-negative")
        if self.reg_sign not in (1.0, -1.0):
            raise ConfigError("reg_sign must be +1 or -1")


@dataclass(frozen=True)
class CrcConfig:
    gamma: float = 0.9
    beta_c: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.beta_c < 0.5 < self.gamma <= 1.0):
            raise ConfigError(
                f"need 0 <= beta_c < 0.5 < gamma <= 1, got gamma={self.gamma}, beta_c={self.beta_c}"
            )


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float
    l_sem: float
    l_tra: float
    l_kl: float
    l_reg: float
    total: float
    lam: float

    def as_row(self) -> dict:
        return {
            "lambda": self.lam,
            "l_sup": self.l_sup,
            "l_sem": self.l_sem,
            "l_kl": self.l_kl,
            "l_reg": self.l_reg,
            "l_tra": self.l_tra,
            "total": self.total,
        }


def _log(p):
    return torch.log(p.clamp(EPS_PROB, 1.0 - EPS_PROB))


def _check_same(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def one_hot(label: torch.Tensor) -> torch.Tensor:
    """Integer label grid ``(..., H, W, C)`` to a 2-class field ``(..., 2, H, W, C)``."""
    return F.one_hot(label.long(), 2).movedim(-1, CLASS_DIM).to(torch.get_default_dtype())


def cross_entropy(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Voxel-mean cross-entropy.

    ``target`` is either a distribution field shaped like ``pred`` or an
    integer label grid without the class axis.
    """
    if target.dim() == pred.dim() - 1:
        if target.shape != pred.shape[:CLASS_DIM] + pred.shape[CLASS_DIM + 1:]:
            raise ShapeError(f"label shape {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
        target = one_hot(target).to(pred.dtype)
    _check_same(target, pred, "cross_entropy")
    return -(target * _log(pred)).sum(dim=CLASS_DIM).mean()


def dice_loss(pred_fg: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Linearised Dice loss over the whole tensor: ``1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)``."""
    if eps <= 0:
        raise ConfigError("dice eps must be positive")
    _check_same(pred_fg, target, "dice_loss")
    target = target.to(pred_fg.dtype)
    inter = (pred_fg * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred_fg.sum() + target.sum() + eps)


def supervised_loss(pred1: torch.Tensor, pred2: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same(pred1, pred2, "supervised_loss")
    fg = pred1.select(CLASS_DIM, 1).shape
    if target.shape != fg:
        raise ShapeError(f"label shape {tuple(target.shape)} does not match prediction {tuple(pred1.shape)}")
    return (
        cross_entropy(target, pred1)
        + cross_entropy(target, pred2)
        + dice_loss(pred1.select(CLASS_DIM, 1), target)
        + dice_loss(pred2.select(CLASS_DIM, 1), target)
    )


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Per-voxel KL(p || q) over the class axis."""
    return (p * (_log(p) - _log(q))).sum(dim=CLASS_DIM)


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * _log(p)).sum(dim=CLASS_DIM)


def _overlap(field: torch.Tensor, pair: TranslatedCropPair, which: str) -> torch.Tensor:
    lattice = pair.first if which == "first" else pair.second
    if tuple(field.shape[-3:]) != lattice.size:
        raise ShapeError(f"field spatial shape {tuple(field.shape[-3:])} does not match crop size {lattice.size}")
    if pair.is_empty():
        raise GeometryError("translated crops do not intersect")
    return field[(..., *pair.local_slices(which))]


def _pair_overlaps(preds, pair):
    y1f, y1s, y2f, y2s = preds
    return (
        _overlap(y1f, pair, "first"),
        _overlap(y1s, pair, "second"),
        _overlap(y2f, pair, "first"),
        _overlap(y2s, pair, "second"),
    )


def kl_term(preds, pair: TranslatedCropPair) -> torch.Tensor:
    """Mean over the overlap of KL(y1f||y1s) + KL(y2f||y2s).

    ``preds`` is ``(y1f, y1s, y2f, y2s)``: model 1 and model 2 outputs on the
    first and second crop of ``pair``.
    """
    y1f, y1s, y2f, y2s = _pair_overlaps(preds, pair)
    return (kl_divergence(y1f, y1s) + kl_divergence(y2f, y2s)).mean()


def entropy_reg(preds, pair: TranslatedCropPair) -> torch.Tensor:
    ys = _pair_overlaps(preds, pair)
    return -sum(entropy(y) for y in ys).mean()


def translation_loss(preds, pair: TranslatedCropPair, cfg: TraConfig = TraConfig()):
    """Return ``(l_tra, l_kl, l_reg)``; ``l_tra = alpha*l_kl + beta_reg*reg_sign*l_reg``."""
    l_kl = kl_term(preds, pair)
    l_reg = entropy_reg(preds, pair)
    return cfg.alpha * l_kl + cfg.beta_reg * cfg.reg_sign * l_reg, l_kl, l_reg


def _check_distribution(a: torch.Tensor):
    if a.shape[CLASS_DIM] != 2:
        raise DomainError(f"expected 2 classes on axis {CLASS_DIM}, got shape {tuple(a.shape)}")
    if torch.any(a < 0) or torch.any(a > 1):
        raise DomainError("pseudo-label probabilities must lie in [0, 1]")
    if torch.any((a.sum(dim=CLASS_DIM) - 1).abs() > 1e-4):
        raise DomainError("pseudo-label probabilities must sum to 1 per voxel")


def crc_loss(a: torch.Tensor, b: torch.Tensor, cfg: CrcConfig = CrcConfig()) -> torch.Tensor:
    """Confident regional cross-entropy with ``a`` as (detached) pseudo-label source.

    Voxels where ``max(a) > gamma`` get positive CE towards ``argmax(a)``
    weighted by ``max(a)``; voxels where ``min(a) < beta_c`` get complementary
    CE away from the rejected class weighted by ``1 - min(a)``.
    """
    _check_same(a, b, "crc_loss")
    a = a.detach()
    _check_distribution(a)
    a_max, idx = a.max(dim=CLASS_DIM)  # ties resolve to class 0
    a_min = a.min(dim=CLASS_DIM).values
    w_pos = torch.where(a_max > cfg.gamma, a_max, torch.zeros_like(a_max))
    w_neg = torch.where(a_min < cfg.beta_c, 1.0 - a_min, torch.zeros_like(a_min))
    hot = one_hot(idx).to(b.dtype)
    pos = -(hot * _log(b)).sum(dim=CLASS_DIM)
    neg = -((1.0 - hot) * _log(1.0 - b)).sum(dim=CLASS_DIM)
    return (w_pos * pos + w_neg * neg).mean()


def mse_consistency(a: torch.Tensor, b: torch.Tensor, cfg=None) -> torch.Tensor:
    """Squared error between learner ``b`` and detached target ``a``, summed over classes."""
    _check_same(a, b, "mse_consistency")
    return ((b - a.detach()) ** 2).sum(dim=CLASS_DIM).mean()


def kl_consistency(a: torch.Tensor, b: torch.Tensor, cfg=None) -> torch.Tensor:
    _check_same(a, b, "kl_consistency")
    return kl_divergence(a.detach(), b).mean()


def ce_consistency(a: torch.Tensor, b: torch.Tensor, cfg=None) -> torch.Tensor:
    """Hard pseudo-label cross-entropy without confidence selection."""
    _check_same(a, b, "ce_consistency")
    hot = one_hot(a.detach().argmax(dim=CLASS_DIM)).to(b.dtype)
    return cross_entropy(hot, b)


PSEUDO_LABEL_LOSSES = {
    "crc": crc_loss,
    "mse": mse_consistency,
    "kl": kl_consistency,
    "ce": ce_consistency,
}


def pseudo_label_loss(kind: str):
    try:
        return PSEUDO_LABEL_LOSSES[kind]
    except KeyError:
        raise ConfigError(f"unknown semi-supervised loss {kind!r}; choose from {sorted(PSEUDO_LABEL_LOSSES)}") from None


def semi_loss(pred1: torch.Tensor, pred2: torch.Tensor, cfg: CrcConfig = CrcConfig(), kind: str = "crc"):
    """Cross pseudo-supervision: each model's detached output supervises the other."""
    _check_same(pred1, pred2, "semi_loss")
    fn = pseudo_label_loss(kind)
    return fn(pred1, pred2, cfg) + fn(pred2, pred1, cfg)


def total_objective(l_sup, l_sem, l_tra, lam, l_kl=0.0, l_reg=0.0) -> LossBreakdown:
    values = dict(l_sup=float(l_sup), l_sem=float(l_sem), l_tra=float(l_tra), l_kl=float(l_kl), l_reg=float(l_reg))
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    for name, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"{name} is not finite ({v})")
    total = values["l_sup"] + lam * (values["l_sem"] + values["l_tra"])
    return LossBreakdown(total=total, lam=float(lam), **values)
