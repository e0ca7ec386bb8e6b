"""Co-training loop: schedules, momentum SGD, the composite training step and
the checkpointed run driver."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .cutmix import DEFAULT_FRACTION_RANGE, cutmix_semi_loss
from .errors import ConfigError, NumericError, ScheduleError
from .inference import plan_windows, sliding_window_infer, binarize
from .metrics import dice_jaccard
from .model import ModelPair, checkpoint_load, checkpoint_save
from .objectives import (
    CrcConfig,
    LossBreakdown,
    TraConfig,
    semi_loss,
    supervised_loss,
    total_objective,
    translation_loss,
)
from .volume import (
    DEFAULT_MIN_OVERLAP,
    add_uniform_noise,
    extract_crop,
    random_flip,
    sample_crop_lattice,
    sample_translated_pair,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ["iter", "lr", "lambda", "l_sup", "l_sem", "l_kl", "l_reg", "l_tra", "total"]
SEMI_KINDS = ("crc", "mse", "kl", "ce", "none")


@dataclass
class TrainConfig:
    lr0: float = 5e-2
    max_iter: int = 15000
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ramp_t: int = 40
    lambda_max: float = 1.0
    labelled_bs: int = 2
    unlabelled_bs: int = 2
    crop_size: Tuple[int, int, int] = (112, 112, 80)
    noise_amplitude: float = 0.2
    independent_noise: bool = False
    flip: bool = True
    semi: str = "crc"
    use_tra: bool = True
    use_cutmix: bool = True
    min_overlap: float = DEFAULT_MIN_OVERLAP
    cutmix_range: Tuple[float, float] = DEFAULT_FRACTION_RANGE
    crc: CrcConfig = field(default_factory=CrcConfig)
    tra: TraConfig = field(default_factory=TraConfig)
    seed: int = 0
    val_every: int = 200
    val_strides: Optional[Tuple[int, int, int]] = None
    ckpt_every: int = 0

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        self.cutmix_range = tuple(float(c) for c in self.cutmix_range)
        if isinstance(self.crc, dict):
            self.crc = CrcConfig(**self.crc)
        if isinstance(self.tra, dict):
            self.tra = TraConfig(**self.tra)
        for name in ("lr0", "momentum", "weight_decay", "lambda_max", "noise_amplitude", "poly_power"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.labelled_bs < 1 or self.unlabelled_bs < 0:
            raise ConfigError("need at least one labelled crop per batch")
        if self.ramp_t < 1 or self.max_iter < 1:
            raise ConfigError("ramp_t and max_iter must be >= 1")
        if self.semi not in SEMI_KINDS:
            raise ConfigError(f"semi must be one of {SEMI_KINDS}, got {self.semi!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def poly_lr(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.max_iter:
        raise ScheduleError(f"iteration {it} outside [0, {cfg.max_iter}]")
    return cfg.lr0 * (1.0 - it / cfg.max_iter) ** cfg.poly_power


def cosine_rampup(it: int, cfg: TrainConfig) -> float:
    t = min(max(it, 0) / cfg.ramp_t, 1.0)
    return cfg.lambda_max * (1.0 - math.cos(math.pi * t)) / 2.0


@dataclass
class ScheduleState:
    iter: int = 0
    lr: float = 0.0
    lam: float = 0.0


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], buffers: List[torch.Tensor],
             lr: float, momentum: float, weight_decay: float) -> None:
    """In place: ``v <- momentum*v + (g + wd*theta)``; ``theta <- theta - lr*v``.

    Every gradient is checked before anything is written, so a non-finite
    gradient leaves parameters and buffers untouched.
    """
    if not (len(params) == len(grads) == len(buffers)):
        raise ValueError("params, grads and buffers must align")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient")
    with torch.no_grad():
        for p, g, v in zip(params, grads, buffers):
            v.mul_(momentum).add_(g + weight_decay * p)
            p.sub_(lr * v)


class CoTrainer:
    """Owns the model pair, momentum buffers, schedule and RNG stream."""

    def __init__(self, pair: ModelPair, cfg: TrainConfig, rng: Optional[np.random.Generator] = None):
        self.pair = pair
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = [p for m in pair for p in m.parameters()]
        self.buffers = [torch.zeros_like(p) for p in self.params]
        self.state = ScheduleState(0, poly_lr(0, cfg), cosine_rampup(0, cfg))

    # -- state ------------------------------------------------------------
    def optimizer_state(self) -> dict:
        return {"momentum": [b.clone() for b in self.buffers], "schedule": asdict(self.state)}

    def load_optimizer_state(self, state: dict) -> None:
        for b, s in zip(self.buffers, state["momentum"]):
            b.copy_(s)
        self.state = ScheduleState(**state["schedule"])

    # -- batch preparation ------------------------------------------------
    def _noise(self, crop):
        return add_uniform_noise(crop, self.cfg.noise_amplitude, self.rng)

    def _prepare(self, image, label):
        cfg = self.cfg
        if cfg.flip:
            image, label = random_flip(image, label, self.rng)
        if cfg.use_tra:
            pair = sample_translated_pair(image.shape, cfg.crop_size, self.rng, cfg.min_overlap)
            first = pair.first
        else:
            pair = None
            first = sample_crop_lattice(image.shape, cfg.crop_size, self.rng)
        crops = {"f": extract_crop(image, first)}
        if label is not None:
            crops["y"] = extract_crop(label, first)
        if pair is not None:
            crops["s"] = extract_crop(image, pair.second)
        return crops, pair

    @staticmethod
    def _stack(arrs):
        return torch.from_numpy(np.stack(arrs).astype(np.float32))[:, None]

    # -- step -------------------------------------------------------------
    def train_step(self, labelled, unlabelled) -> LossBreakdown:
        """One update of both models.

        ``labelled`` is a sequence of ``(image, label)`` volumes and
        ``unlabelled`` a sequence of images. Raises :class:`NumericError`
        without touching parameters, buffers or the schedule if the loss or
        any gradient is non-finite.
        """
        cfg = self.cfg
        it = self.state.iter
        lr, lam = poly_lr(it, cfg), cosine_rampup(it, cfg)
        m1, m2 = self.pair.model1, self.pair.model2
        self.pair.train()

        lab = [self._prepare(img, lbl) for img, lbl in labelled]
        unl = [self._prepare(img, None) for img in unlabelled]
        share = not cfg.independent_noise

        def noisy_views(key, items):
            clean = [c[key] for c, _ in items]
            v1 = [self._noise(x) for x in clean]
            v2 = v1 if share else [self._noise(x) for x in clean]
            return self._stack(v1), self._stack(v2)

        x1, x2 = noisy_views("f", lab)
        y = torch.from_numpy(np.stack([c["y"] for c, _ in lab]).astype(np.int64))
        p1_lab, p2_lab = m1(x1), m2(x2)
        l_sup = supervised_loss(p1_lab, p2_lab, y)

        zero = torch.zeros((), dtype=l_sup.dtype)
        l_sem, l_tra, l_kl, l_reg = zero, zero, zero, zero
        has_unl = len(unl) > 0

        p1_unl = p2_unl = None
        if has_unl and (cfg.use_tra or (cfg.semi != "none" and not cfg.use_cutmix)):
            u1, u2 = noisy_views("f", unl)
            p1_unl, p2_unl = m1(u1), m2(u2)

        if cfg.use_tra:
            items = lab + unl
            s1, s2 = noisy_views("s", items)
            q1, q2 = m1(s1), m2(s2)
            f1 = torch.cat([p1_lab] + ([p1_unl] if p1_unl is not None else []))
            f2 = torch.cat([p2_lab] + ([p2_unl] if p2_unl is not None else []))
            terms = [
                translation_loss((f1[k], q1[k], f2[k], q2[k]), pair, cfg.tra)
                for k, (_, pair) in enumerate(items)
            ]
            l_tra = torch.stack([t[0] for t in terms]).mean()
            l_kl = torch.stack([t[1] for t in terms]).mean()
            l_reg = torch.stack([t[2] for t in terms]).mean()

        if has_unl and cfg.semi != "none":
            if cfg.use_cutmix:
                xi = self._stack([c["f"] for c, _ in unl])
                xj = torch.roll(xi, shifts=1, dims=0)
                l_sem = cutmix_semi_loss(
                    (m1, m2), xi, xj, self.rng, cfg.crc, cfg.cutmix_range,
                    cfg.noise_amplitude, cfg.semi, cfg.independent_noise,
                )
            else:
                l_sem = semi_loss(p1_unl, p2_unl, cfg.crc, cfg.semi)

        total = l_sup + lam * (l_sem + l_tra)
        if not torch.isfinite(total):
            raise NumericError(f"non-finite objective at iteration {it}")
        grads = torch.autograd.grad(total, self.params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        sgd_step(self.params, grads, self.buffers, lr, cfg.momentum, cfg.weight_decay)

        self.state = ScheduleState(it + 1, lr, lam)
        return total_objective(l_sup.item(), l_sem.item(), l_tra.item(), lam, l_kl.item(), l_reg.item())

    # -- sampling ---------------------------------------------------------
    def sample_batches(self, labelled: Sequence, unlabelled: Sequence):
        cfg = self.cfg
        li = self.rng.choice(len(labelled), size=cfg.labelled_bs, replace=len(labelled) < cfg.labelled_bs)
        lab = [(labelled[i].image, labelled[i].label) for i in li]
        unl = []
        if cfg.unlabelled_bs and len(unlabelled):
            ui = self.rng.choice(len(unlabelled), size=cfg.unlabelled_bs,
                                 replace=len(unlabelled) < cfg.unlabelled_bs)
            unl = [unlabelled[i].image for i in ui]
        return lab, unl


def validate(model, records, window, strides) -> float:
    """Mean Dice (percent) of ``model`` over labelled ``records``."""
    scores = []
    for rec in records:
        plan = plan_windows(rec.image.shape, window, strides)
        pred = binarize(sliding_window_infer(model, rec.image, plan))
        scores.append(dice_jaccard(pred, rec.label)[0])
    return float(np.mean(scores)) if scores else float("nan")


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


@dataclass
class RunResult:
    out_dir: Path
    final_step: int
    best_dice: float
    best_step: int
    history: List[LossBreakdown]


def run(cfg: TrainConfig, pair: ModelPair, labelled, unlabelled, out_dir, validation=(), resume=None,
        config_echo: Optional[dict] = None, stop_at: Optional[int] = None) -> RunResult:
    """Train for ``cfg.max_iter`` iterations, writing ``loss.csv`` and
    checkpoints (``last.ckpt``, ``best.ckpt``, optional ``step_XXXXXX.ckpt``)
    into ``out_dir``.

    ``resume`` is a checkpoint path; the CSV is truncated to the checkpoint's
    step and continued. ``stop_at`` ends the run early (for staged runs).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "loss.csv"
    best_dice, best_step = -1.0, -1

    trainer = CoTrainer(pair, cfg)
    if resume is not None:
        loaded, opt_state, step, info = checkpoint_load(resume)
        pair.model1.load_state_dict(loaded.model1.state_dict())
        pair.model2.load_state_dict(loaded.model2.state_dict())
        trainer.load_optimizer_state(opt_state)
        trainer.rng = _restore_rng(info["rng"])
        best_dice = info["meta"].get("best_dice", best_dice)
        best_step = info["meta"].get("best_step", best_step)
        rows = []
        if csv_path.exists():
            with open(csv_path, newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["iter"]) <= step]
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            w.writeheader()
            w.writerows(rows)
        log.info("resumed from %s at step %d", resume, step)
    else:
        with open(csv_path, "w", newline="") as f:
            csv.DictWriter(f, fieldnames=CSV_FIELDS).writeheader()

    strides = cfg.val_strides or tuple(max(1, c // 2) for c in cfg.crop_size)

    def save(path):
        checkpoint_save(pair, trainer.optimizer_state(), trainer.state.iter, path,
                        extra={"best_dice": best_dice, "best_step": best_step},
                        rng_state=_rng_state(trainer.rng), config=config_echo or cfg.to_dict())

    history = []
    end = cfg.max_iter if stop_at is None else min(stop_at, cfg.max_iter)
    with open(csv_path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        while trainer.state.iter < end:
            lab, unl = trainer.sample_batches(labelled, unlabelled)
            try:
                br = trainer.train_step(lab, unl)
            except NumericError:
                log.error("numeric failure at iteration %d; parameters left at last good state", trainer.state.iter)
                save(out_dir / "last.ckpt")
                raise
            history.append(br)
            it = trainer.state.iter
            writer.writerow({"iter": it, "lr": trainer.state.lr, **br.as_row()})
            f.flush()
            if validation and cfg.val_every and (it % cfg.val_every == 0 or it == cfg.max_iter):
                dice = validate(pair.model1, validation, cfg.crop_size, strides)
                log.info("iter %d val dice %.2f", it, dice)
                if dice > best_dice:
                    best_dice, best_step = dice, it
                    save(out_dir / "best.ckpt")
            if cfg.ckpt_every and it % cfg.ckpt_every == 0:
                save(out_dir / f"step_{it:06d}.ckpt")
    save(out_dir / "last.ckpt")
    return RunResult(out_dir, trainer.state.iter, best_dice, best_step, history)
