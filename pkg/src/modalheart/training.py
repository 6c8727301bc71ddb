"""Joint training loop: warm-up cosine schedule, AdamW and mini-batch assembly."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dataset import AugmentPolicy, SampleRecord, augment, resize_bilinear, rng_for
from .model import (LossBreakdown, ModelConfig, ModelParams, Mode, NonFiniteError, batch_masks,
                    gradients, init_params, save_checkpoint)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    lambda_t: float = 2.5e-4
    n_warmup: int = 5
    n_iter: int = 1000

    def __post_init__(self):
        if not 0 <= self.n_warmup < self.n_iter:
            raise ValueError("need 0 <= n_warmup < n_iter")


def lr_at(i: int, s: ScheduleConfig) -> float:
    """Linear warm-up to ``lambda_t`` then half-cosine decay to zero at ``n_iter``."""
    if i < 0 or i > s.n_iter:
        raise ValueError(f"iteration {i} outside [0, {s.n_iter}]")
    if i < s.n_warmup:
        return s.lambda_t * i / s.n_warmup
    return 0.5 * s.lambda_t * (1 + math.cos(math.pi * (i - s.n_warmup) / (s.n_iter - s.n_warmup)))


@dataclass
class OptimState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def zeros_like(cls, tensors: dict[str, torch.Tensor], **kw) -> "OptimState":
        return cls({k: torch.zeros_like(t) for k, t in tensors.items()},
                   {k: torch.zeros_like(t) for k, t in tensors.items()}, **kw)


def adamw_step(tensors: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               state: OptimState, lr: float) -> dict[str, torch.Tensor]:
    """One bias-corrected AdamW update with decoupled weight decay; returns new tensors."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    out = {}
    for name, w in tensors.items():
        g = grads[name]
        if g.shape != w.shape or state.m[name].shape != w.shape:
            raise ValueError(f"shape mismatch for {name}: param {tuple(w.shape)}, grad {tuple(g.shape)}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        out[name] = w - lr * state.weight_decay * w - lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return out


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 16
    steps: Optional[int] = None
    seed: int = 42
    augment: AugmentPolicy = AugmentPolicy(size=None)
    checkpoint_every: int = 0
    weight_decay: float = 0.05

    @property
    def n_steps(self) -> int:
        return self.schedule.n_iter if self.steps is None else self.steps

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "model" in raw:
            raw["model"] = ModelConfig.from_dict(raw["model"])
        if "schedule" in raw:
            raw["schedule"] = ScheduleConfig(**raw["schedule"])
        if "augment" in raw:
            aug = dict(raw["augment"])
            for key in ("size", "erase_area", "erase_aspect"):
                if aug.get(key) is not None:
                    aug[key] = tuple(aug[key])
            raw["augment"] = AugmentPolicy(**aug)
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: ModelParams, step: int):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainResult:
    params: ModelParams
    history: list[LossBreakdown]
    optim: OptimState


def prepare_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(img, size) if tuple(img.shape) != tuple(size) else np.asarray(img, np.float64)


def train(records: Sequence[SampleRecord], cfg: TrainConfig = TrainConfig(),
          checkpoint_path: Optional[Path] = None) -> TrainResult:
    """Joint-loss training from scratch on ``records`` (the train split)."""
    if not records:
        raise ValueError("training split is empty")
    mcfg = cfg.model
    params = init_params(mcfg, cfg.seed)
    labels = np.array([r.label_months for r in records], dtype=np.float64)
    params.label_mean = float(labels.mean())
    params.label_std = float(labels.std()) or 1.0
    y_std = (labels - params.label_mean) / params.label_std

    base = np.stack([prepare_image(r.image, mcfg.img_size) for r in records])
    policy = AugmentPolicy(size=None, p_flip=cfg.augment.p_flip, p_erase=cfg.augment.p_erase,
                           erase_area=cfg.augment.erase_area, erase_aspect=cfg.augment.erase_aspect)
    rng = rng_for(cfg.seed, "train", "batches")
    state = OptimState.zeros_like(params.tensors, weight_decay=cfg.weight_decay)
    history: list[LossBreakdown] = []
    order = rng.permutation(len(records))
    cursor = 0
    last_good = params
    for step in range(cfg.n_steps):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(records))
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        imgs = np.stack([augment(base[i], rng, policy) for i in idx])
        masks = batch_masks(len(idx), mcfg, rng)
        try:
            grads, res = gradients(params, imgs, y_std[idx], masks, Mode.JOINT)
        except NonFiniteError as exc:
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, last_good)
            raise TrainingDiverged(f"step {step}: {exc}", last_good, step) from exc
        history.append(res.breakdown())
        lr = lr_at(min(step, cfg.schedule.n_iter), cfg.schedule)
        last_good = ModelParams(mcfg, params.tensors, params.label_mean, params.label_std)
        params = ModelParams(mcfg, adamw_step(params.tensors, grads, state, lr),
                             params.label_mean, params.label_std)
        if cfg.checkpoint_every and checkpoint_path is not None and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, state)
        if step % 50 == 0:
            log.info("step %d lr %.3g loss %.5f reg %.5f ssat %.5f", step, lr,
                     history[-1].total, history[-1].l_reg, history[-1].l_ssat)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, state)
    return TrainResult(params, history, state)
