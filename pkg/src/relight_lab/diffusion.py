"""DDPM noise schedule, forward noising, condition packing, and the
noise-prediction training objective with per-condition dropout.

Channel layout is fixed: [noised target x_t (3)] ++ [input portrait (3)] ++
[LDR env (3)]. The diffused target lives in [-1, 1]; the two condition
planes stay in [0, 1] so a dropped (all-zero) plane coincides with the
black-image conditioning of the label-to-image task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidScheduleParams, ShapeMismatch, StepOutOfRange

CONDITION_DROP_P = 0.1


@dataclass
class NoiseSchedule:
    T: int
    betas: torch.Tensor       # (T,) float64
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t):
        """alpha-bar at 1-indexed step t; t == 0 means the clean endpoint."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t > self.T):
            raise StepOutOfRange(f"t={t} outside [0, {self.T}]")
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bars.dtype), self.alpha_bars])
        return padded[t]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidScheduleParams(f"T={T} must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidScheduleParams(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t 1-indexed."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise StepOutOfRange(f"t={t} outside [1, {schedule.T}]")
    if eps.shape != x0.shape:
        raise ShapeMismatch(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bars[t - 1].to(x0.dtype)
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


@dataclass
class DropFlags:
    """Per-condition dropout state; fields are bools or (B,) bool tensors."""
    image_dropped: object = False
    env_dropped: object = False
    label_dropped: object = False


@dataclass
class PackedInput:
    channels: torch.Tensor  # (..., 9, H, W)
    drop_flags: DropFlags


def _keep(flag, like: torch.Tensor) -> torch.Tensor:
    """1 where the condition is kept, 0 where dropped, broadcastable."""
    flag = torch.as_tensor(flag, dtype=torch.bool)
    keep = (~flag).to(like.dtype)
    while keep.dim() < like.dim():
        keep = keep.unsqueeze(-1)
    return keep


def pack_conditions(x_t: torch.Tensor, input_image: torch.Tensor,
                    ldr_env: torch.Tensor, drop_flags: DropFlags) -> PackedInput:
    """Concatenate [x_t, input, env] along channels, zeroing dropped planes."""
    if x_t.shape != input_image.shape or x_t.shape != ldr_env.shape:
        raise ShapeMismatch(
            f"plane shapes differ: {tuple(x_t.shape)} vs "
            f"{tuple(input_image.shape)} vs {tuple(ldr_env.shape)}"
        )
    if x_t.shape[-3] != 3:
        raise ShapeMismatch(f"expected 3-channel planes, got {x_t.shape[-3]}")
    img = input_image * _keep(drop_flags.image_dropped, input_image)
    env = ldr_env * _keep(drop_flags.env_dropped, ldr_env)
    return PackedInput(channels=torch.cat([x_t, img, env], dim=-3), drop_flags=drop_flags)


def sample_drop_flags(rng: torch.Generator, p: float = CONDITION_DROP_P,
                      batch: int | None = None) -> DropFlags:
    """Three independent Bernoulli(p) drops (image, env, label)."""
    shape = (3,) if batch is None else (batch, 3)
    draws = torch.rand(shape, generator=rng) < p
    if batch is None:
        return DropFlags(bool(draws[0]), bool(draws[1]), bool(draws[2]))
    return DropFlags(draws[:, 0], draws[:, 1], draws[:, 2])


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(1, 2, 0)


def conditioned_input(tup) -> torch.Tensor:
    """Input portrait with its foreground mask applied, in [0, 1]."""
    img = tup.input_image
    if tup.input_mask is not None:
        img = img * tup.input_mask[..., None]
    return image_to_tensor(img)


def training_loss(model, tup, t, eps: torch.Tensor, dropout_rng: torch.Generator,
                  schedule: NoiseSchedule, dropout_p: float = CONDITION_DROP_P) -> torch.Tensor:
    """Mean-squared error between the model's noise prediction and eps."""
    x0 = image_to_tensor(tup.target_image) * 2.0 - 1.0
    x0 = x0.unsqueeze(0)
    eps_b = eps if eps.dim() == 4 else eps.unsqueeze(0)
    if eps_b.shape != x0.shape:
        raise ShapeMismatch(f"eps shape {tuple(eps.shape)} incompatible with target")
    x_t = q_sample(x0, t, eps_b, schedule)
    cond = conditioned_input(tup).unsqueeze(0)
    ldr = image_to_tensor(tup.ldr_env.pixels).unsqueeze(0)
    flags = sample_drop_flags(dropout_rng, dropout_p)
    packed = pack_conditions(x_t, cond, ldr, flags)
    label = torch.as_tensor([tup.label], dtype=torch.long)
    pred = model(packed, torch.as_tensor([t], dtype=torch.long), label)
    return F.mse_loss(pred, eps_b)
