"""DDPM pieces: linear variance schedule, closed-form noising, weighted noise loss, ancestral sampling.

Timesteps are 1-based throughout (``1 <= t <= T``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .params import ParamSequence, StateLayout


class TrainingInstabilityError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).ravel()
        if beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for a in (alpha, alpha_bar):
            a.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return self.beta.size

    def check_t(self, t) -> None:
        arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if arr.size == 0 or arr.min() < 1 or arr.max() > self.T:
            raise ValueError(f"timestep out of range 1..{self.T}: {arr}")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end``."""
    if int(T) < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)))


def scaled_betas(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, reference: int = 1000):
    """Stretch endpoints given for ``reference`` steps to a ``T``-step chain.

    Keeps the total noise of the chain comparable, so short chains still end
    near a standard normal. The end is capped at 0.5 so one reverse step
    never rescales by more than ``sqrt(2)``.
    """
    k = reference / int(T)
    return min(beta_start * k, 0.5), min(beta_end * k, 0.5)


def _coef(values: np.ndarray, t, like):
    """Gather per-step coefficients for 1-based ``t`` and broadcast against ``like``."""
    if isinstance(like, torch.Tensor):
        table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        idx = torch.as_tensor(t, device=like.device).long() - 1
        c = table[idx]
        return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))
    c = np.asarray(values)[np.asarray(t) - 1]
    return np.reshape(c, np.shape(c) + (1,) * (np.ndim(like) - np.ndim(c)))


def q_sample(p0, t, eps, schedule: NoiseSchedule):
    """``sqrt(alpha_bar_t) * p0 + sqrt(1 - alpha_bar_t) * eps``; numpy or torch, scalar or per-batch ``t``."""
    schedule.check_t(t)
    ab = schedule.alpha_bar
    return _coef(np.sqrt(ab), t, p0) * p0 + _coef(np.sqrt(1.0 - ab), t, p0) * eps


def hand_loss_weights(layout: StateLayout, hand_factor: float = 2.0) -> np.ndarray:
    """Per-channel weights: hand-pose channels ``hand_factor``, all others 1."""
    w = np.ones(layout.dim)
    w[layout.hand_mask()] = hand_factor
    return w


def weighted_mse(pred: torch.Tensor, target: torch.Tensor, weights, mask: torch.Tensor | None = None):
    """Mean of channel-weighted squared error, normalized by the total weight over valid frames."""
    w = torch.as_tensor(weights, dtype=pred.dtype, device=pred.device)
    sq = (pred - target) ** 2 * w
    if mask is None:
        return sq.sum() / (w.sum() * np.prod(pred.shape[:-1]))
    m = mask.to(pred.dtype).unsqueeze(-1)
    return (sq * m).sum() / (m.sum() * w.sum())


def training_loss(denoiser, p0, text, t, eps, weights, schedule: NoiseSchedule, mask=None) -> torch.Tensor:
    """Weighted noise-prediction error at step ``t`` for clean states ``p0`` (``B x F x D``)."""
    noisy = q_sample(p0, t, eps, schedule)
    pred = denoiser(noisy, t, text, mask)
    if not torch.isfinite(pred).all():
        raise TrainingInstabilityError("denoiser produced non-finite noise predictions")
    return weighted_mse(pred, eps, weights, mask)


@torch.no_grad()
def p_sample_loop(denoiser, text: torch.Tensor, n_frames: int, schedule: NoiseSchedule, seed: int, dim: int):
    """Ancestral reverse chain from ``x_T ~ N(0, I)``; returns ``B x F x D`` in the denoiser's dtype."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    dtype = next(denoiser.parameters()).dtype if any(True for _ in denoiser.parameters()) else torch.float64
    gen = torch.Generator().manual_seed(int(seed))
    B = text.shape[0]
    x = torch.randn((B, n_frames, dim), generator=gen, dtype=dtype)
    text = text.to(dtype)
    for t in range(schedule.T, 0, -1):
        tt = torch.full((B,), t, dtype=torch.long)
        eps = denoiser(x, tt, text, None)
        beta = schedule.beta[t - 1]
        mean = (x - beta / np.sqrt(1.0 - schedule.alpha_bar[t - 1]) * eps) / np.sqrt(schedule.alpha[t - 1])
        if t > 1:
            x = mean + np.sqrt(beta) * torch.randn(x.shape, generator=gen, dtype=dtype)
        else:
            x = mean
    return x


class Normalizer:
    """Per-channel standardization of diffusion states, fit on valid frames only."""

    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)

    def fit(self, states, min_std: float = 1e-3) -> "Normalizer":
        frames = np.concatenate([np.asarray(s, dtype=np.float64) for s in states])
        self.mean = frames.mean(axis=0)
        self.std = np.maximum(frames.std(axis=0), min_std)
        return self

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse_transform(self, x):
        return x * self.std + self.mean


def sample(
    denoiser,
    text,
    n_frames: int,
    schedule: NoiseSchedule,
    seed: int,
    layout: StateLayout,
    normalizer: Normalizer | None = None,
    fps: float = 30.0,
) -> ParamSequence:
    """Generate one sequence for a single conditioning vector; shape parameters are zeros."""
    text = torch.as_tensor(np.asarray(text, dtype=np.float64)).reshape(1, -1)
    x = p_sample_loop(denoiser, text, n_frames, schedule, seed, layout.dim)[0].double().numpy()
    if normalizer is not None:
        x = normalizer.inverse_transform(x)
    return ParamSequence.from_state(x, layout, fps=fps)
