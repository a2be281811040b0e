"""Discrete VP noise schedule, forward corruption and the DDPM reverse kernel.

Conventions
-----------
VP diffusion: ``x_t = sqrt(alpha_bar_t) x0 + sigma_t eps`` with integer steps
``t = 0 .. T-1`` (``t = 0`` is the least noisy step).

OT flow: ``x_t = (1 - t) x0 + t eps`` with continuous ``t`` in [0, 1] and target
velocity ``u = x0 - eps``. Since ``dx_t/dt = -u``, samplers integrate
``x <- x + ds * u`` in the reversed clock ``s = 1 - t`` (noise -> data).
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRangeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_index(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"step index {t} outside [0, {self.T})")
        return t


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 2:
        raise InvalidRangeError("need at least 2 steps")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise InvalidRangeError("betas must lie in (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    sigmas = np.sqrt(1.0 - alpha_bars)
    for a in (betas, alpha_bars, sigmas):
        a.setflags(write=False)
    return NoiseSchedule(betas, alpha_bars, sigmas)


def linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_min`` to ``beta_max`` inclusive."""
    if T < 2:
        raise InvalidRangeError(f"T must be >= 2, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise InvalidRangeError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return schedule_from_betas(np.linspace(beta_min, beta_max, T))


def forward_marginal(schedule: NoiseSchedule, x0, eps, t: int) -> np.ndarray:
    """Sample of q(x_t | x0) given the caller's noise ``eps``."""
    t = schedule.check_index(t)
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * np.asarray(x0) + schedule.sigmas[t] * np.asarray(eps)


def ot_interpolate(x0, eps, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise InvalidRangeError(f"flow time {t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    # endpoints returned as-is so they are bitwise exact
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return eps.copy()
    return (1.0 - t) * x0 + t * eps


def ground_truth_flow(x0, eps) -> np.ndarray:
    return np.asarray(x0) - np.asarray(eps)


def ddpm_step(schedule: NoiseSchedule, x_t, eps_hat, t: int, noise) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}`` with the eps-parameterized mean.

    Uses fixed variance ``beta_t``; the noise term is dropped at ``t = 0``.
    """
    t = schedule.check_index(t)
    beta = schedule.betas[t]
    mean = (np.asarray(x_t) - (beta / schedule.sigmas[t]) * np.asarray(eps_hat)) / np.sqrt(1.0 - beta)
    if t == 0:
        return mean
    return mean + np.sqrt(beta) * np.asarray(noise)
