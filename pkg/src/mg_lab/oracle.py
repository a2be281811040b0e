"""Closed-form scores and Bayes-optimal predictors for diffused Gaussian mixtures.

Every function accepts a single 2-vector or a batch ``(..., 2)`` of points and
returns arrays of matching leading shape. Class arguments take an integer id or
``None`` for the unconditional (empty-class) case.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DivergenceError, EndpointTimeError, InvalidRangeError, ProcessMismatchError
from .mixture import LabeledMixture, _class_log_joint, gaussian_log_probs
from .schedule import NoiseSchedule

VP = "vp"
FLOW = "flow"


@dataclass(frozen=True)
class DiffusedMixture:
    """Marginal p_t of a labeled mixture pushed through a corruption process."""

    means: np.ndarray
    variances: np.ndarray
    source: LabeledMixture
    process: str
    time: float
    alpha_bar: float | None = None

    @property
    def classes(self) -> np.ndarray:
        return self.source.classes

    @property
    def weights(self) -> np.ndarray:
        return self.source.weights

    @property
    def num_classes(self) -> int:
        return self.source.num_classes

    @property
    def sigma(self) -> float:
        """Noise scale of the VP corruption, sqrt(1 - alpha_bar)."""
        if self.process != VP:
            raise ProcessMismatchError("sigma_t is defined for the VP process only")
        return float(np.sqrt(1.0 - self.alpha_bar))

    def mask(self, c: int | None) -> np.ndarray | None:
        if c is None:
            return None
        return self.source.class_mask(c)


def diffuse_vp(mixture: LabeledMixture, alpha_bar: float, time: float | None = None) -> DiffusedMixture:
    if not 0.0 <= alpha_bar <= 1.0:
        raise InvalidRangeError(f"alpha_bar {alpha_bar} outside [0, 1]")
    means = np.sqrt(alpha_bar) * mixture.means
    variances = alpha_bar * mixture.stds**2 + (1.0 - alpha_bar)
    return DiffusedMixture(means, variances, mixture, VP, time if time is not None else float("nan"), float(alpha_bar))


def diffuse_flow(mixture: LabeledMixture, t: float) -> DiffusedMixture:
    if not 0.0 <= t <= 1.0:
        raise InvalidRangeError(f"flow time {t} outside [0, 1]")
    a = 1.0 - t
    return DiffusedMixture(a * mixture.means, a**2 * mixture.stds**2 + t**2, mixture, FLOW, float(t))


def diffuse_mixture(mixture: LabeledMixture, process: str, t, schedule: NoiseSchedule | None = None) -> DiffusedMixture:
    """Diffuse at VP step index ``t`` (needs ``schedule``) or flow time ``t``."""
    if process == VP:
        if schedule is None:
            raise ValueError("VP diffusion needs a schedule")
        t = schedule.check_index(t)
        return diffuse_vp(mixture, float(schedule.alpha_bars[t]), time=t)
    if process == FLOW:
        return diffuse_flow(mixture, float(t))
    raise ValueError(f"unknown process {process!r}")


def _log_terms(dm: DiffusedMixture, x, c: int | None):
    """Weighted component log densities restricted to class ``c``."""
    terms = gaussian_log_probs(dm.means, dm.variances, x) + np.log(dm.weights)
    mask = dm.mask(c)
    if mask is None:
        return terms, dm.means, dm.variances, dm.source.stds
    return terms[..., mask], dm.means[mask], dm.variances[mask], dm.source.stds[mask]


def log_density_t(dm: DiffusedMixture, x, c: int | None = None) -> np.ndarray:
    terms, *_ = _log_terms(dm, x, c)
    out = logsumexp(terms, axis=-1)
    if c is not None:
        out = out - np.log(dm.weights[dm.mask(c)].sum())
    return out


def class_posterior_t(dm: DiffusedMixture, x) -> np.ndarray:
    log_comp = gaussian_log_probs(dm.means, dm.variances, x)
    joint = _class_log_joint(log_comp, np.log(dm.weights), dm.classes, dm.num_classes)
    return np.exp(joint - logsumexp(joint, axis=-1, keepdims=True))


def _score(dm: DiffusedMixture, x, c: int | None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    terms, means, variances, _ = _log_terms(dm, x, c)
    resp = softmax(terms, axis=-1)
    comp_scores = -(x[..., None, :] - means) / variances[:, None]
    return np.einsum("...k,...kd->...d", resp, comp_scores)


def cond_score(dm: DiffusedMixture, x, c: int) -> np.ndarray:
    """grad_x log p_t(x | c)."""
    dm.source.check_class(c)
    return _score(dm, x, c)


def uncond_score(dm: DiffusedMixture, x) -> np.ndarray:
    """grad_x log p_t(x)."""
    return _score(dm, x, None)


def posterior_score(dm: DiffusedMixture, x, c: int) -> np.ndarray:
    """grad_x log p_t(c | x); the x-independent log p(c) contributes nothing."""
    return cond_score(dm, x, c) - uncond_score(dm, x)


def guided_score(dm: DiffusedMixture, x, c: int, w: float) -> np.ndarray:
    """Score of p_t(x | c) p_t(c | x)^w."""
    cs = cond_score(dm, x, c)
    if w == 0:
        return cs
    return cs + w * (cs - uncond_score(dm, x))  # cond + w * posterior


def bayes_eps(dm: DiffusedMixture, x, c: int | None = None) -> np.ndarray:
    """E[eps | x_t = x, c]: the minimizer of the noise-prediction loss."""
    if dm.process != VP:
        raise ProcessMismatchError("bayes_eps needs a VP-diffused mixture; use bayes_flow")
    score = uncond_score(dm, x) if c is None else cond_score(dm, x, c)
    return -dm.sigma * score


def bayes_flow(dm: DiffusedMixture, x, c: int | None = None) -> np.ndarray:
    """E[x0 - eps | x_t = x, c] for the OT interpolant.

    Per component with x0 ~ N(mu, s^2 I), ``a = 1 - t`` and ``v = a^2 s^2 + t^2``:
    E[x0 | x] = mu + (a s^2 / v)(x - a mu) and E[eps | x] = (t / v)(x - a mu).
    Defined for t in (0, 1]; t = 1 is the pure-noise start of sampling.
    """
    if dm.process != FLOW:
        raise ProcessMismatchError("bayes_flow needs an OT-flow mixture; use bayes_eps")
    t = dm.time
    if not 0.0 < t <= 1.0:
        raise EndpointTimeError(f"flow oracle undefined at t={t}")
    if c is not None:
        dm.source.check_class(c)
    x = np.asarray(x, dtype=np.float64)
    terms, means, variances, stds = _log_terms(dm, x, c)
    resp = softmax(terms, axis=-1)
    a = 1.0 - t
    src_means = dm.source.means if c is None else dm.source.means[dm.mask(c)]
    # u_k = E[x0|x] - E[eps|x] = mu + ((a s^2 - t) / v) (x - a mu)
    gain = (a * stds**2 - t) / variances
    comp = src_means + gain[:, None] * (x[..., None, :] - means)
    return np.einsum("...k,...kd->...d", resp, comp)


def bayes_prediction(dm: DiffusedMixture, x, c: int | None = None) -> np.ndarray:
    """Bayes-optimal network output for the mixture's process (eps or u)."""
    return bayes_eps(dm, x, c) if dm.process == VP else bayes_flow(dm, x, c)


def mg_fixed_point(
    dm: DiffusedMixture,
    x,
    c: int,
    w: float,
    method: str = "closed",
    tol: float = 1e-15,
    max_iter: int = 100_000,
    bound: float = 1e12,
) -> np.ndarray:
    """Fixed point of the model-guidance target map when the teacher equals the student.

    Iterates ``f_c <- p_c + w (f_c - f_null)`` with ``f_null = p_null`` where
    ``p`` are the Bayes-optimal predictions. For ``w < 1`` this converges to
    ``p_c + w / (1 - w) (p_c - p_null)``.
    """
    p_c = bayes_prediction(dm, x, c)
    p_null = bayes_prediction(dm, x, None)
    if method == "closed":
        if w >= 1:
            raise DivergenceError(f"no finite fixed point in closed form for w={w} >= 1")
        return p_c + (w / (1.0 - w)) * (p_c - p_null)
    if method != "iterate":
        raise ValueError(f"unknown method {method!r}")
    f_c = np.zeros_like(p_c)
    for _ in range(max_iter):
        new = p_c + w * (f_c - p_null)
        if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > bound:
            raise DivergenceError(f"fixed-point iteration diverged for w={w}")
        delta = np.max(np.abs(new - f_c)) if new.size else 0.0
        f_c = new
        if delta <= tol * max(1.0, float(np.max(np.abs(f_c)))):
            return f_c
    raise DivergenceError(f"fixed-point iteration did not converge in {max_iter} steps for w={w}")


def finite_diff_grad(fn: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar field; ``fn`` may be batched over ``x``."""
    if h <= 0:
        raise InvalidRangeError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty(x.shape)
    for d in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[d] = h
        grad[..., d] = (np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h)
    return grad
