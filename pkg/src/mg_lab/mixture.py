"""Labeled isotropic 2D Gaussian mixtures with exact densities and posteriors."""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidRangeError, UnknownClassError

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_probs(means: np.ndarray, variances: np.ndarray, x) -> np.ndarray:
    """Log density of each isotropic 2D component at ``x``; shape ``x.shape[:-1] + (K,)``."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[..., None, :] - means
    sq = np.einsum("...kd,...kd->...k", diff, diff)
    return -np.log(variances) - LOG_2PI - 0.5 * sq / variances


@dataclass(frozen=True)
class LabeledMixture:
    means: np.ndarray  # (K, 2)
    stds: np.ndarray  # (K,)
    classes: np.ndarray  # (K,) int
    weights: np.ndarray  # (K,), sums to 1
    num_classes: int

    def __post_init__(self):
        K = len(self.means)
        if K == 0 or self.means.shape != (K, 2):
            raise InvalidRangeError("means must have shape (K, 2) with K >= 1")
        if self.stds.shape != (K,) or self.classes.shape != (K,) or self.weights.shape != (K,):
            raise InvalidRangeError("per-component arrays must all have length K")
        if np.any(self.stds <= 0) or np.any(self.weights <= 0):
            raise InvalidRangeError("stds and weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidRangeError("weights must sum to 1")
        if np.any(self.classes < 0) or np.any(self.classes >= self.num_classes):
            raise InvalidRangeError("class ids must lie in [0, num_classes)")
        if len(np.unique(self.classes)) != self.num_classes:
            raise InvalidRangeError("every class must own at least one component")

    @property
    def num_components(self) -> int:
        return len(self.means)

    @property
    def class_priors(self) -> np.ndarray:
        return np.bincount(self.classes, weights=self.weights, minlength=self.num_classes)

    def check_class(self, c: int) -> int:
        if c is None or not 0 <= int(c) < self.num_classes:
            raise UnknownClassError(f"unknown class {c!r} (mixture has {self.num_classes} classes)")
        return int(c)

    def class_mask(self, c: int) -> np.ndarray:
        return self.classes == self.check_class(c)


def make_mixture(means, stds, classes, weights=None, num_classes=None) -> LabeledMixture:
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    K = len(means)
    stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (K,)).copy()
    classes = np.asarray(classes, dtype=np.int64).reshape(K)
    if weights is None:
        weights = np.full(K, 1.0 / K)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    if num_classes is None:
        num_classes = int(classes.max()) + 1
    return LabeledMixture(means, stds, classes, weights, int(num_classes))


def grid_two_class(rows: int = 5, cols: int = 5, spacing: float = 2.0, std: float = 0.15) -> LabeledMixture:
    """Centered ``rows x cols`` grid of modes with checkerboard class labels.

    Mode ``(i, j)`` gets class ``(i + j) % 2``, so the corner mode is class 0.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise InvalidRangeError(f"grid needs at least two cells, got {rows}x{cols}")
    if spacing <= 0 or std <= 0:
        raise InvalidRangeError("spacing and std must be positive")
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    xs = (jj - (cols - 1) / 2.0) * spacing
    ys = ((rows - 1) / 2.0 - ii) * spacing
    return make_mixture(np.stack([xs, ys], axis=1), std, (ii + jj) % 2, num_classes=2)


def sample(mixture: LabeledMixture, n: int, rng: np.random.Generator, c: int | None = None):
    """Draw ``n`` labeled samples; restrict to class ``c`` when given."""
    weights = mixture.weights
    if c is not None:
        weights = np.where(mixture.class_mask(c), weights, 0.0)
        weights = weights / weights.sum()
    k = rng.choice(mixture.num_components, size=n, p=weights)
    z = rng.standard_normal((n, 2))
    x0 = mixture.means[k] + mixture.stds[k, None] * z
    return x0, mixture.classes[k].copy()


def sample_pair(mixture: LabeledMixture, rng: np.random.Generator):
    x0, c = sample(mixture, 1, rng)
    return x0[0], int(c[0])


def _class_log_joint(log_comp: np.ndarray, log_w: np.ndarray, classes: np.ndarray, num_classes: int):
    """log p(x, c) for every class; shape ``(..., C)``."""
    terms = log_comp + log_w
    out = np.empty(terms.shape[:-1] + (num_classes,))
    for c in range(num_classes):
        out[..., c] = logsumexp(terms[..., classes == c], axis=-1)
    return out


def log_density(mixture: LabeledMixture, x, c: int | None = None) -> np.ndarray:
    """log p(x), or log p(x | c) renormalized over class-``c`` components."""
    log_comp = gaussian_log_probs(mixture.means, mixture.stds**2, x)
    log_w = np.log(mixture.weights)
    if c is None:
        return logsumexp(log_comp + log_w, axis=-1)
    mask = mixture.class_mask(c)
    return logsumexp(log_comp[..., mask] + log_w[mask], axis=-1) - np.log(mixture.weights[mask].sum())


def class_posterior(mixture: LabeledMixture, x) -> np.ndarray:
    """p(c | x) over all classes; the class prior is the total class weight."""
    log_comp = gaussian_log_probs(mixture.means, mixture.stds**2, x)
    joint = _class_log_joint(log_comp, np.log(mixture.weights), mixture.classes, mixture.num_classes)
    return np.exp(joint - logsumexp(joint, axis=-1, keepdims=True))
