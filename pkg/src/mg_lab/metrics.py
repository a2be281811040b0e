"""Toy-scale sample-quality metrics and diagnostics for the four-variant comparison."""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptySetError, InvalidRangeError
from .mixture import LabeledMixture, class_posterior

# which image-scale metric each toy metric stands in for
METRIC_ROLES = {
    "energy_distance": "FID (distribution distance)",
    "kde_deviation": "sFID (density shape)",
    "condition_accuracy": "IS (class confidence)",
    "outlier_fraction": "Precision (1 - fraction off-support)",
    "mode_recall": "Recall (mode coverage)",
}

_PAIR_BLOCK = 2048


def _as_samples(samples) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64).reshape(-1, 2)


def _nearest_class_mode(samples, mixture: LabeledMixture, c: int):
    mask = mixture.class_mask(c)
    means = mixture.means[mask]
    d = np.linalg.norm(samples[:, None, :] - means[None], axis=-1)
    k = np.argmin(d, axis=1) if len(samples) else np.zeros(0, dtype=int)
    return k, d[np.arange(len(samples)), k], mixture.stds[mask]


def outlier_fraction(samples, mixture: LabeledMixture, c: int, k: float = 3.0) -> float:
    """Fraction of samples farther than ``k`` stds from the nearest class-``c`` mode."""
    if k <= 0:
        raise InvalidRangeError("k must be positive")
    samples = _as_samples(samples)
    idx, dist, stds = _nearest_class_mode(samples, mixture, c)
    if len(samples) == 0:
        return 0.0
    return float(np.mean(dist > k * stds[idx]))


def mode_hits(samples, mixture: LabeledMixture, c: int, r: float = 3.0) -> np.ndarray:
    """Per class-``c`` mode, the number of samples within ``r`` stds of it (nearest-mode assignment)."""
    if r <= 0:
        raise InvalidRangeError("r must be positive")
    samples = _as_samples(samples)
    idx, dist, stds = _nearest_class_mode(samples, mixture, c)
    inside = dist <= r * stds[idx]
    return np.bincount(idx[inside], minlength=len(stds))


def mode_recall(samples, mixture: LabeledMixture, c: int, r: float = 3.0) -> float:
    """Fraction of class-``c`` modes with at least one sample within ``r`` stds."""
    return float(np.mean(mode_hits(samples, mixture, c, r) > 0))


def condition_accuracy(samples, c: int, mixture: LabeledMixture) -> float:
    """Fraction of samples whose most probable class is ``c``; ties go to the lowest id."""
    mixture.check_class(c)
    samples = _as_samples(samples)
    if len(samples) == 0:
        return 0.0
    return float(np.mean(np.argmax(class_posterior(mixture, samples), axis=-1) == c))


def _mean_pairwise_distance(a: np.ndarray, b: np.ndarray, exclude_diagonal: bool = False) -> float:
    """Mean Euclidean distance over all pairs, summed block-by-block in a fixed order."""
    total = 0.0
    for i in range(0, len(a), _PAIR_BLOCK):
        blk = a[i: i + _PAIR_BLOCK]
        d = np.sqrt(((blk[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        total += float(d.sum())
    pairs = len(a) * len(b)
    if exclude_diagonal:
        pairs -= len(a)
    return total / pairs


def energy_distance(A, B, unbiased: bool = True) -> float:
    """``2 E|a - b| - E|a - a'| - E|b - b'|``.

    The unbiased (U-statistic) form excludes self-pairs in the within-set terms;
    ``unbiased=False`` gives the V-statistic, exactly zero for identical sets.
    """
    A, B = _as_samples(A), _as_samples(B)
    if len(A) == 0 or len(B) == 0:
        raise EmptySetError("energy distance needs two non-empty sample sets")
    if unbiased and (len(A) < 2 or len(B) < 2):
        raise EmptySetError("unbiased energy distance needs at least two samples per set")
    ab = _mean_pairwise_distance(A, B)
    aa = _mean_pairwise_distance(A, A, exclude_diagonal=unbiased)
    bb = _mean_pairwise_distance(B, B, exclude_diagonal=unbiased)
    # the U-statistic can dip below zero for matching distributions; report >= 0
    return max(2.0 * ab - aa - bb, 0.0)


def scott_bandwidth(samples) -> float:
    samples = _as_samples(samples)
    if len(samples) < 2:
        return 1.0
    return float(len(samples) ** (-1.0 / 6.0) * np.sqrt(np.mean(np.var(samples, axis=0, ddof=1))))


@dataclass(frozen=True)
class GridSpec:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int = 101
    ny: int = 101

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.xmin, self.xmax, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.ymin, self.ymax, self.ny)

    @property
    def cell_area(self) -> float:
        return (self.xmax - self.xmin) / (self.nx - 1) * (self.ymax - self.ymin) / (self.ny - 1)

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X, Y], axis=-1)

    @classmethod
    def around(cls, mixture: LabeledMixture, margin_stds: float = 6.0, n: int = 101) -> "GridSpec":
        pad = margin_stds * float(mixture.stds.max())
        lo = mixture.means.min(axis=0) - pad
        hi = mixture.means.max(axis=0) + pad
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), n, n)


def kde_grid(samples, grid: GridSpec, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian KDE on ``grid`` (shape ``(ny, nx)``), normalized to unit grid mass."""
    samples = _as_samples(samples)
    if len(samples) == 0:
        raise EmptySetError("KDE needs at least one sample")
    if grid.nx < 2 or grid.ny < 2 or grid.xmax <= grid.xmin or grid.ymax <= grid.ymin:
        raise InvalidRangeError("grid must span a positive area with >= 2 nodes per axis")
    h = scott_bandwidth(samples) if bandwidth is None else bandwidth
    if h <= 0:
        raise InvalidRangeError("bandwidth must be positive")
    # separable Gaussian kernel: density = Ky^T Kx / n
    kx = np.exp(-0.5 * ((grid.xs[None, :] - samples[:, :1]) / h) ** 2)
    ky = np.exp(-0.5 * ((grid.ys[None, :] - samples[:, 1:]) / h) ** 2)
    dens = ky.T @ kx
    mass = dens.sum() * grid.cell_area
    if mass <= 0:
        return dens
    return dens / mass


def trajectory_turning(trajectory) -> float:
    """Total absolute turning angle (radians) along a polyline; zero-length segments skipped."""
    pts = _as_samples(trajectory)
    if len(pts) < 3:
        raise InvalidRangeError("need at least three points")
    seg = np.diff(pts, axis=0)
    seg = seg[np.linalg.norm(seg, axis=1) > 0]
    if len(seg) < 2:
        return 0.0
    a, b = seg[:-1], seg[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = (a * b).sum(axis=1)
    return float(np.abs(np.arctan2(cross, dot)).sum())


@dataclass
class MetricReport:
    outlier_fraction: float
    mode_recall: float
    condition_accuracy: float
    energy_distance: float
    mode_hits: list
    n_samples: int
    nfe: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["metadata"] = {**self.metadata, "metric_roles": METRIC_ROLES}
        return json.dumps(d, indent=2, sort_keys=True)


def evaluate_samples(samples, mixture: LabeledMixture, c: int, reference, k: float = 3.0,
                     r: float = 3.0, nfe: int | None = None, metadata: dict | None = None) -> MetricReport:
    """Full report for class-``c`` samples against ground-truth ``reference`` samples."""
    samples = _as_samples(samples)
    if len(samples) == 0:
        raise EmptySetError("no samples to evaluate")
    mixture.check_class(c)
    return MetricReport(
        outlier_fraction=outlier_fraction(samples, mixture, c, k),
        mode_recall=mode_recall(samples, mixture, c, r),
        condition_accuracy=condition_accuracy(samples, c, mixture),
        energy_distance=energy_distance(samples, reference),
        mode_hits=[int(v) for v in mode_hits(samples, mixture, c, r)],
        n_samples=len(samples),
        nfe=nfe,
        metadata=dict(metadata or {}),
    )
