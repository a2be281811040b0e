"""Independent derivations of the pinned thresholds used in the test-suite.

Only numpy/scipy are used here (no package code), so the frozen numbers do not
inherit bugs from the implementation they check. Run:

    python oracles/derive.py [name ...]
"""
import sys

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import chi2, norm

SEED = 20240


def grid(rows=5, cols=5, spacing=2.0, std=0.15):
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    means = np.stack([(jj.ravel() - (cols - 1) / 2) * spacing, ((rows - 1) / 2 - ii.ravel()) * spacing], 1)
    classes = (ii.ravel() + jj.ravel()) % 2
    return means, np.full(len(means), std), classes


def draw(rng, n, c=None, **kw):
    means, stds, classes = grid(**kw)
    idx = np.flatnonzero(classes == c) if c is not None else np.arange(len(means))
    k = rng.choice(idx, size=n)
    return means[k] + stds[k, None] * rng.standard_normal((n, 2))


def energy(a, b):
    ab = cdist(a, b).mean()
    aa = cdist(a, a).sum() / (len(a) * (len(a) - 1))
    bb = cdist(b, b).sum() / (len(b) * (len(b) - 1))
    return max(2 * ab - aa - bb, 0.0)


def energy_null(n=5000, pairs=100, c=0):
    """Largest energy distance among independent ground-truth pairs."""
    rng = np.random.default_rng(SEED)
    vals = [energy(draw(rng, n, c), draw(rng, n, c)) for _ in range(pairs)]
    return {"max": float(np.max(vals)), "q99": float(np.quantile(vals, 0.99)), "mean": float(np.mean(vals))}


def outlier_tail():
    """P[chi2_2 > 9] and a 4-sigma Monte-Carlo interval for 20k samples."""
    p = float(chi2.sf(9.0, 2))
    n = 20000
    half = 4 * np.sqrt(p * (1 - p) / n)
    return {"p": p, "n": n, "lo": p - half, "hi": p + half}


def kde_bound(n=50_000, c=None, grid_n=101, margin=6.0):
    """Max |KDE - density| for Scott bandwidth: smoothing bias plus Monte-Carlo slack.

    The KDE mean is the mixture convolved with the kernel, whose components
    have variance std^2 + h^2; the bound is that bias plus 5 pointwise standard
    errors of the estimator at the densest node.
    """
    means, stds, classes = grid()
    rng = np.random.default_rng(SEED)
    x = draw(rng, n, c)
    h = n ** (-1 / 6) * np.sqrt(np.mean(x.var(axis=0, ddof=1)))
    lo = means.min(0) - margin * stds.max()
    hi = means.max(0) + margin * stds.max()
    xs = np.linspace(lo[0], hi[0], grid_n)
    ys = np.linspace(lo[1], hi[1], grid_n)
    X, Y = np.meshgrid(xs, ys)
    sel = np.ones(len(means), bool) if c is None else classes == c
    m, s = means[sel], stds[sel]
    w = 1.0 / sel.sum()

    def dens(vx, vy):
        out = 0.0
        for mu, sd in zip(m, s):
            out = out + w * norm.pdf(X, mu[0], np.sqrt(sd**2 + vx)) * norm.pdf(Y, mu[1], np.sqrt(sd**2 + vy))
        return out

    truth = dens(0.0, 0.0)
    smooth = dens(h**2, h**2)
    # the estimator is renormalized to unit mass on the grid
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    smooth = smooth / (smooth.sum() * cell)
    bias = float(np.abs(smooth - truth).max())
    # variance of a Gaussian-kernel KDE at a node ~ f * R(K) / (n h^2), R = 1/(4 pi)
    se = float(np.sqrt(smooth.max() / (4 * np.pi * n * h * h)))
    return {"bandwidth": float(h), "bias": bias, "se": se, "bound": bias + 5 * se}


def recall_accuracy(n=10_000, c=0, r=3.0):
    """Mode recall and (analytic) condition accuracy for ground-truth samples."""
    means, stds, classes = grid()
    rng = np.random.default_rng(SEED)
    x = draw(rng, n, c)
    m = means[classes == c]
    d = cdist(x, m)
    hits = np.zeros(len(m), int)
    near = d.argmin(1)
    ok = d[np.arange(n), near] <= r * stds[0]
    np.add.at(hits, near[ok], 1)
    logp = -0.5 * cdist(x, means, "sqeuclidean") / stds[0] ** 2
    post = np.stack([np.logaddexp.reduce(logp[:, classes == k], 1) for k in (0, 1)], 1)
    return {"recall": float((hits > 0).mean()), "accuracy": float((post.argmax(1) == c).mean())}


def class_frequency(n=100_000):
    p = 0.5
    return {"lo": p - 3 * np.sqrt(p * (1 - p) / n), "hi": p + 3 * np.sqrt(p * (1 - p) / n)}


DERIVATIONS = {
    "energy_null": energy_null,
    "outlier_tail": outlier_tail,
    "kde_bound": kde_bound,
    "recall_accuracy": recall_accuracy,
    "class_frequency": class_frequency,
}

if __name__ == "__main__":
    for name in sys.argv[1:] or DERIVATIONS:
        print(name, DERIVATIONS[name]())
