"""Deterministic SVG panels for the four-variant comparison."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import GridSpec  # noqa: E402
from .mixture import LabeledMixture  # noqa: E402

CLASS_COLORS = ("#e8923a", "#8c8c8c")
_RC = {"svg.hashsalt": "mg-lab", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path):
    with plt.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _frame(mixture: LabeledMixture, grid: GridSpec, title: str):
    fig, ax = plt.subplots(figsize=(4, 4))
    for c in range(mixture.num_classes):
        m = mixture.means[mixture.classes == c]
        ax.scatter(m[:, 0], m[:, 1], s=160, marker="s", color=CLASS_COLORS[c % len(CLASS_COLORS)],
                   alpha=0.35, linewidths=0, zorder=1)
    ax.set_xlim(grid.xmin, grid.xmax)
    ax.set_ylim(grid.ymin, grid.ymax)
    ax.set_aspect("equal")
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    return fig, ax


def scatter_panel(path, samples, mixture: LabeledMixture, grid: GridSpec, title: str):
    fig, ax = _frame(mixture, grid, title)
    ax.scatter(samples[:, 0], samples[:, 1], s=2, color="#1f4e9c", alpha=0.5, linewidths=0, zorder=2)
    _save(fig, path)


def trajectory_panel(path, trajectories, mixture: LabeledMixture, grid: GridSpec, title: str):
    fig, ax = _frame(mixture, grid, title)
    for traj in trajectories:
        ax.plot(traj[:, 0], traj[:, 1], lw=0.6, color="#1f4e9c", alpha=0.6, zorder=2)
    ax.scatter(trajectories[:, 0, 0], trajectories[:, 0, 1], s=4, color="k", zorder=3)
    _save(fig, path)


def density_panel(path, density, mixture: LabeledMixture, grid: GridSpec, title: str):
    fig, ax = _frame(mixture, grid, title)
    levels = np.linspace(0.0, float(density.max()) or 1.0, 9)[1:]
    ax.contour(grid.xs, grid.ys, density, levels=levels, linewidths=0.7, cmap="viridis", zorder=2)
    _save(fig, path)
