"""Reverse-time samplers with exact function-evaluation (NFE) accounting.

A predictor is any callable ``predictor(x, t, c) -> (n, 2)`` where ``t`` is a
VP step index (DDPM) or a flow time in (0, 1], and ``c`` is a class id or
``None`` for the empty class. Predictors may expose ``null_cost`` (network
passes per row for an empty-class query; default 1).

Chains are grouped in fixed blocks of ``CHAIN_BLOCK``; block ``k`` draws all of
its noise from the substream ``(seed, "sampler", k)``. The initial noise is the
first draw of every block, so runs with the same seed and size share it.
"""
import csv
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .mixture import LabeledMixture
from .network import NULL, Params, forward
from .oracle import bayes_prediction, diffuse_mixture, mg_fixed_point
from .schedule import NoiseSchedule, ddpm_step
from .trainer import total_prob_uncond

CHAIN_BLOCK = 1024


def cfg_combine(pred_c, pred_null, w_infer: float) -> np.ndarray:
    """Classifier-free guidance: ``pred_c + w (pred_c - pred_null)``."""
    pred_c = np.asarray(pred_c)
    return pred_c + w_infer * (pred_c - np.asarray(pred_null))


@dataclass
class SampleRun:
    samples: np.ndarray  # (n, 2)
    nfe: int
    guidance: float | None  # None, or the CFG weight
    steps: int
    seed: int
    c: int | None
    source: str
    times: np.ndarray | None = None  # (steps + 1,)
    trajectories: np.ndarray | None = None  # (n, steps + 1, 2)

    @property
    def guidance_mode(self) -> str:
        return "none" if self.guidance is None else f"cfg({self.guidance})"


class NetworkPredictor:
    """Wraps network parameters as a predictor for a given process."""

    def __init__(self, params: Params, process: str, T: int | None = None, w: float | None = None):
        if process == "vp" and T is None:
            raise ValueError("VP predictor needs the schedule length T")
        if params.arch.w_input and w is None:
            raise ValueError("scale-aware network needs a fixed guidance input w")
        self.params = params
        self.process = process
        self.T = T
        self.w = w
        self.null_cost = 1 if params.arch.null_class else params.arch.num_classes

    def _time(self, t) -> float:
        return t / self.T if self.process == "vp" else float(t)

    def __call__(self, x, t, c):
        x = np.asarray(x)
        n = len(x)
        w = None if self.w is None else np.full(n, self.w)
        tin = self._time(t)
        if c is None and not self.params.arch.null_class:
            k = self.params.arch.num_classes
            preds = forward(self.params, np.tile(x, (k, 1)), tin, np.repeat(np.arange(k), n),
                            w=None if w is None else np.tile(w, k))
            return total_prob_uncond(list(preds.reshape(k, n, 2))).astype(np.float64)
        return forward(self.params, x, tin, NULL if c is None else c, w=w).astype(np.float64)


class OraclePredictor:
    """Bayes-optimal eps (VP) or velocity (flow) of a labeled mixture."""

    def __init__(self, mixture: LabeledMixture, process: str, schedule: NoiseSchedule | None = None):
        self.mixture = mixture
        self.process = process
        self.schedule = schedule

    def __call__(self, x, t, c):
        return bayes_prediction(diffuse_mixture(self.mixture, self.process, t, self.schedule), x, c)


class FixedPointPredictor(OraclePredictor):
    """Idealized converged model-guidance predictor at weight ``w``."""

    def __init__(self, mixture, process, w: float, schedule=None):
        super().__init__(mixture, process, schedule)
        self.w = w

    def __call__(self, x, t, c):
        dm = diffuse_mixture(self.mixture, self.process, t, self.schedule)
        if c is None:
            return bayes_prediction(dm, x, None)
        return mg_fixed_point(dm, x, c, self.w)


class _ChainNoise:
    def __init__(self, seed: int, n: int):
        self.n = n
        self.gens = [rngs.substream(seed, rngs.SAMPLER, k) for k in range(-(-n // CHAIN_BLOCK))]

    def normal(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros((0, 2))
        parts = [g.standard_normal((min(CHAIN_BLOCK, self.n - k * CHAIN_BLOCK), 2)) for k, g in enumerate(self.gens)]
        return np.concatenate(parts)


class _Evaluator:
    def __init__(self, predictor, c, guidance):
        if guidance is not None and c is None:
            raise ValueError("guidance needs a class to guide toward")
        self.predictor = predictor
        self.c = c
        self.guidance = guidance
        self.null_cost = getattr(predictor, "null_cost", 1)
        self.nfe = 0

    def _call(self, x, t, c):
        self.nfe += len(x) * (self.null_cost if c is None else 1)
        return self.predictor(x, t, c)

    def __call__(self, x, t):
        pred = self._call(x, t, self.c)
        if self.guidance is None:
            return pred
        return cfg_combine(pred, self._call(x, t, None), self.guidance)


def _run(stepper, n, steps, seed, record):
    noise = _ChainNoise(seed, n)
    x = noise.normal()
    traj = [x] if record else None
    for k in range(steps):
        x = stepper(k, x, noise)
        if record:
            traj.append(x)
    times = 1.0 - np.arange(steps + 1) / steps
    trajectories = np.stack(traj, axis=1) if record else None
    return x, times, trajectories


def sample_ddpm(predictor, schedule: NoiseSchedule, n: int, c: int | None, steps: int | None = None,
                guidance: float | None = None, seed: int = 0, record: bool = False,
                source: str = "oracle") -> SampleRun:
    """Ancestral sampling over the full schedule (``steps`` must equal ``T``)."""
    steps = schedule.T if steps is None else steps
    if steps != schedule.T:
        raise ValueError(f"DDPM sampling runs the full chain: steps must be {schedule.T}")
    ev = _Evaluator(predictor, c, guidance)

    def stepper(k, x, noise):
        t = schedule.T - 1 - k
        eps_hat = ev(x, t) if len(x) else x
        z = noise.normal() if t > 0 else np.zeros_like(x)
        return ddpm_step(schedule, x, eps_hat, t, z)

    x, times, traj = _run(stepper, n, steps, seed, record)
    return SampleRun(x, ev.nfe, guidance, steps, seed, c, source, times, traj)


def sample_flow_euler(predictor, n: int, c: int | None, steps: int, guidance: float | None = None,
                      seed: int = 0, record: bool = False, source: str = "oracle") -> SampleRun:
    """Euler integration of ``dx/ds = u`` with ``s = 1 - t`` from noise (s=0) to data (s=1)."""
    return sample_flow_em(predictor, n, c, steps, 0.0, guidance, seed, record, source)


def sample_flow_em(predictor, n: int, c: int | None, steps: int, noise_scale: float = 0.5,
                   guidance: float | None = None, seed: int = 0, record: bool = False,
                   source: str = "oracle") -> SampleRun:
    """Euler-Maruyama for the marginal-preserving reverse SDE of the OT interpolant.

    Drift ``u + (g^2 / 2) * score`` with ``score = -(x - (1 - t) u) / t`` and
    diffusion ``g = noise_scale``; no kick on the final step. ``noise_scale = 0``
    reduces exactly to Euler.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    ev = _Evaluator(predictor, c, guidance)
    ds = 1.0 / steps
    half_g2 = 0.5 * noise_scale**2

    def stepper(k, x, noise):
        t = 1.0 - k * ds
        u = ev(x, t) if len(x) else x
        if noise_scale == 0.0:
            return x + ds * u
        score = -(x - (1.0 - t) * u) / t
        x = x + ds * (u + half_g2 * score)
        if k < steps - 1:
            x = x + noise_scale * np.sqrt(ds) * noise.normal()
        return x

    x, times, traj = _run(stepper, n, steps, seed, record)
    return SampleRun(x, ev.nfe, guidance, steps, seed, c, source, times, traj)


def write_samples_csv(run: SampleRun, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "x", "y", "class", "seed"])
        label = "" if run.c is None else run.c
        for i, (x, y) in enumerate(run.samples):
            w.writerow([i, repr(float(x)), repr(float(y)), label, run.seed])


def write_trajectories_csv(run: SampleRun, path) -> None:
    if run.trajectories is None:
        raise ValueError("run has no recorded trajectories")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "step", "time", "x", "y"])
        for i, traj in enumerate(run.trajectories):
            for k, (x, y) in enumerate(traj):
                w.writerow([i, k, repr(float(run.times[k])), repr(float(x)), repr(float(y))])


def read_samples_csv(path):
    """Return ``(samples, classes)`` from a samples.csv file."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y", "class"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: not a samples.csv file")
        rows = list(reader)
    xy = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    classes = [None if r["class"] == "" else int(r["class"]) for r in rows]
    return xy, classes
