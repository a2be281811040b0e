"""Model-guidance training loop.

The guidance weight ``w`` follows the regression-target convention: the target
is ``eps + w * sg(teacher(c) - teacher(null))`` so ``w = 0`` is plain
noise-prediction training. Tables that label the vanilla model ``w = 1`` use
``w_table = 1 + w``.
"""
import csv
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import rng as rngs
from .errors import ConfigError, ShapeMismatchError, TrainingDivergedError
from .mixture import LabeledMixture, sample as sample_mixture
from .network import NULL, Arch, Params, ema_update, forward, init_params, loss_and_grad
from .schedule import NoiseSchedule, linear_schedule

OBJECTIVES = ("vanilla", "mg", "mg-scale", "mg-no-empty")
PROCESSES = ("vp", "flow")
TEACHERS = ("ema", "online")

# teacher query scale for scale-aware training, in the target convention (0 = unguided)
SCALE_TEACHER_W = 0.0

METRIC_FIELDS = ["step", "loss", "w", "energy_distance", "outlier_fraction", "condition_accuracy", "wall_time_s"]


@dataclass
class ModelConfig:
    hidden: int = 64
    layers: int = 3
    freqs: int = 8
    emb_dim: int = 16
    max_freq: float = 64.0

    def validate(self):
        for name in ("hidden", "layers", "freqs", "emb_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")


@dataclass
class TrainConfig:
    objective: str = "mg"
    process: str = "vp"
    w: float = 0.5
    drop_prob: float = 0.1
    w_lo: float = 0.0
    w_hi: float = 3.0
    ema_decay: float = 0.999
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    steps: int = 50_000
    eval_every_steps: int = 0
    teacher: str = "ema"
    auto_w: bool = False
    auto_w_step: float = 0.05
    auto_w_max: float = 4.0
    auto_w_smoothing: float = 0.9
    diffusion_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.process not in PROCESSES:
            raise ConfigError(f"process must be one of {PROCESSES}, got {self.process!r}")
        if self.teacher not in TEACHERS:
            raise ConfigError(f"teacher must be one of {TEACHERS}, got {self.teacher!r}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("drop_prob must lie in [0, 1]")
        if self.w < 0 or self.w_lo > self.w_hi or self.w_lo < 0:
            raise ConfigError("need w >= 0 and 0 <= w_lo <= w_hi")
        if self.objective == "mg-no-empty" and self.drop_prob != 0.0:
            raise ConfigError("mg-no-empty has no empty class to drop to; set drop_prob = 0")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every_steps < 0:
            raise ConfigError("batch_size must be >= 1, steps and eval_every_steps >= 0")
        if not 0.0 <= self.ema_decay <= 1.0 or self.lr <= 0:
            raise ConfigError("ema_decay must lie in [0, 1] and lr must be positive")
        if self.auto_w and (self.auto_w_step <= 0 or self.auto_w_max < 0 or not 0 <= self.auto_w_smoothing < 1):
            raise ConfigError("auto-w needs step > 0, max >= 0 and smoothing in [0, 1)")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.diffusion_steps, self.beta_min, self.beta_max)

    def arch(self, model: ModelConfig, num_classes: int) -> Arch:
        return Arch(
            num_classes=num_classes,
            hidden=model.hidden,
            layers=model.layers,
            freqs=model.freqs,
            emb_dim=model.emb_dim,
            max_freq=model.max_freq,
            w_input=self.objective == "mg-scale",
            null_class=self.objective != "mg-no-empty",
        )


def drop_condition(c, drop_prob: float, rng: np.random.Generator):
    """Replace each class id by the empty class with probability ``drop_prob``.

    Scalars map to ``None`` when dropped; arrays get ``NULL`` entries.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f"drop probability {drop_prob} outside [0, 1]")
    c_arr = np.asarray(c)
    dropped = rng.random(c_arr.shape) < drop_prob
    if c_arr.ndim == 0:
        return None if dropped else int(c_arr)
    return np.where(dropped, NULL, c_arr)


def mg_target(eps, pred_c, pred_null, w: float) -> np.ndarray:
    """``eps + w * (pred_c - pred_null)``; the inputs are constants (no gradient path)."""
    return np.asarray(eps) + w * (np.asarray(pred_c) - np.asarray(pred_null))


def mg_flow_target(u, pred_c, pred_null, w: float) -> np.ndarray:
    return mg_target(u, pred_c, pred_null, w)


def scale_aware_target(eps, pred_at_w1, pred_at_w0, w) -> np.ndarray:
    """Target for networks that take the guidance scale as input.

    ``w`` may be a per-row array of sampled scales.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    return np.asarray(eps) + w * (np.asarray(pred_at_w1) - np.asarray(pred_at_w0))


def total_prob_uncond(preds) -> np.ndarray:
    """Uniform-prior average of per-class predictions, standing in for the empty class."""
    preds = [np.asarray(p) for p in preds]
    if not preds:
        raise ValueError("need at least one class prediction")
    out = preds[0].astype(np.result_type(preds[0], np.float32), copy=True)
    for p in preds[1:]:
        out = out + p
    return out / len(preds)


@dataclass
class AdamState:
    m: dict
    v: dict
    count: int = 0

    @classmethod
    def zeros_like(cls, params: Params) -> "AdamState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
            {k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def adamw_step(params: Params, grads: dict, moments: AdamState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
    """Decoupled-weight-decay Adam update with bias correction.

    Returns new ``(params, moments)``; the inputs are not modified.
    """
    if list(grads) != list(params.tensors):
        raise ShapeMismatchError("gradient names do not match parameters")
    count = moments.count + 1
    c1 = 1.0 - beta1**count
    c2 = 1.0 - beta2**count
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = beta1 * moments.m[name] + (1.0 - beta1) * g
        v = beta2 * moments.v[name] + (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p = p * (1.0 - lr * weight_decay)
        new_p[name] = (p - lr * update).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return Params(params.arch, new_p), AdamState(new_m, new_v, count)


@dataclass
class AutoW:
    """Evaluation-driven controller for the guidance weight.

    Each evaluation proposes ``w + step`` if the metric got worse than at the
    previous evaluation and ``w - step`` otherwise, then moves ``w`` toward the
    proposal with smoothing ``rho`` and clamps to ``[0, w_max]``.
    """

    w: float = 0.0
    step: float = 0.05
    w_max: float = 4.0
    smoothing: float = 0.9
    prev_metric: float | None = None
    best_metric: float | None = None
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def auto_w_update(ctrl: AutoW, metric: float) -> float:
    """Update ``ctrl`` in place with a lower-is-better metric; return the new w."""
    if not math.isfinite(metric):
        raise ValueError(f"non-finite evaluation metric {metric}")
    if ctrl.prev_metric is not None:
        proposal = ctrl.w + ctrl.step if metric > ctrl.prev_metric else ctrl.w - ctrl.step
        w = ctrl.smoothing * ctrl.w + (1.0 - ctrl.smoothing) * proposal
        ctrl.w = min(max(w, 0.0), ctrl.w_max)
    ctrl.prev_metric = metric
    ctrl.best_metric = metric if ctrl.best_metric is None else min(ctrl.best_metric, metric)
    ctrl.history.append([metric, ctrl.w])
    return ctrl.w


@dataclass
class TrainState:
    params: Params
    ema: Params
    adam: AdamState
    step: int
    seed: int
    controller: AutoW | None
    rngs: dict  # substream name -> Generator
    last_loss: float = float("nan")

    @property
    def w(self) -> float | None:
        return None if self.controller is None else self.controller.w


def init_state(cfg: TrainConfig, model: ModelConfig, num_classes: int, seed: int) -> TrainState:
    cfg.validate()
    model.validate()
    arch = cfg.arch(model, num_classes)
    params = init_params(arch, rngs.substream(seed, rngs.INIT))
    controller = None
    if cfg.auto_w:
        controller = AutoW(0.0, cfg.auto_w_step, cfg.auto_w_max, cfg.auto_w_smoothing)
    streams = {name: rngs.substream(seed, name) for name in (rngs.DATA, rngs.DROP, rngs.SCALE)}
    return TrainState(params, params.copy(), AdamState.zeros_like(params), 0, seed, controller, streams)


def current_w(state: TrainState, cfg: TrainConfig) -> float:
    return cfg.w if state.controller is None else state.controller.w


def make_batch(cfg: TrainConfig, mixture: LabeledMixture, schedule: NoiseSchedule, rng: np.random.Generator):
    """Draw ``(x0, c)``, noise and time; return corrupted inputs and the plain target."""
    n = cfg.batch_size
    x0, c = sample_mixture(mixture, n, rng)
    eps = rng.standard_normal((n, 2))
    if cfg.process == "vp":
        t = rng.integers(0, schedule.T, size=n)
        x_t = np.sqrt(schedule.alpha_bars[t])[:, None] * x0 + schedule.sigmas[t][:, None] * eps
        return x_t, t / schedule.T, c, eps
    t = rng.random(n)
    x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    return x_t, t, c, x0 - eps


def build_targets(state: TrainState, cfg: TrainConfig, x_t, t_in, cond, base, w_guid, w_in=None):
    """Regression targets for the configured objective (constants w.r.t. the student)."""
    if cfg.objective == "vanilla":
        return base
    teacher = state.ema if cfg.teacher == "ema" else state.params
    n = len(x_t)
    kept = cond != NULL
    if cfg.objective == "mg-scale":
        pred_c, pred_null = _teacher_pair(teacher, x_t, t_in, cond, kept, w=np.full(2 * n, SCALE_TEACHER_W))
        return scale_aware_target(base, pred_c, pred_null, w_in)
    if cfg.objective == "mg-no-empty":
        k = teacher.arch.num_classes
        preds = forward(teacher, np.tile(x_t, (k, 1)), np.tile(t_in, k), np.repeat(np.arange(k), n))
        per_class = preds.reshape(k, n, 2)
        pred_null = total_prob_uncond(list(per_class))
        pred_c = per_class[cond, np.arange(n)]
        return mg_target(base, pred_c, pred_null, w_guid)
    pred_c, pred_null = _teacher_pair(teacher, x_t, t_in, cond, kept)
    return mg_target(base, pred_c, pred_null, w_guid)


def _teacher_pair(teacher: Params, x_t, t_in, cond, kept, w=None):
    n = len(x_t)
    both = forward(teacher, np.concatenate([x_t, x_t]), np.concatenate([t_in, t_in]),
                   np.concatenate([cond, np.full(n, NULL)]), w=w)
    pred_c = both[:n]
    # a dropped condition feeds the empty class to both teacher calls
    pred_null = np.where(kept[:, None], both[n:], pred_c)
    return pred_c, pred_null


def train_step(state: TrainState, cfg: TrainConfig, mixture: LabeledMixture, schedule: NoiseSchedule) -> TrainState:
    """One iteration: sample, corrupt, drop conditions, build targets, AdamW, EMA."""
    x_t, t_in, c, base = make_batch(cfg, mixture, schedule, state.rngs[rngs.DATA])
    cond = drop_condition(c, cfg.drop_prob, state.rngs[rngs.DROP])
    w_in = None
    if cfg.objective == "mg-scale":
        w_in = state.rngs[rngs.SCALE].uniform(cfg.w_lo, cfg.w_hi, size=len(x_t))
    targets = build_targets(state, cfg, x_t, t_in, cond, base, current_w(state, cfg), w_in)
    loss, grads = loss_and_grad(state.params, x_t, t_in, cond, targets, w=w_in)
    params, adam = adamw_step(state.params, grads, state.adam, cfg.lr, cfg.beta1, cfg.beta2,
                              cfg.adam_eps, cfg.weight_decay)
    ema = ema_update(state.ema, params, cfg.ema_decay)
    return TrainState(params, ema, adam, state.step + 1, state.seed, state.controller, state.rngs, loss)


def train(
    state: TrainState,
    cfg: TrainConfig,
    mixture: LabeledMixture,
    evaluate: Callable[[TrainState], dict] | None = None,
    metrics_path=None,
    on_eval: Callable[[TrainState], None] | None = None,
    losses: list | None = None,
) -> TrainState:
    """Run ``train_step`` until ``cfg.steps``; evaluate every ``eval_every_steps``.

    ``evaluate`` returns a dict with at least ``energy_distance``; when auto-w is
    on that value drives the controller. Rows are appended to ``metrics_path``.
    """
    schedule = cfg.schedule()
    start = time.perf_counter()
    window = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
    try:
        while state.step < cfg.steps:
            state = train_step(state, cfg, mixture, schedule)
            if not math.isfinite(state.last_loss):
                raise TrainingDivergedError(f"loss became {state.last_loss} at step {state.step}")
            window.append(state.last_loss)
            if losses is not None:
                losses.append(state.last_loss)
            due = cfg.eval_every_steps and state.step % cfg.eval_every_steps == 0
            if evaluate is not None and (due or state.step == cfg.steps):
                metrics = evaluate(state)
                if state.controller is not None:
                    auto_w_update(state.controller, metrics["energy_distance"])
                row = [state.step, float(np.mean(window)), current_w(state, cfg),
                       metrics["energy_distance"], metrics["outlier_fraction"],
                       metrics["condition_accuracy"], round(time.perf_counter() - start, 3)]
                window = []
                if writer is not None:
                    writer.writerow([_fmt(v) for v in row])
                    fh.flush()
                if on_eval is not None:
                    on_eval(state)
    finally:
        if fh is not None:
            fh.close()
    return state


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
