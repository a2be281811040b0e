"""Experiment orchestration shared by the CLI: train, sample, evaluate, sweeps, the four-variant comparison."""
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngs
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dumps_config, save_config
from .metrics import GridSpec, MetricReport, evaluate_samples, kde_grid, trajectory_turning
from .mixture import LabeledMixture, log_density, sample as sample_mixture
from .sampler import (FixedPointPredictor, NetworkPredictor, OraclePredictor, SampleRun, sample_ddpm,
                      sample_flow_em, sample_flow_euler)
from .trainer import TrainState, init_state, train

FIGURE2_VARIANTS = ("conditional", "unconditional", "cfg", "mg")


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("MG_LAB_THREADS", "0") or 0)
    n = requested or os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


def network_predictor(cfg: ExperimentConfig, state: TrainState, use_ema: bool = True) -> NetworkPredictor:
    params = state.ema if use_ema else state.params
    w = cfg.train.w if params.arch.w_input else None
    T = cfg.train.diffusion_steps if cfg.train.process == "vp" else None
    return NetworkPredictor(params, cfg.train.process, T, w)


def oracle_predictor(cfg: ExperimentConfig, mixture: LabeledMixture | None = None, mg_w: float | None = None):
    mixture = mixture or cfg.data.mixture()
    schedule = cfg.train.schedule() if cfg.train.process == "vp" else None
    if mg_w is None:
        return OraclePredictor(mixture, cfg.train.process, schedule)
    return FixedPointPredictor(mixture, cfg.train.process, mg_w, schedule)


def run_sampler(cfg: ExperimentConfig, predictor, n: int, c: int | None, guidance: float | None = None,
                seed: int | None = None, record: bool = False, source: str = "oracle") -> SampleRun:
    seed = cfg.run.seed if seed is None else seed
    kind = cfg.sampler.kind
    if kind == "ddpm":
        return sample_ddpm(predictor, cfg.train.schedule(), n, c, None, guidance, seed, record, source)
    if kind == "euler":
        return sample_flow_euler(predictor, n, c, cfg.sampler_steps, guidance, seed, record, source)
    return sample_flow_em(predictor, n, c, cfg.sampler_steps, cfg.sampler.noise_scale, guidance, seed, record, source)


def reference_samples(mixture: LabeledMixture, c: int | None, n: int, seed: int) -> np.ndarray:
    return sample_mixture(mixture, n, rngs.substream(seed, rngs.EVAL), c)[0]


def report_for(cfg: ExperimentConfig, run: SampleRun, mixture: LabeledMixture, **metadata) -> MetricReport:
    c = cfg.eval.class_id
    ref = reference_samples(mixture, c, cfg.eval.n_reference, cfg.run.seed)
    meta = {"seed": run.seed, "source": run.source, "guidance": run.guidance_mode, "steps": run.steps,
            "objective": cfg.train.objective, "w": cfg.train.w, "w_table": 1.0 + cfg.train.w, **metadata}
    return evaluate_samples(run.samples, mixture, c, ref, cfg.eval.outlier_k, cfg.eval.recall_r, run.nfe, meta)


def make_evaluator(cfg: ExperimentConfig, mixture: LabeledMixture):
    """Evaluation callback for the training loop: samples the EMA model, single pass."""
    c = cfg.eval.class_id
    ref = reference_samples(mixture, c, cfg.eval.n_reference, cfg.run.seed)

    def evaluate(state: TrainState) -> dict:
        run = run_sampler(cfg, network_predictor(cfg, state), cfg.eval.n_samples, c, cfg.sampler.cfg_weight,
                          source=f"step{state.step}")
        rep = evaluate_samples(run.samples, mixture, c, ref, cfg.eval.outlier_k, cfg.eval.recall_r)
        return {"energy_distance": rep.energy_distance, "outlier_fraction": rep.outlier_fraction,
                "condition_accuracy": rep.condition_accuracy}

    return evaluate


def train_experiment(cfg: ExperimentConfig, out_dir=None, losses: list | None = None) -> TrainState:
    """Train per ``cfg``; with ``out_dir`` write config.toml, metrics.csv and checkpoints."""
    cfg.validate()
    mixture = cfg.data.mixture()
    if cfg.run.init_checkpoint:
        state = load_checkpoint(cfg.run.init_checkpoint)
    else:
        state = init_state(cfg.train, cfg.model, mixture.num_classes, cfg.run.seed)
    evaluate = make_evaluator(cfg, mixture) if (out_dir is not None or cfg.train.auto_w) else None
    metrics_path = save_periodic = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.toml")
        metrics_path = out / "metrics.csv"
        save_periodic = _periodic_saver(cfg, out)

    state = train(state, cfg.train, mixture, evaluate, metrics_path, save_periodic, losses)
    if out_dir is not None:
        save_checkpoint(state, Path(out_dir) / "checkpoint.bin", {"config": dumps_config(cfg)})
    return state


def _periodic_saver(cfg: ExperimentConfig, out: Path):
    header = {"config": dumps_config(cfg)}
    return lambda s: save_checkpoint(s, out / f"checkpoint_{s.step:07d}.bin", header)


def train_or_load(cfg: ExperimentConfig, out_dir) -> TrainState:
    """Reuse ``out_dir/checkpoint.bin`` when it was produced by the same config."""
    out = Path(out_dir)
    ckpt = out / "checkpoint.bin"
    if ckpt.is_file() and (out / "config.toml").is_file() and (out / "config.toml").read_text() == dumps_config(cfg):
        state = load_checkpoint(ckpt)
        if state.step == cfg.train.steps:
            return state
    return train_experiment(cfg, out)


# ---------------------------------------------------------------- sweeps

SWEEP_AXES = ("w", "w-table", "lambda")
SWEEP_FIELDS = ["value", "w", "w_table", "drop_prob", "energy_distance", "outlier_fraction",
                "mode_recall", "condition_accuracy", "nfe"]


def sweep_config(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "w":
        return cfg.replace(train={"w": float(value)})
    if axis == "w-table":
        return cfg.replace(train={"w": float(value) - 1.0})
    if axis == "lambda":
        return cfg.replace(train={"drop_prob": float(value)})
    raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def _sweep_point(args):
    cfg, axis, value, out_dir = args
    point = sweep_config(cfg, axis, value)
    sub = None if out_dir is None else Path(out_dir) / f"{axis}_{value:g}"
    state = train_experiment(point, sub)
    mixture = point.data.mixture()
    run = run_sampler(point, network_predictor(point, state), point.eval.n_samples, point.eval.class_id,
                      point.sampler.cfg_weight, source="sweep")
    rep = report_for(point, run, mixture)
    return {"value": value, "w": point.train.w, "w_table": 1.0 + point.train.w,
            "drop_prob": point.train.drop_prob, "energy_distance": rep.energy_distance,
            "outlier_fraction": rep.outlier_fraction, "mode_recall": rep.mode_recall,
            "condition_accuracy": rep.condition_accuracy, "nfe": rep.nfe}


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None, parallel: bool = False) -> list[dict]:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    for v in values:
        sweep_config(cfg, axis, v)  # validate every point before training any
    jobs = [(cfg, axis, v, out_dir) for v in values]
    if parallel and len(jobs) > 1 and worker_count() > 1:
        with ProcessPoolExecutor(max_workers=min(worker_count(), len(jobs))) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_rows(Path(out_dir) / "sweep.csv", SWEEP_FIELDS, rows)
    return rows


def write_rows(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


# ---------------------------------------------------------------- four-variant comparison

@dataclass
class VariantResult:
    name: str
    run: SampleRun
    traj_run: SampleRun
    report: MetricReport
    mean_turning: float
    density: np.ndarray
    kde_max_dev: float


def figure2_configs(cfg: ExperimentConfig) -> dict:
    return {
        "vanilla": cfg.replace(train={"objective": "vanilla"}),
        "mg": cfg.replace(train={"objective": "mg"}),
    }


def figure2_variants(cfg: ExperimentConfig, predictors: dict, mixture: LabeledMixture) -> dict:
    """Sample and score the four variants; ``predictors`` maps 'vanilla'/'mg' to predictors."""
    c = cfg.eval.class_id
    w_cfg = cfg.sampler.w_infer
    plan = {
        "conditional": (predictors["vanilla"], c, None),
        "unconditional": (predictors["vanilla"], None, None),
        "cfg": (predictors["vanilla"], c, w_cfg),
        "mg": (predictors["mg"], c, None),
    }
    grid = GridSpec.around(mixture, 6.0, cfg.eval.kde_grid)
    bw = cfg.eval.kde_bandwidth or None
    pts = grid.points()
    out = {}
    for name, (pred, cls, guidance) in plan.items():
        run = run_sampler(cfg, pred, cfg.eval.n_samples, cls, guidance, source=name)
        traj = run_sampler(cfg, pred, cfg.eval.n_trajectories, cls, guidance, record=True, source=name)
        rep = report_for(cfg, run, mixture, variant=name)
        dens = kde_grid(run.samples, grid, bw)
        truth = np.exp(log_density(mixture, pts, cls))
        turning = float(np.mean([trajectory_turning(t) for t in traj.trajectories]))
        out[name] = VariantResult(name, run, traj, rep, turning, dens, float(np.max(np.abs(dens - truth))))
    return out


FIGURE2_FIELDS = ["variant", "nfe", "outlier_fraction", "mode_recall", "condition_accuracy",
                  "energy_distance", "mean_turning", "kde_max_abs_dev"]


def run_figure2(cfg: ExperimentConfig, out_dir, oracle: bool = False) -> dict:
    """Train (or reuse) vanilla and MG models and write 12 SVG panels plus summary.csv."""
    from . import plots

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mixture = cfg.data.mixture()
    if oracle:
        predictors = {"vanilla": oracle_predictor(cfg, mixture), "mg": oracle_predictor(cfg, mixture, cfg.train.w)}
    else:
        predictors = {}
        for key, sub in figure2_configs(cfg).items():
            predictors[key] = network_predictor(sub, train_or_load(sub, out / "models" / key))
    results = figure2_variants(cfg, predictors, mixture)

    grid = GridSpec.around(mixture, 6.0, cfg.eval.kde_grid)
    kde_dir = out / "kde"
    kde_dir.mkdir(exist_ok=True)
    rows = []
    for name, r in results.items():
        title = f"{name} (nfe={r.run.nfe})"
        plots.scatter_panel(out / f"{name}_samples.svg", r.run.samples, mixture, grid, title)
        plots.trajectory_panel(out / f"{name}_trajectories.svg", r.traj_run.trajectories, mixture, grid, title)
        plots.density_panel(out / f"{name}_density.svg", r.density, mixture, grid, title)
        write_kde_csv(kde_dir / f"{name}.csv", grid, r.density)
        rows.append({"variant": name, "nfe": r.run.nfe, "outlier_fraction": r.report.outlier_fraction,
                     "mode_recall": r.report.mode_recall, "condition_accuracy": r.report.condition_accuracy,
                     "energy_distance": r.report.energy_distance, "mean_turning": r.mean_turning,
                     "kde_max_abs_dev": r.kde_max_dev})
    write_rows(out / "summary.csv", FIGURE2_FIELDS, rows)
    return results


def write_kde_csv(path, grid: GridSpec, density: np.ndarray):
    X, Y = np.meshgrid(grid.xs, grid.ys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "density"])
        for x, y, d in zip(X.ravel(), Y.ravel(), density.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(d))])
