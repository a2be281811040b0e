"""``mg-lab`` command line: train, sample, eval, sweep, figure2, verify."""
import argparse
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoint import load_checkpoint_with_extra
from .config import ExperimentConfig, load_config, loads_config
from .errors import MGLabError
from .metrics import evaluate_samples
from .sampler import read_samples_csv, write_samples_csv, write_trajectories_csv
from .trainer import OBJECTIVES


def _common(p: argparse.ArgumentParser, objective: bool = True):
    p.add_argument("--config", help="TOML experiment config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="output directory (overrides run.out_dir)")
    if objective:
        p.add_argument("--objective", choices=OBJECTIVES)
        g = p.add_mutually_exclusive_group()
        g.add_argument("--w", type=float, help="guidance weight in the training-target convention (0 = vanilla)")
        g.add_argument("--w-table", type=float, help="guidance weight in the table convention (1 = vanilla)")
    p.add_argument("--guidance", choices=("none", "cfg"), help="inference-time guidance")
    p.add_argument("--w-infer", type=float, help="CFG weight used with --guidance cfg")
    p.add_argument("--steps", type=int, help="override train.steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mg-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a predictor and write checkpoint + metrics.csv")
    _common(p)

    p = sub.add_parser("sample", help="sample from a checkpoint or the analytic oracle")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint file written by train")
    src.add_argument("--oracle", action="store_true", help="use the Bayes-optimal predictor")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--class", dest="class_id", type=int, help="class to sample (omit for unconditional)")
    p.add_argument("--trajectories", type=int, default=0, help="record this many chains to trajectories.csv")

    p = sub.add_parser("eval", help="score samples.csv against the dataset")
    _common(p, objective=False)
    p.add_argument("samples", help="samples.csv")
    p.add_argument("--class", dest="class_id", type=int, help="requested class (default: from the file)")

    p = sub.add_parser("sweep", help="train+eval over a list of w or lambda values")
    _common(p)
    p.add_argument("--axis", required=True, choices=ex.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--parallel", action="store_true", help="run points in worker processes")

    p = sub.add_parser("figure2", help="four-variant comparison panels and summary.csv")
    _common(p)
    p.add_argument("--oracle", action="store_true", help="use oracle predictors instead of trained models")

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", action="append", choices=list(ex_suites()), help="run only this suite")
    return parser


def ex_suites():
    from .verify import SUITES

    return SUITES


def resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else load_config(getattr(args, "config", None))
    train, sampler, run = {}, {}, {}
    if getattr(args, "objective", None):
        train["objective"] = args.objective
    if getattr(args, "w", None) is not None:
        train["w"] = args.w
    if getattr(args, "w_table", None) is not None:
        train["w"] = args.w_table - 1.0
    if getattr(args, "steps", None) is not None:
        train["steps"] = args.steps
    if getattr(args, "guidance", None):
        sampler["guidance"] = args.guidance
    if getattr(args, "w_infer", None) is not None:
        sampler["w_infer"] = args.w_infer
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "out", None):
        run["out_dir"] = args.out
    return cfg.replace(train=train, sampler=sampler, run=run)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    state = ex.train_experiment(cfg, cfg.run.out_dir)
    print(f"trained {cfg.train.objective} for {state.step} steps (w={cfg.train.w}, w_table={1 + cfg.train.w})")
    print(f"final loss {state.last_loss:.6g}; wrote {Path(cfg.run.out_dir) / 'checkpoint.bin'}")
    return 0


def cmd_sample(args) -> int:
    if args.n < 0:
        raise ValueError("--n must be >= 0")
    if args.checkpoint:
        state, extra = load_checkpoint_with_extra(args.checkpoint)
        base = None if args.config or "config" not in extra else loads_config(extra["config"])
        cfg = resolve_config(args, base)
        predictor = ex.network_predictor(cfg, state)
        source = str(args.checkpoint)
    else:
        cfg = resolve_config(args)
        mixture = cfg.data.mixture()
        mg_w = cfg.train.w if cfg.train.objective != "vanilla" else None
        predictor = ex.oracle_predictor(cfg, mixture, mg_w)
        source = "oracle" if mg_w is None else f"oracle-fixed-point(w={mg_w})"
    if args.class_id is not None:
        cfg.data.mixture().check_class(args.class_id)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = ex.run_sampler(cfg, predictor, args.n, args.class_id, cfg.sampler.cfg_weight, source=source)
    write_samples_csv(run, out / "samples.csv")
    if args.trajectories:
        traj = ex.run_sampler(cfg, predictor, args.trajectories, args.class_id, cfg.sampler.cfg_weight,
                              record=True, source=source)
        write_trajectories_csv(traj, out / "trajectories.csv")
    print(f"sampled {args.n} chains with {cfg.sampler.kind} ({run.steps} steps, guidance {run.guidance_mode})")
    print(f"NFE {run.nfe}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    samples, classes = read_samples_csv(args.samples)
    c = args.class_id
    if c is None:
        labels = {k for k in classes if k is not None}
        if len(labels) > 1:
            raise ValueError("samples.csv mixes classes; pass --class")
        c = labels.pop() if labels else cfg.eval.class_id
    mixture = cfg.data.mixture()
    mixture.check_class(c)
    ref = ex.reference_samples(mixture, c, cfg.eval.n_reference, cfg.run.seed)
    report = evaluate_samples(samples, mixture, c, ref, cfg.eval.outlier_k, cfg.eval.recall_r,
                              metadata={"samples": Path(args.samples).name, "class": c, "seed": cfg.run.seed})
    text = report.to_json()
    out = Path(args.out) if args.out else Path(args.samples).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = [v for v in (s.strip() for s in args.values.split(",")) if v]
    if not values:
        raise UsageError("--values needs at least one number")
    rows = ex.run_sweep(cfg, args.axis, [float(v) for v in values], cfg.run.out_dir, args.parallel)
    print(f"{'value':>8} {'s':>6} {'w_table':>8} {'lambda':>7} {'energy':>10} {'outliers':>9} {'recall':>7}")
    for r in rows:
        print(f"{r['value']:8g} {r['w']:6g} {r['w_table']:8g} {r['drop_prob']:7g} {r['energy_distance']:10.5f} "
              f"{r['outlier_fraction']:9.4f} {r['mode_recall']:7.3f}")
    print(f"wrote {Path(cfg.run.out_dir) / 'sweep.csv'}")
    return 0


def cmd_figure2(args) -> int:
    cfg = resolve_config(args)
    results = ex.run_figure2(cfg, cfg.run.out_dir, oracle=args.oracle)
    for name, r in results.items():
        print(f"{name:14s} nfe={r.run.nfe:8d} outliers={r.report.outlier_fraction:.4f} "
              f"recall={r.report.mode_recall:.3f} turning={r.mean_turning:.3f}")
    print(f"wrote {Path(cfg.run.out_dir)}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suites

    results = run_suites(args.suite)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("all suites passed" if not failed else f"failed: {', '.join(failed)}")
    return 1 if failed else 0


class UsageError(ValueError):
    pass


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "sweep": cmd_sweep,
            "figure2": cmd_figure2, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"mg-lab {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (MGLabError, ValueError, OSError) as e:
        print(f"mg-lab {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
