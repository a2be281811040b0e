"""Self-check suites behind ``mg-lab verify`` and the acceptance tests."""
import time
from dataclasses import dataclass

import numpy as np

from . import oracle
from .mixture import grid_two_class
from .network import Arch, Params, init_params, loss_and_grad
from .rng import substream
from .sampler import FixedPointPredictor, OraclePredictor, sample_ddpm, sample_flow_em, sample_flow_euler
from .schedule import linear_schedule
from .trainer import ModelConfig, TrainConfig, init_state, train, train_step

SCORE_TOL = 1e-5
GRAD_TOL = 1e-4
GRAD_FLOOR = 1e-8
FIXED_POINT_TOL = 1e-10
STOP_GRAD_TOL = 1e-12

VP_TIMES = (0, 100, 300, 600, 999)
FLOW_TIMES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}) in {self.seconds:.2f}s {self.detail}".rstrip()


def _timed(name, tol, fn) -> SuiteResult:
    start = time.perf_counter()
    value, detail = fn()
    ok = bool(np.isfinite(value) and value <= tol)
    return SuiteResult(name, ok, float(value), tol, time.perf_counter() - start, detail)


def score_grid(dm: oracle.DiffusedMixture, n: int = 21) -> np.ndarray:
    """``n x n`` grid over the diffused means' bounding box padded by 3 std."""
    pad = 3.0 * float(np.sqrt(dm.variances.max()))
    lo = dm.means.min(axis=0) - pad
    hi = dm.means.max(axis=0) + pad
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def score_pairs(dm: oracle.DiffusedMixture, c: int = 0, w: float = 0.5):
    """(name, analytic score fn, scalar log-density it should be the gradient of)."""
    def log_post(x):
        return np.log(oracle.class_posterior_t(dm, x)[..., c])

    return [
        ("cond", lambda x: oracle.cond_score(dm, x, c), lambda x: oracle.log_density_t(dm, x, c)),
        ("uncond", lambda x: oracle.uncond_score(dm, x), lambda x: oracle.log_density_t(dm, x)),
        ("posterior", lambda x: oracle.posterior_score(dm, x, c), log_post),
        ("guided", lambda x: oracle.guided_score(dm, x, c, w),
         lambda x: oracle.log_density_t(dm, x, c) + w * log_post(x)),
    ]


def score_relative_error(analytic, fd) -> np.ndarray:
    """Per-point ``|a - fd| / max(|a|, 1)``; the floor keeps near-zero scores meaningful."""
    num = np.linalg.norm(analytic - fd, axis=-1)
    return num / np.maximum(np.linalg.norm(analytic, axis=-1), 1.0)


def check_scores(mixture=None, h: float = 1e-4):
    mixture = mixture or grid_two_class()
    sched = linear_schedule()
    worst, where = 0.0, ""
    cases = [(oracle.VP, t) for t in VP_TIMES] + [(oracle.FLOW, t) for t in FLOW_TIMES]
    for process, t in cases:
        dm = oracle.diffuse_mixture(mixture, process, t, sched)
        x = score_grid(dm)
        for name, score, logp in score_pairs(dm):
            err = float(score_relative_error(score(x), oracle.finite_diff_grad(logp, x, h)).max())
            if err > worst:
                worst, where = err, f"[worst {name} {process} t={t}]"
    return worst, where


def grad_check_params(w_input: bool, seed: int = 0) -> Params:
    arch = Arch(num_classes=2, hidden=8, layers=2, freqs=3, emb_dim=4, w_input=w_input)
    params = init_params(arch, substream(seed, "gradcheck"), dtype=np.float64)
    rng = substream(seed, "gradcheck", 1)
    # the zero read-out at init would hide most of the backward pass
    return Params(arch, {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.tensors.items()})


def check_gradients(seed: int = 0, h: float = 1e-5, n: int = 16):
    worst, where = 0.0, ""
    for w_input in (False, True):
        params = grad_check_params(w_input, seed)
        rng = substream(seed, "gradcheck", 2)
        x = rng.standard_normal((n, 2))
        t = rng.random(n)
        c = rng.integers(-1, 2, size=n)
        y = rng.standard_normal((n, 2))
        w = rng.uniform(0, 3, size=n) if w_input else None
        _, grads = loss_and_grad(params, x, t, c, y, w)
        for name, p in params.tensors.items():
            for i in np.ndindex(p.shape):
                orig = p[i]
                p[i] = orig + h
                up, _ = loss_and_grad(params, x, t, c, y, w)
                p[i] = orig - h
                down, _ = loss_and_grad(params, x, t, c, y, w)
                p[i] = orig
                fd = (up - down) / (2 * h)
                g = grads[name][i]
                err = abs(fd - g) / max(abs(g), abs(fd), GRAD_FLOOR)
                if err > worst:
                    worst, where = err, f"[worst {name}{list(i)} w_input={w_input}]"
    return worst, where


def check_fixed_point(mixture=None):
    mixture = mixture or grid_two_class()
    sched = linear_schedule()
    worst = 0.0
    for process, t in ((oracle.VP, 300), (oracle.FLOW, 0.5)):
        dm = oracle.diffuse_mixture(mixture, process, t, sched)
        x = score_grid(dm, 11)
        for w in np.round(np.arange(1, 10) / 10, 1):
            closed = oracle.mg_fixed_point(dm, x, 0, w)
            it = oracle.mg_fixed_point(dm, x, 0, w, method="iterate")
            worst = max(worst, float(np.max(np.abs(closed - it))))
    return worst, ""


def nfe_counts(mixture=None, n: int = 7, steps: int = 10) -> dict:
    """Recorded NFE for guided-by-training vs CFG sampling at equal steps."""
    mixture = mixture or grid_two_class()
    sched = linear_schedule(T=20)
    out = {}
    vp_mg = sample_ddpm(FixedPointPredictor(mixture, "vp", 0.5, sched), sched, n, 0)
    vp_cfg = sample_ddpm(OraclePredictor(mixture, "vp", sched), sched, n, 0, guidance=1.0)
    out["ddpm"] = (vp_mg.nfe, vp_cfg.nfe)
    fl_mg = FixedPointPredictor(mixture, "flow", 0.5)
    fl = OraclePredictor(mixture, "flow")
    out["euler"] = (sample_flow_euler(fl_mg, n, 0, steps).nfe, sample_flow_euler(fl, n, 0, steps, guidance=1.0).nfe)
    out["em"] = (sample_flow_em(fl_mg, n, 0, steps).nfe, sample_flow_em(fl, n, 0, steps, guidance=1.0).nfe)
    return out


def check_nfe():
    counts = nfe_counts()
    bad = {k: v for k, v in counts.items() if 2 * v[0] != v[1]}
    return float(len(bad)), " ".join(f"{k}={a}/{b}" for k, (a, b) in counts.items())


def degeneracy_config(steps: int, process: str = "vp") -> TrainConfig:
    return TrainConfig(objective="vanilla", process=process, steps=steps, batch_size=64)


def small_model() -> ModelConfig:
    return ModelConfig(hidden=32, layers=2, freqs=4, emb_dim=8)


def degeneracy_mismatch(steps: int = 200, seed: int = 0, process: str = "vp") -> float:
    """Max abs difference between vanilla and MG(w=0) states after ``steps`` steps."""
    mixture = grid_two_class()
    base = degeneracy_config(steps, process)
    mg = TrainConfig(**{**base.__dict__, "objective": "mg", "w": 0.0})
    a = train(init_state(base, small_model(), 2, seed), base, mixture)
    b = train(init_state(mg, small_model(), 2, seed), mg, mixture)
    diff = 0.0
    for pa, pb in ((a.params, b.params), (a.ema, b.ema)):
        for k in pa.tensors:
            if not np.array_equal(pa[k], pb[k]):
                diff = max(diff, float(np.max(np.abs(pa[k] - pb[k]))), np.finfo(float).tiny)
    return diff


def check_degeneracy(steps: int = 200):
    return degeneracy_mismatch(steps), f"[{steps} steps]"


def teacher_gradient(seed: int = 0, steps: int = 3, w: float = 0.5) -> float:
    """Max-norm of any non-EMA change to the teacher over a few MG steps.

    Teacher parameters only produce constant targets; whatever moves them
    besides the EMA rule is a gradient leak.
    """
    mixture = grid_two_class()
    cfg = TrainConfig(objective="mg", w=w, steps=steps, batch_size=32, ema_decay=0.9)
    state = init_state(cfg, small_model(), 2, seed)
    sched = cfg.schedule()
    worst = 0.0
    for _ in range(steps):
        nxt = train_step(state, cfg, mixture, sched)
        for k, e in nxt.ema.tensors.items():
            expect = cfg.ema_decay * state.ema[k] + (1 - cfg.ema_decay) * nxt.params[k]
            worst = max(worst, float(np.max(np.abs(e - expect))))
        state = nxt
    return worst


def check_stop_gradient():
    return teacher_gradient(), ""


SUITES = {
    "score-fd": (SCORE_TOL, check_scores),
    "gradient": (GRAD_TOL, check_gradients),
    "fixed-point": (FIXED_POINT_TOL, check_fixed_point),
    "nfe": (0.0, check_nfe),
    "degeneracy": (0.0, check_degeneracy),
    "stop-gradient": (STOP_GRAD_TOL, check_stop_gradient),
}


def run_suites(names=None) -> list[SuiteResult]:
    names = list(SUITES) if names is None else list(names)
    return [_timed(n, SUITES[n][0], SUITES[n][1]) for n in names]
