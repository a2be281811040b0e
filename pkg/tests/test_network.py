import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mg_lab.errors import ArchitectureError, ShapeMismatchError, UnknownClassError
from mg_lab.mixture import grid_two_class
from mg_lab.network import NULL, Arch, Params, check_params, ema_update, forward, init_params, loss_and_grad
from mg_lab.oracle import bayes_eps, diffuse_mixture
from mg_lab.rng import substream
from mg_lab.schedule import linear_schedule
from mg_lab.trainer import AdamState, TrainConfig, adamw_step, init_state, ModelConfig, train
from mg_lab.verify import GRAD_FLOOR, grad_check_params, score_grid


def _batch(n=6, seed=0, w_input=False):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    t = rng.random(n)
    c = rng.integers(-1, 2, size=n)
    w = rng.uniform(0, 3, size=n) if w_input else None
    return x, t, c, w


def test_init_zero_readout():
    p = init_params(Arch(2), substream(0, "init"))
    check_params(p)
    x, t, c, _ = _batch()
    assert np.all(forward(p, x, t, c) == 0)
    assert p["class_emb"].shape == (3, 16)
    assert p.dtype == np.float32


def test_init_determinism():
    a = init_params(Arch(2), substream(5, "init"))
    b = init_params(Arch(2), substream(5, "init"))
    d = init_params(Arch(2), substream(6, "init"))
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)
    assert not np.array_equal(a["W1"], d["W1"])


def test_forward_deterministic_and_shapes():
    p = grad_check_params(True)
    x, t, c, w = _batch(w_input=True)
    assert np.array_equal(forward(p, x, t, c, w), forward(p, x, t, c, w))
    assert forward(p, x, t, c, w).shape == (6, 2)


def test_forward_errors():
    p = grad_check_params(False)
    x, t, _, _ = _batch()
    with pytest.raises(UnknownClassError):
        forward(p, x, t, 2)
    with pytest.raises(ArchitectureError):
        forward(p, x, t, 0, w=1.0)
    with pytest.raises(ShapeMismatchError):
        forward(p, np.zeros((3, 3)), 0.5, 0)
    with pytest.raises(ArchitectureError):
        forward(grad_check_params(True), x, t, 0)
    no_null = init_params(Arch(2, null_class=False), substream(0, "init"))
    assert no_null["class_emb"].shape == (2, 16)
    with pytest.raises(UnknownClassError):
        forward(no_null, x, t, None)


def test_check_params_rejects_bad_shapes():
    p = init_params(Arch(2), substream(0, "init"))
    bad = Params(p.arch, {**p.tensors, "W1": p["W1"][:-1]})
    with pytest.raises(ShapeMismatchError):
        check_params(bad)


def test_zero_loss_at_own_outputs():
    p = grad_check_params(True)
    x, t, c, w = _batch(w_input=True)
    loss, grads = loss_and_grad(p, x, t, c, forward(p, x, t, c, w), w)
    assert loss == 0
    assert all(np.all(g == 0) for g in grads.values())


@pytest.mark.parametrize("w_input", [False, True])
def test_gradients_match_finite_differences(w_input):
    """Two-sample batch, every coordinate of a (L=2, H=8) net."""
    p = grad_check_params(w_input, seed=3)
    x, t, c, w = _batch(2, seed=4, w_input=w_input)
    y = np.random.default_rng(5).standard_normal((2, 2))
    _, grads = loss_and_grad(p, x, t, c, y, w)
    h = 1e-5
    for name, arr in p.tensors.items():
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + h
            up, _ = loss_and_grad(p, x, t, c, y, w)
            arr[i] = orig - h
            down, _ = loss_and_grad(p, x, t, c, y, w)
            arr[i] = orig
            fd = (up - down) / (2 * h)
            g = grads[name][i]
            assert abs(fd - g) / max(abs(fd), abs(g), GRAD_FLOOR) <= 1e-4, (name, i)


def test_duplicated_batch_invariance():
    p = grad_check_params(True)
    x, t, c, w = _batch(w_input=True)
    y = np.ones((6, 2))
    l1, g1 = loss_and_grad(p, x, t, c, y, w)
    l2, g2 = loss_and_grad(p, np.tile(x, (2, 1)), np.tile(t, 2), np.tile(c, 2), np.tile(y, (2, 1)), np.tile(w, 2))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_loss_shape_errors():
    p = grad_check_params(False)
    x, t, c, _ = _batch()
    with pytest.raises(ShapeMismatchError):
        loss_and_grad(p, x, t, c, np.zeros((5, 2)))
    with pytest.raises(ShapeMismatchError):
        loss_and_grad(p, np.zeros((0, 2)), 0.5, 0, np.zeros((0, 2)))


def test_ema_examples():
    a = grad_check_params(False, 1)
    b = grad_check_params(False, 2)
    assert all(np.array_equal(ema_update(a, b, 0.0)[k], b[k]) for k in a.tensors)
    assert all(np.array_equal(ema_update(a, b, 1.0)[k], a[k]) for k in a.tensors)
    with pytest.raises(ValueError):
        ema_update(a, b, 1.5)
    with pytest.raises(ShapeMismatchError):
        ema_update(a, grad_check_params(True), 0.5)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(1, 30))
def test_ema_contraction(decay, n):
    a = grad_check_params(False, 1)
    b = grad_check_params(False, 2)
    gap0 = max(np.max(np.abs(a[k] - b[k])) for k in a.tensors)
    e = a
    for _ in range(n):
        e = ema_update(e, b, decay)
    gap = max(np.max(np.abs(e[k] - b[k])) for k in a.tensors)
    assert gap <= decay**n * gap0 * (1 + 1e-9) + 1e-15


def test_null_and_class_outputs_differ_after_training():
    mix = grid_two_class(1, 2, 4.0, 0.2)
    cfg = TrainConfig(objective="vanilla", steps=400, batch_size=128, lr=3e-3)
    state = train(init_state(cfg, ModelConfig(hidden=32, layers=2), 2, 0), cfg, mix)
    x = np.random.default_rng(0).uniform(-3, 3, size=(200, 2))
    diff = forward(state.params, x, 0.1, None) - forward(state.params, x, 0.1, 0)
    assert np.mean(diff**2) > 0


def test_expressivity_on_oracle_field():
    """A (L=3, H=64) net regresses the Bayes-optimal eps field on a fixed grid."""
    mix = grid_two_class(1, 2, 2.0, 0.3)
    sched = linear_schedule()
    xs, ts, ys = [], [], []
    for t in (100, 300, 600):
        dm = diffuse_mixture(mix, "vp", t, sched)
        x = score_grid(dm)
        xs.append(x)
        ts.append(np.full(len(x), t / sched.T))
        ys.append(bayes_eps(dm, x, 0))
    x, t, y = np.concatenate(xs), np.concatenate(ts), np.concatenate(ys)
    p = init_params(Arch(2, hidden=64, layers=3), substream(0, "init"))
    adam = AdamState.zeros_like(p)
    for _ in range(1000):
        loss, g = loss_and_grad(p, x, t, 0, y)
        p, adam = adamw_step(p, g, adam, 3e-3)
    assert np.mean((forward(p, x, t, 0) - y) ** 2) < 1e-3


def test_null_index_maps_to_last_row():
    p = grad_check_params(False)
    x, t, _, _ = _batch(3)
    a = forward(p, x, t, np.full(3, NULL))
    b = forward(p, x, t, None)
    assert np.array_equal(a, b)
