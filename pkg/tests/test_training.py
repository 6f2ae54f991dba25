import math

import numpy as np
import pytest

import rvae_st.training as training
from rvae_st.data import gen_sine, split_train_val
from rvae_st.numerics import Rng, derive_seed
from rvae_st.rvae import init_rvae
from rvae_st.training import (AdamState, TrainPlan, adam_step, conventional_train, global_norm,
                              linear_schedule, make_phase_data, subsequent_train, train_phase)


class Toy:
    """Linear model y = x @ w with a dict of tensors."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def tensors(self):
        return {"w": self.w}

    def copy(self):
        return Toy(self.w.copy())


def toy_objective(params, batch, alpha, beta, rng):
    x, y = batch[:, :, 0], batch[:, :, 1]
    r = x @ params.w - y.sum(axis=1)
    return float(np.mean(r * r)), {"w": 2.0 * x.T @ r / len(r)}


def toy_eval(params, batch, alpha, beta, rng):
    return toy_objective(params, batch, alpha, beta, rng)[0]


def toy_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = np.zeros((n, 3))
    y[:, 0] = x @ np.array([1.0, -2.0, 0.5])
    return np.stack([x, y], axis=2)


# --- Adam --------------------------------------------------------------------

def test_adam_hand_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-7
    theta, m, v = 1.0, 0.0, 0.0
    trace = []
    for t in range(1, 4):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(theta)
    p = {"t": np.array([1.0])}
    st = AdamState(lr=lr)
    for want in trace:
        adam_step(p, {"t": 2 * p["t"]}, st)
        assert abs(p["t"][0] - want) < 1e-10
    assert st.step == 3


def test_adam_zero_grad_and_first_step():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    st = AdamState()
    adam_step(p, {"a": np.zeros(3)}, st)
    np.testing.assert_array_equal(p["a"], [1.0, -2.0, 3.0])
    assert st.step == 1
    g = np.array([5.0, -0.3, 1e-2])
    q = {"a": np.zeros(3)}
    adam_step(q, {"a": g}, AdamState(lr=1e-4))
    np.testing.assert_allclose(q["a"], -1e-4 * np.sign(g), rtol=1e-4)


def test_adam_errors_and_clip():
    with pytest.raises(ValueError):
        adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, AdamState())
    with pytest.raises(ValueError):
        adam_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, AdamState())
    assert global_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == 5.0
    # clipping by a positive factor leaves the first Adam step unchanged
    p1, p2 = {"a": np.zeros(2)}, {"a": np.zeros(2)}
    g = {"a": np.array([30.0, -40.0])}
    adam_step(p1, g, AdamState(lr=0.01))
    adam_step(p2, g, AdamState(lr=0.01), clip_norm=1.0)
    np.testing.assert_allclose(p1["a"], p2["a"], rtol=1e-6)


# --- plans -------------------------------------------------------------------

def test_plan_validation():
    assert linear_schedule(100, 100, 300) == (100, 200, 300)
    assert TrainPlan().schedule == tuple(range(100, 1001, 100))
    assert TrainPlan().alpha(250) == 2.0
    for bad in [dict(schedule=(200, 100)), dict(schedule=(100, 100)), dict(patience=0),
                dict(schedule=()), dict(clip_norm=0.0)]:
        with pytest.raises(ValueError):
            TrainPlan(**bad)


# --- train_phase -------------------------------------------------------------

def test_patience_one_restores_epoch_one():
    data = toy_data()
    seen = []

    def worsening(params, batch, alpha, beta, rng):
        seen.append(params.w.copy())
        return float(len(seen))

    plan = TrainPlan(schedule=(3,), patience=1, max_epochs=50, lr=0.01, batch_size=16)
    p, rep = train_phase(data[:180], data[180:], Toy(np.zeros(3)), plan,
                         objective=toy_objective, evaluate=worsening)
    assert rep.epochs_run == 2 and rep.best_epoch == 1
    np.testing.assert_array_equal(p.w, seen[0])
    assert not np.array_equal(seen[0], seen[1])


def test_toy_convex_monotone():
    data = toy_data()
    plan = TrainPlan(schedule=(3,), patience=20, max_epochs=400, lr=0.02, batch_size=180)
    p, rep = train_phase(data[:180], data[180:], Toy(np.zeros(3)), plan,
                         objective=toy_objective, evaluate=toy_eval)
    h = np.array(rep.history)
    # full-batch Adam on a convex quadratic: decreasing while far from the optimum
    early = h[:50]
    assert np.all(np.diff(early) < 0)
    np.testing.assert_allclose(p.w, [1.0, -2.0, 0.5], atol=0.05)


def test_train_phase_deterministic_and_errors():
    data = toy_data()
    plan = TrainPlan(schedule=(3,), max_epochs=5, lr=0.01, batch_size=7, seed=4)
    a = train_phase(data[:180], data[180:], Toy(np.zeros(3)), plan,
                    objective=toy_objective, evaluate=toy_eval)
    b = train_phase(data[:180], data[180:], Toy(np.zeros(3)), plan,
                    objective=toy_objective, evaluate=toy_eval)
    assert a[1] == b[1] and np.array_equal(a[0].w, b[0].w)
    with pytest.raises(ValueError):
        train_phase(data[:0], data, Toy(np.zeros(3)), plan, objective=toy_objective,
                    evaluate=toy_eval)


def test_non_finite_everywhere_raises():
    data = toy_data()
    plan = TrainPlan(schedule=(3,), max_epochs=2, patience=5)
    with pytest.raises(FloatingPointError):
        train_phase(data[:180], data[180:], Toy(np.zeros(3)), plan, objective=toy_objective,
                    evaluate=lambda *a: float("nan"))


# --- schemes on the real model -----------------------------------------------

def sine_plan(**kw):
    base = dict(schedule=(10, 20), hidden=4, layers=2, latent=2, max_epochs=2, patience=5,
                batch_size=8, lr=1e-3, seed=3)
    base.update(kw)
    return TrainPlan(**base)


def sine_source(l, phase):
    return gen_sine(40, l, channels=2, rng=Rng(derive_seed(1, "sine", l)))


def test_conventional_equals_single_entry_schedule():
    plan = sine_plan()
    p1, r1 = conventional_train(sine_source, 20, plan)
    p2, r2 = subsequent_train(sine_source, sine_plan(schedule=(20,)))
    assert r1 == r2[0]
    for a, b in zip(p1.tensors().values(), p2.tensors().values()):
        assert np.array_equal(a, b)
    p3, r3 = conventional_train(sine_source, 20, plan)
    assert r3 == r1


def test_carry_over_and_fresh_adam():
    plan = sine_plan()
    snaps = {}
    p, reps = subsequent_train(sine_source, plan,
                               on_phase=lambda k, prm, rep: snaps.setdefault(k, prm.copy()))
    assert [r.length for r in reps] == [10, 20]
    assert all(math.isfinite(r.best_val_loss) for r in reps)
    # replaying phase 1 by hand from the phase-0 weights with a fresh optimizer
    data = make_phase_data(sine_source, 20, 1, plan)
    tr, va = split_train_val(data, derive_seed(plan.seed, "split", 20))
    q, rep = train_phase(tr, va, snaps[0].copy(), plan, phase=1)
    assert rep == reps[1]
    for a, b in zip(p.tensors().values(), q.tensors().values()):
        assert np.array_equal(a, b)


def test_alpha_recomputed_per_phase(monkeypatch):
    alphas = []
    real = training.loss_backward

    def spy(params, x, alpha, beta, **kw):
        alphas.append((x.shape[1], alpha))
        return real(params, x, alpha, beta, **kw)

    monkeypatch.setattr(training, "loss_backward", spy)
    subsequent_train(sine_source, sine_plan(max_epochs=1))
    assert {a for l, a in alphas if l == 10} == {50.0}
    assert {a for l, a in alphas if l == 20} == {25.0}


def test_phase_data_sources():
    plan = TrainPlan(schedule=(10,))
    series = np.random.default_rng(0).normal(size=(100, 2))
    assert make_phase_data(series, 10, 0, plan).shape == (91, 10, 2)
    batch = np.zeros((3, 30, 1))
    assert make_phase_data(batch, 30, 0, plan).shape == (3, 30, 1)
    assert make_phase_data(batch, 10, 0, plan).shape == (63, 10, 1)
    with pytest.raises(ValueError):
        make_phase_data(batch, 40, 0, plan)
    with pytest.raises(ValueError):
        subsequent_train(series[:15], TrainPlan(schedule=(10, 20)))


def test_plain_init_matches_seed():
    plan = sine_plan(max_epochs=1, schedule=(10,))
    init = init_rvae(2, Rng(derive_seed(plan.seed, "init")), hidden=4, layers=2, latent=2)
    seen = []
    subsequent_train(sine_source, plan, on_phase=lambda k, prm, rep: seen.append(prm))
    assert seen[0].dims() == init.dims()
