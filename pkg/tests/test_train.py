import json
import math
from pathlib import Path

import numpy as np
import pytest

from dbsn import streams
from dbsn import tensor as T
from dbsn.concrete import SharpTemp
from dbsn.data import gen_dataset
from dbsn.network import CellSpec, NetworkSpec, cross_entropy, network_forward
from dbsn.tensor import Tensor
from dbsn.train import (
    AdamSlots,
    TrainConfig,
    Trainer,
    adam_step,
    beta_schedule,
    build_model,
    clip_grad_norm,
    elbo_terms,
    milestone_lr,
    sgd_momentum_step,
    tau_schedule,
    train,
)

from conftest import tiny_spec

THRESHOLDS = json.loads((Path(__file__).parent / "fixtures" / "thresholds.json").read_text())


def toy_data(n=40, seed=0):
    ds = gen_dataset("two_moons", n, 0.2, seed, test_fraction=0.0)
    return ds.features, ds.labels


# -- schedules --------------------------------------------------------------------


def test_tau_schedule():
    assert tau_schedule(0) == 3.0
    assert tau_schedule(10**9) == 1.0
    cross = math.log(3) / 1.5e-5
    assert round(cross) == 73241
    assert tau_schedule(73240) > 1.0
    assert tau_schedule(73241) == 1.0
    with pytest.raises(ValueError):
        tau_schedule(-1)


def test_beta_schedule():
    assert beta_schedule(0, 1000) == 1.0
    assert beta_schedule(1000, 1000) == 0.5
    assert beta_schedule(5000, 1000) == 0.5
    assert beta_schedule(500, 1000) == 0.75


def test_milestones():
    assert milestone_lr(0.1, 49 / 100) == 0.1
    assert milestone_lr(0.1, 50 / 100) == pytest.approx(0.01, abs=1e-15)
    assert milestone_lr(0.1, 75 / 100) == pytest.approx(0.001, abs=1e-15)


def test_trainer_lr_follows_epoch_fraction():
    x, y = toy_data(64)
    tr = Trainer("map", tiny_spec(), TrainConfig(epochs=4, batch_size=32, lr_w=0.1), x, y)
    assert [tr.lr_at(t) for t in (0, 3, 4, 5, 6, 7)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_auto_tau_decay_reaches_floor_late():
    x, y = toy_data(64)
    tr = Trainer("dbsn", tiny_spec(), TrainConfig(epochs=10, batch_size=8, tau_decay="auto"), x, y)
    floor_step = math.log(3) / tr.tau_decay
    assert floor_step == pytest.approx(0.94 * tr.total_steps)
    assert tr.temperature_at(0) == SharpTemp(1.0, 3.0)
    assert tr.temperature_at(tr.total_steps).tau == 1.0
    assert tr.temperature_at(tr.total_steps).beta == 0.5


# -- optimizers --------------------------------------------------------------------


def test_sgd_plain_step():
    w = np.array([1.0, -2.0])
    sgd_momentum_step(w, np.array([0.5, 0.5]), None, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(w, [0.95, -2.05], atol=1e-15)


def test_sgd_momentum_buffer():
    w = np.zeros(1)
    g = np.ones(1)
    buf = sgd_momentum_step(w, g, None, 1.0, 0.9)
    buf = sgd_momentum_step(w, g, buf, 1.0, 0.9)
    np.testing.assert_allclose(buf, [1.9])
    np.testing.assert_allclose(w, [-2.9])


def test_adam_first_step_magnitude():
    w = np.zeros(3)
    adam_step(w, np.array([0.2, -5.0, 1e3]), AdamSlots(np.zeros(3), np.zeros(3)), lr=3e-4, betas=(0.5, 0.999))
    np.testing.assert_allclose(np.abs(w), 3e-4, rtol=1e-6)


def test_clip():
    grads = [np.array([30.0, 0.0]), np.array([[0.0], [40.0]])]
    assert clip_grad_norm(grads, 5.0) == pytest.approx(50.0)
    assert math.sqrt(sum(np.sum(g * g) for g in grads)) == pytest.approx(5.0, abs=1e-12)
    small = [np.array([1.0, 1.0])]
    clip_grad_norm(small, 5.0)
    np.testing.assert_array_equal(small[0], [1.0, 1.0])


def test_config_validation():
    for bad in ({"mc_samples": 0}, {"weight_decay": -1}, {"lr_w": 0}, {"grad_clip_norm": 0}, {"tau_decay": "fast"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- objective ---------------------------------------------------------------------


def _terms(model, x, y, st, key=(0, streams.TRAIN, 0), T_=2, wd=1e-4):
    return elbo_terms(model, x, y, st, key, T_, dataset_size=100, num_batches=4, weight_decay=wd)


def test_kl_zero_when_q_equals_prior():
    x, y = toy_data(8)
    model = build_model("dbsn", tiny_spec(), TrainConfig())
    model.theta.values[...] = 0.0
    assert _terms(model, x, y, SharpTemp(1.0, 2.0)).kl.item() == 0.0


def test_no_decay_no_l2():
    x, y = toy_data(8)
    model = build_model("dbsn", tiny_spec(), TrainConfig())
    assert _terms(model, x, y, SharpTemp(0.8, 2.0), wd=0.0).l2.item() == 0.0


def test_nll_scaling_is_dataset_level():
    x, y = toy_data(8)
    model = build_model("map", tiny_spec(), TrainConfig())
    st = SharpTemp(0.0, 1.0)
    nll = elbo_terms(model, x, y, st, (0,), 1, dataset_size=1000, num_batches=1, weight_decay=0).nll.item()
    direct = cross_entropy(network_forward(Tensor(x), model.sample_structure(st, (0,)), model.weights, model.spec), y)
    assert nll == pytest.approx(1000 * direct.values.mean(), rel=1e-12)


def test_more_mc_samples_lower_loss_variance():
    x, y = toy_data(16)
    model = build_model("dbsn", tiny_spec(), TrainConfig(seed=3))
    model.theta.values[...] = np.random.default_rng(0).normal(size=model.theta.shape)
    st = SharpTemp(1.0, 1.0)
    with T.no_grad():
        v = {n: np.var([_terms(model, x, y, st, key=(r,), T_=n).loss.item() for r in range(100)]) for n in (1, 4)}
    assert v[4] < v[1]


def _grad_model():
    spec = NetworkSpec(2, 2, num_cells=2, cell=CellSpec(num_nodes=3, op_kinds=("zero", "identity", "affine_relu"), node_width=3))
    model = build_model("dbsn", spec, TrainConfig(seed=5))
    model.theta.values[...] = np.random.default_rng(1).normal(size=model.theta.shape)
    return model


def test_theta_and_weight_gradients_match_fd():
    x, y = toy_data(10)
    model = _grad_model()
    st = SharpTemp(0.7, 1.5)

    def loss_theta(th):
        model.theta = th
        return _terms(model, x, y, st).loss

    assert T.finite_difference_check(loss_theta, Tensor(model.theta.values.copy())) < 1e-4
    for name in ("stem.W", "cell0.e1.op2.W", "down0.b", "head.W"):
        orig = model.weights[name]

        def loss_w(w, name=name):
            model.weights[name] = w
            return _terms(model, x, y, st).loss

        assert T.finite_difference_check(loss_w, Tensor(orig.values.copy())) < 1e-4
        model.weights[name] = orig


def test_weight_decay_gradient_is_2_gamma_w():
    x, y = toy_data(10)
    model = _grad_model()
    st = SharpTemp(0.7, 1.5)
    grads = {}
    for wd in (0.0, 0.3):
        for p in model.weights.values():
            p.zero_grad()
        T.backward(_terms(model, x, y, st, wd=wd).loss)
        grads[wd] = {k: v.grad.copy() for k, v in model.weights.items()}
    for k, w in model.weights.items():
        np.testing.assert_allclose(grads[0.3][k] - grads[0.0][k], 2 * 0.3 * w.values, atol=1e-10)


# -- training steps --------------------------------------------------------------------


def test_one_step_moves_theta_and_w():
    x, y = toy_data(64)
    tr = Trainer("dbsn", tiny_spec(), TrainConfig(epochs=1, batch_size=32, lr_theta=0.01), x, y)
    th0 = tr.model.theta.values.copy()
    w0 = {k: v.values.copy() for k, v in tr.model.weights.items()}
    rec = tr.train_step()
    assert np.linalg.norm(tr.model.theta.values - th0) > 0
    assert sum(np.linalg.norm(v.values - w0[k]) for k, v in tr.model.weights.items()) > 0
    assert rec["loss"] == pytest.approx(rec["nll"] + rec["kl"] + rec["l2"], abs=1e-9)
    assert tr.state.step == 1


def test_seed_determinism():
    x, y = toy_data(64)
    runs = [train("dbsn", tiny_spec(), TrainConfig(epochs=2, batch_size=16, seed=9), x, y).model for _ in range(2)]
    for k in runs[0].weights:
        assert runs[0].weights[k].values.tobytes() == runs[1].weights[k].values.tobytes()
    assert runs[0].theta.values.tobytes() == runs[1].theta.values.tobytes()
    other = train("dbsn", tiny_spec(), TrainConfig(epochs=2, batch_size=16, seed=10), x, y).model
    assert other.theta.values.tobytes() != runs[0].theta.values.tobytes()


def test_epoch_kl_nonnegative_on_average():
    x, y = toy_data(256)
    tr = Trainer("dbsn", tiny_spec(), TrainConfig(epochs=1, batch_size=8, lr_theta=0.05), x, y)
    kls = [tr.train_step()["kl"] for _ in range(tr.steps_per_epoch)]
    kls = np.array(kls)
    assert kls.mean() >= -3 * kls.std(ddof=1) / math.sqrt(len(kls))


def test_history_records():
    x, y = toy_data(64)
    tr = train("dbsn", tiny_spec(), TrainConfig(epochs=2, batch_size=32), x, y, x, y)
    assert [r["epoch"] for r in tr.state.history] == [1, 2]
    for r in tr.state.history:
        assert {"loss", "nll", "kl", "l2", "tau", "beta", "lr", "train_error", "test_error"} <= set(r)
        assert r["loss"] == pytest.approx(r["nll"] + r["kl"] + r["l2"], abs=1e-9)


def test_frozen_zero_beta_is_map_bitwise():
    x, y = toy_data(64)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=4)
    a = Trainer("dbsn", tiny_spec(), cfg, x, y, freeze_beta=0.0)
    b = Trainer("map", tiny_spec(), cfg, x, y)
    for _ in range(a.total_steps):
        ra, rb = a.train_step(), b.train_step()
        assert ra == rb
    assert a.model.theta.values.tobytes() == b.model.theta.values.tobytes()
    for k in a.model.weights:
        assert a.model.weights[k].values.tobytes() == b.model.weights[k].values.tobytes()


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_nonfinite_loss_aborts():
    x, y = toy_data(16)
    tr = Trainer("map", tiny_spec(), TrainConfig(epochs=1, batch_size=16), x, y)
    tr.model.weights["head.W"].values[...] = 1e300
    with pytest.raises(T.NonFiniteError):
        tr.train_step()


# -- baselines -------------------------------------------------------------------------


def test_fixed_alpha_is_uniform_mean():
    model = build_model("map_fixed_alpha", tiny_spec(), TrainConfig())
    alpha = model.sample_structure(SharpTemp(1.0, 1.0), (0,)).alpha
    np.testing.assert_allclose(alpha, 0.25, atol=1e-15)


def test_bbb_delta_limit():
    x, y = toy_data(16)
    spec = tiny_spec()
    cfg = TrainConfig(rho_init=-60.0, seed=2)
    bbb = build_model("bbb", spec, cfg)
    mp = build_model("map", spec, cfg)
    st = SharpTemp(0.0, 1.0)
    tb = elbo_terms(bbb, x, y, st, (0,), 2, 100, 4, 1e-4)
    tm = elbo_terms(mp, x, y, st, (0,), 2, 100, 4, 0.0)
    assert tb.nll.item() == pytest.approx(tm.nll.item(), rel=1e-12)
    # with sigma -> 0 the weight KL differs from a scaled ||w||^2 only by a constant
    for name in bbb.weights:
        bbb.weights[name].values[...] *= 0.5
    tb2 = elbo_terms(bbb, x, y, st, (0,), 2, 100, 4, 1e-4)
    sq = sum(float(np.sum(w.values**2)) for w in bbb.weights.values())
    assert (tb.kl.item() - tb2.kl.item()) * 4 == pytest.approx(0.5 * (4 * sq - sq), rel=1e-9)


def test_mc_dropout_is_stochastic_at_test_time():
    model = build_model("mc_dropout", tiny_spec(), TrainConfig())
    x = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    with T.no_grad():
        a = model.draw(x, (0,)).logits.values
        b = model.draw(x, (1,)).logits.values
    assert not np.array_equal(a, b)


@pytest.mark.slow
@pytest.mark.parametrize("method", ["map", "map_fixed_alpha", "mc_dropout", "bbb", "fbn", "dbsn"])
def test_baselines_learn_two_moons(method):
    ds = gen_dataset("two_moons", 1000, 0.2, 0)
    (xtr, ytr), (xte, yte) = ds.train, ds.test
    spec = NetworkSpec(2, 2, num_cells=2, cell=CellSpec(num_nodes=4, node_width=8))
    tr = train(method, spec, TrainConfig(epochs=30, lr_w=0.02, tau_decay="auto", seed=0), xtr, ytr)
    from dbsn.ensemble import bayes_ensemble_predict

    err = bayes_ensemble_predict(tr.model, xte, 30, 0).error(yte)
    limit = THRESHOLDS["baseline_error_30ep"][method]
    print(f"{method}: test error {err:.4f} (limit {limit})")
    assert err < limit <= 0.15
