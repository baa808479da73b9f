import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rehearse import model_head as mh
from rehearse.errors import InvalidArgument, NumericError


def numeric_grads(model, X, y, h=1e-5):
    """Central finite differences of the mean loss, one parameter entry at a time."""
    out = {}
    for name, theta in model.params.items():
        g = np.zeros_like(theta)
        it = np.nditer(theta, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = theta[i]
            theta[i] = old + h
            up = mh.per_sample_loss(model, X, y).mean()
            theta[i] = old - h
            down = mh.per_sample_loss(model, X, y).mean()
            theta[i] = old
            g[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7)


@pytest.mark.parametrize("arch", ["linear", "mlp1"])
@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(arch, seed):
    rng = np.random.default_rng(seed)
    model = mh.init_head(arch, 3, 4, hidden_dim=5, seed=seed, scale=0.5)
    for v in model.params.values():
        v += 0.3 * rng.standard_normal(v.shape)
    X = rng.standard_normal((6, 3))
    y = rng.integers(0, 4, 6)
    _, grads, _ = mh.loss_and_grads(model, X, y)
    num = numeric_grads(model, X, y)
    for name in grads:
        assert rel_err(grads[name], num[name]).max() < 1e-4, name


def test_zero_linear_model():
    model = mh.init_head("linear", 3, 5, scale=0.0)
    X = np.random.default_rng(0).standard_normal((4, 3))
    logits, z = mh.forward(model, X)
    assert np.all(logits == 0)
    np.testing.assert_array_equal(z, X)
    loss, _, per = mh.loss_and_grads(model, X, [0, 1, 2, 4])
    assert loss == pytest.approx(math.log(5), abs=1e-15)
    np.testing.assert_allclose(per, math.log(5))


def test_identity_linear():
    model = mh.init_head("linear", 3, 3, scale=0.0)
    model.params["W"] = np.eye(3)
    logits, _ = mh.forward(model, np.array([[0.0, 1.0, 0.0]]))
    np.testing.assert_array_equal(logits, [[0.0, 1.0, 0.0]])


def test_mlp_dead_hidden_layer():
    # 2x2 by hand: W1 x is at most 0.01 * 0.02 * 2 in magnitude, bias -1 keeps it negative
    model = mh.init_head("mlp1", 2, 2, hidden_dim=2, seed=0)
    model.params["W1"] = np.array([[0.01, -0.01], [0.005, 0.01]])
    model.params["b1"] = np.array([-1.0, -0.5])
    _, z = mh.forward(model, np.array([[0.02, -0.01], [0.0, 0.0]]))
    assert np.all(z == 0.0)


def test_duplicate_rows_leave_loss_and_grads_unchanged():
    rng = np.random.default_rng(1)
    model = mh.init_head("mlp1", 3, 4, hidden_dim=5, seed=1)
    X = rng.standard_normal((5, 3))
    y = rng.integers(0, 4, 5)
    l1, g1, _ = mh.loss_and_grads(model, X, y)
    l2, g2, _ = mh.loss_and_grads(model, np.vstack([X, X]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_errors():
    model = mh.init_head("linear", 3, 2)
    with pytest.raises(InvalidArgument):
        mh.forward(model, np.zeros((2, 4)))
    with pytest.raises(InvalidArgument):
        mh.loss_and_grads(model, np.zeros((0, 3)), [])


@settings(max_examples=50, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_softmax_shift_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    model = mh.init_head("linear", 4, 3, seed=seed, scale=1.0)
    X = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    before = mh.per_sample_loss(model, X, y)
    _, p0 = mh.evaluate(model, X, y)
    model.params["b"] = model.params["b"] + shift
    np.testing.assert_allclose(mh.per_sample_loss(model, X, y), before, rtol=1e-9, atol=1e-9)
    _, p1 = mh.evaluate(model, X, y)
    np.testing.assert_array_equal(p0, p1)


def _scalar_model(theta):
    m = mh.init_head("linear", 1, 1, scale=0.0)
    m.params = {"W": np.array([[theta]])}
    return m


def test_sgd_plain_step():
    m = _scalar_model(1.0)
    opt = mh.OptimizerState.for_model(m, momentum=0.0, weight_decay=0.0)
    mh.sgd_step(m, opt, {"W": np.array([[2.0]])}, lr=0.1)
    assert m.params["W"][0, 0] == pytest.approx(0.8)


def test_sgd_momentum_two_steps():
    m = _scalar_model(0.0)
    opt = mh.OptimizerState.for_model(m, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        mh.sgd_step(m, opt, {"W": np.array([[1.0]])}, lr=1.0)
    assert m.params["W"][0, 0] == pytest.approx(-2.9)


def test_sgd_zero_lr_and_nonfinite():
    m = mh.init_head("mlp1", 3, 2, hidden_dim=4, seed=0)
    snap = m.copy()
    opt = mh.OptimizerState.for_model(m)
    grads = {k: np.ones_like(v) for k, v in m.params.items()}
    mh.sgd_step(m, opt, grads, lr=0.0)
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], snap.params[k])
    grads["W1"][0, 0] = np.inf
    with pytest.raises(NumericError):
        mh.sgd_step(m, opt, grads, lr=0.1)


def test_one_cycle_endpoints():
    assert mh.one_cycle_lr(0, 1000, 1.0, div_init=25) == pytest.approx(0.04)
    assert mh.one_cycle_lr(300, 1000, 1.0, pct_warmup=0.3) == pytest.approx(1.0)
    assert mh.one_cycle_lr(999, 1000, 1.0, div_final=1e4) == pytest.approx(1e-4)
    with pytest.raises(InvalidArgument):
        mh.one_cycle_lr(0, 0, 1.0)


def test_one_cycle_monotone_segments():
    lrs = np.array([mh.one_cycle_lr(s, 1000, 0.5) for s in range(1000)])
    peak = 300
    assert np.all(np.diff(lrs[: peak + 1]) >= 0)
    assert np.all(np.diff(lrs[peak:]) <= 0)
    assert lrs.max() == pytest.approx(0.5)


def test_evaluate_tie_rule_and_recount():
    model = mh.init_head("linear", 2, 2, scale=0.0)
    acc, preds = mh.evaluate(model, np.random.default_rng(0).standard_normal((7, 2)), np.zeros(7))
    assert acc == 1.0 and np.all(preds == 0)

    rng = np.random.default_rng(5)
    model = mh.init_head("mlp1", 6, 5, hidden_dim=8, seed=5)
    X = rng.standard_normal((100, 6))
    y = rng.integers(0, 5, 100)
    acc, preds = mh.evaluate(model, X, y)
    recount = 0
    for i in range(100):
        logits, _ = mh.forward(model, X[i])
        row = list(logits[0])
        recount += row.index(max(row)) == y[i]
    assert acc == recount / 100


def test_training_reaches_separable_fit():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal([2, 2], 0.3, (50, 2)), rng.normal([-2, -2], 0.3, (50, 2))])
    y = np.repeat([0, 1], 50)
    model = mh.init_head("linear", 2, 2, seed=0)
    opt = mh.OptimizerState.for_model(model, momentum=0.9, weight_decay=0.0)
    for step in range(200):
        _, g, _ = mh.loss_and_grads(model, X, y)
        mh.sgd_step(model, opt, g, mh.one_cycle_lr(step, 200, 0.1))
    assert mh.evaluate(model, X, y)[0] == 1.0


def test_checkpoint_roundtrip(tmp_path):
    m = mh.init_head("mlp1", 3, 4, hidden_dim=5, seed=2)
    mh.save_head(m, tmp_path / "h.bin")
    back = mh.load_head(tmp_path / "h.bin")
    assert back.arch is mh.Arch.MLP1 and back.hidden_dim == 5
    for k in m.params:
        np.testing.assert_allclose(back.params[k], m.params[k].astype(np.float32))
