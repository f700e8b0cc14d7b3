import numpy as np
import pytest

from alma.errors import InputError, NumericError, ShapeError
from alma.numkit import (
    AdaDeltaState,
    MlpConfig,
    ParamSet,
    SgdMomentumState,
    adadelta_step,
    finite_diff_check,
    init_mlp,
    matmul,
    mlp_forward,
    mlp_forward_backward,
    rng_stream,
    sgd_momentum_step,
    softmax,
    softmax_xent,
)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    m = np.arange(9, dtype=float).reshape(3, 3) + 1
    assert np.array_equal(matmul(np.eye(3), m), m)


def test_matmul_zero():
    m = rng_stream(0).normal(size=(3, 4))
    assert np.array_equal(matmul(np.zeros((2, 3)), m), np.zeros((2, 4)))


def test_matmul_hand_computed():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0, 6.0], [7.0, 8.0]]
    assert np.array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


# ---------------------------------------------------------------- softmax / xent

def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = rng_stream(7)
    logits = rng.normal(size=(40, 10)) * 5
    p = softmax(logits)
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12
    shifted = softmax(logits + rng.normal(size=(40, 1)))
    assert np.abs(p - shifted).max() < 1e-12


def test_xent_uniform_logits():
    loss, _ = softmax_xent(np.zeros((4, 10)), [0, 3, 5, 9])
    assert abs(loss - np.log(10.0)) < 1e-12
    loss2, _ = softmax_xent(np.zeros((1, 2)), [0])
    assert abs(loss2 - np.log(2.0)) < 1e-12


def test_xent_label_out_of_range():
    with pytest.raises(InputError):
        softmax_xent(np.zeros((2, 3)), [0, 3])


def test_extreme_logits_stay_finite():
    logits = np.array([[1e4, -1e4, 0.0], [-700.0, 700.0, 0.0]])
    p = softmax(logits)
    assert np.isfinite(p).all()
    loss, dlogits = softmax_xent(logits, [0, 1])
    assert np.isfinite(loss) and np.isfinite(dlogits).all()


def test_xent_gradient_matches_finite_differences():
    rng = rng_stream(21)
    logits = rng.normal(size=(5, 7))
    labels = rng.integers(0, 7, size=5)
    _, dlogits = softmax_xent(logits, labels)
    h = 1e-6
    worst = 0.0
    for i in range(5):
        for j in range(7):
            bumped = logits.copy()
            bumped[i, j] += h
            lp, _ = softmax_xent(bumped, labels)
            bumped[i, j] -= 2 * h
            lm, _ = softmax_xent(bumped, labels)
            num = (lp - lm) / (2 * h)
            ana = dlogits[i, j]
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana) + abs(num)))
    assert worst <= 1e-7


# ---------------------------------------------------------------- ParamSet

def test_paramset_order_count_and_copy():
    p = ParamSet()
    p.add("b", np.zeros(3))
    p.add("a", np.ones((2, 2)))
    assert p.names() == ["b", "a"]
    assert p.param_count == 7
    q = p.copy()
    q["b"] = np.ones(3)
    assert p["b"].sum() == 0.0
    with pytest.raises(InputError):
        p.add("a", np.zeros(1))
    with pytest.raises(InputError):
        p["missing"] = np.zeros(1)
    with pytest.raises(ShapeError):
        p["b"] = np.zeros(4)


# ---------------------------------------------------------------- MLP

def test_zero_weight_net_is_uniform():
    cfg = MlpConfig(input_dim=6, num_classes=5, hidden_dims=(4,), seed=0)
    params = init_mlp(cfg).zeros_like()
    x = rng_stream(3).normal(size=(9, 6))
    loss, logits, _ = mlp_forward_backward(params, x, [0] * 9)
    assert abs(loss - np.log(5.0)) < 1e-12
    assert np.array_equal(logits, np.zeros((9, 5)))


def test_single_linear_layer_reduces_to_xent_gradient():
    rng = rng_stream(11)
    params = ParamSet()
    params.add("l0.W", rng.normal(size=(4, 3)))
    params.add("l0.b", rng.normal(size=3))
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, size=6)
    loss, logits, grads = mlp_forward_backward(params, x, labels)
    ref_loss, dlogits = softmax_xent(x @ params["l0.W"] + params["l0.b"], labels)
    assert loss == ref_loss
    assert np.allclose(grads["l0.W"], x.T @ dlogits, atol=0, rtol=0)
    assert np.allclose(grads["l0.b"], dlogits.sum(axis=0), atol=0, rtol=0)


def test_mlp_gradients_match_finite_differences():
    cfg = MlpConfig(input_dim=3, num_classes=3, hidden_dims=(4, 2), seed=5)
    params = init_mlp(cfg)
    assert params.param_count == 3 * 4 + 4 + 4 * 2 + 2 + 2 * 3 + 3
    rng = rng_stream(6)
    x = rng.normal(size=(8, 3))
    labels = rng.integers(0, 3, size=8)

    def loss_fn(p):
        loss, _, grads = mlp_forward_backward(p, x, labels)
        return loss, grads

    assert finite_diff_check(loss_fn, params, h=1e-5) <= 1e-5


def test_mlp_shape_mismatch():
    cfg = MlpConfig(input_dim=3, num_classes=2, hidden_dims=(4,), seed=0)
    params = init_mlp(cfg)
    with pytest.raises(ShapeError):
        mlp_forward(params, np.ones((2, 5)))


def test_init_is_seeded_and_layerwise_independent():
    cfg = MlpConfig(input_dim=5, num_classes=4, hidden_dims=(6, 6), seed=42)
    a, b = init_mlp(cfg), init_mlp(cfg)
    assert a.equal(b)
    c = init_mlp(MlpConfig(input_dim=5, num_classes=4, hidden_dims=(6, 6), seed=43))
    assert not a.equal(c)
    # same width twice: layers still draw different values
    assert not np.array_equal(a["l1.W"], a["l2.W"][: a["l1.W"].shape[0]])


# ---------------------------------------------------------------- optimizers

def test_plain_sgd_step():
    params = ParamSet({"w": np.array([1.0])})
    grads = ParamSet({"w": np.array([2.0])})
    state = SgdMomentumState.fresh(params)
    sgd_momentum_step(params, grads, state, lr=0.1, momentum=0.0)
    assert params["w"][0] == pytest.approx(0.8, abs=0)


def test_sgd_zero_gradient_is_fixed_point():
    params = ParamSet({"w": np.array([1.5, -2.0])})
    state = SgdMomentumState.fresh(params)
    sgd_momentum_step(params, params.zeros_like(), state, lr=0.5, momentum=0.9)
    assert np.array_equal(params["w"], [1.5, -2.0])


def test_sgd_momentum_matches_recursion():
    # independent evaluation of v_t = mu v_{t-1} + g_t, theta_t = theta_{t-1} - lr v_t
    lr, mu = 0.1, 0.9
    g1, g2 = 2.0, -1.0
    v1 = mu * 0.0 + g1
    th1 = 1.0 - lr * v1
    v2 = mu * v1 + g2
    th2 = th1 - lr * v2

    params = ParamSet({"w": np.array([1.0])})
    state = SgdMomentumState.fresh(params)
    sgd_momentum_step(params, ParamSet({"w": np.array([g1])}), state, lr, mu)
    sgd_momentum_step(params, ParamSet({"w": np.array([g2])}), state, lr, mu)
    assert params["w"][0] == th2


def test_sgd_rejects_nonfinite_gradient():
    params = ParamSet({"w": np.array([1.0])})
    state = SgdMomentumState.fresh(params)
    with pytest.raises(NumericError):
        sgd_momentum_step(params, ParamSet({"w": np.array([np.nan])}), state, 0.1, 0.9)


def test_adadelta_zero_gradient_is_fixed_point():
    params = ParamSet({"w": np.array([3.0])})
    state = AdaDeltaState.fresh(params)
    adadelta_step(params, params.zeros_like(), state)
    assert params["w"][0] == 3.0


def test_adadelta_first_step_value():
    # E[g2] = 0.1, delta = -sqrt(1e-6 / (0.1 + 1e-6)) = -3.16226e-3
    expected = -np.sqrt(1e-6 / (0.1 + 1e-6))
    params = ParamSet({"w": np.array([0.0])})
    state = AdaDeltaState.fresh(params)
    adadelta_step(params, ParamSet({"w": np.array([1.0])}), state, rho=0.9, eps=1e-6)
    assert params["w"][0] == pytest.approx(expected, rel=1e-12)
    assert params["w"][0] == pytest.approx(-3.1623e-3, abs=1e-6)


def test_adadelta_first_step_opposes_gradient():
    rng = rng_stream(9)
    g = rng.normal(size=17)
    g[g == 0.0] = 1.0
    params = ParamSet({"w": np.zeros(17)})
    state = AdaDeltaState.fresh(params)
    adadelta_step(params, ParamSet({"w": g}), state)
    assert np.all(np.sign(params["w"]) == -np.sign(g))


def test_optimizers_are_deterministic():
    def run(step, state_cls):
        params = ParamSet({"w": rng_stream(1).normal(size=8)})
        grads = ParamSet({"w": rng_stream(2).normal(size=8)})
        state = state_cls.fresh(params)
        for _ in range(5):
            step(params, grads, state)
        return params["w"].copy()

    a = run(lambda p, g, s: adadelta_step(p, g, s), AdaDeltaState)
    b = run(lambda p, g, s: adadelta_step(p, g, s), AdaDeltaState)
    assert np.array_equal(a, b)
    c = run(lambda p, g, s: sgd_momentum_step(p, g, s, 0.01, 0.9), SgdMomentumState)
    d = run(lambda p, g, s: sgd_momentum_step(p, g, s, 0.01, 0.9), SgdMomentumState)
    assert np.array_equal(c, d)


# ---------------------------------------------------------------- gradient oracle

def test_finite_diff_quadratic_is_exact():
    params = ParamSet({"w": rng_stream(4).normal(size=6)})

    def loss_fn(p):
        w = p["w"]
        grads = ParamSet({"w": w.copy()})
        return 0.5 * float(w @ w), grads

    assert finite_diff_check(loss_fn, params) <= 1e-9


def test_finite_diff_constant_loss_is_zero():
    params = ParamSet({"w": np.ones(4)})

    def loss_fn(p):
        return 1.25, p.zeros_like()

    assert finite_diff_check(loss_fn, params) == 0.0
