import numpy as np
import pytest

from alma.errors import InputError, StateError
from alma.gmoe import (
    ExpertLossStats,
    MoELayer,
    accumulate_expert_loss,
    build_moe_model,
    gate_probs,
    grow_step,
    leaf_experts,
    model_logits,
    model_loss_grads,
    moe_backward,
    moe_forward,
    select_losing_expert,
    split_expert,
)
from alma.numkit import ParamSet, finite_diff_check, rng_stream, softmax, softmax_xent, xent_per_example


def make_layer(d_in=4, d_out=3, n_splits=0, mode="soft", seed=0):
    layer = MoELayer.single_expert(d_in, d_out, rng_stream(seed, 0), mode=mode)
    rng = rng_stream(seed, 1)
    # perturb so experts diverge after copying
    for s in range(n_splits):
        split_expert(layer, s % layer.num_experts, rng_stream(seed, 2, s))
        w = layer.params[f"e{layer.num_experts - 1}.W"]
        w += 0.3 * rng.normal(size=w.shape)
    return layer


def naive_leaf_probs(layer, z):
    """Independent path-product computation, one example and leaf at a time."""
    n = z.shape[0]
    out = np.zeros((n, layer.num_experts))

    def paths(node, factors):
        if node.is_leaf():
            return [(node.expert, factors)]
        w, b = layer.gate_weights(node.gate)
        q = softmax(z @ w + b)
        return paths(node.left, factors + [q[:, 0]]) + paths(node.right, factors + [q[:, 1]])

    for expert, factors in paths(layer.root, []):
        p = np.ones(n)
        for f in factors:
            p = p * f
        out[:, expert] = p
    return out


# ---------------------------------------------------------------- gate probs

def test_single_leaf_probability_is_one():
    layer = make_layer()
    p = gate_probs(layer, rng_stream(1).normal(size=(5, 4)))
    assert np.array_equal(p, np.ones((5, 1)))


def test_zero_weight_gate_splits_evenly():
    layer = make_layer(n_splits=1)
    layer.params["g0.W"] = np.zeros((4, 2))
    layer.params["g0.b"] = np.zeros(2)
    p = gate_probs(layer, rng_stream(2).normal(size=(6, 4)))
    assert np.abs(p - 0.5).max() == 0.0


def test_leaf_probs_match_naive_path_product():
    layer = make_layer(n_splits=2, seed=3)
    z = rng_stream(4).normal(size=(20, 4))
    p = gate_probs(layer, z)
    assert np.abs(p - naive_leaf_probs(layer, z)).max() < 1e-12
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12
    assert p.min() >= 0.0 and p.max() <= 1.0


# ---------------------------------------------------------------- forward

def test_single_expert_layer_passthrough():
    layer = make_layer()
    z = rng_stream(5).normal(size=(7, 4))
    out, _ = moe_forward(layer, z)
    w, b = layer.expert_weights(0)
    assert np.array_equal(out, np.maximum(z @ w + b, 0.0))


def test_identical_experts_collapse_to_single_output():
    layer = make_layer(n_splits=0, seed=6)
    # split without perturbing: all three experts identical
    split_expert(layer, 0, rng_stream(6, 2, 0))
    split_expert(layer, 1, rng_stream(6, 2, 1))
    z = rng_stream(7).normal(size=(9, 4))
    out, _ = moe_forward(layer, z)
    w, b = layer.expert_weights(0)
    single = np.maximum(z @ w + b, 0.0)
    assert np.abs(out - single).max() < 1e-12


def test_soft_forward_matches_naive_weighted_sum():
    layer = make_layer(n_splits=2, seed=8)
    z = rng_stream(9).normal(size=(11, 4))
    out, rec = moe_forward(layer, z)
    p = gate_probs(layer, z)
    naive = np.zeros_like(out)
    for i in range(11):
        for j in range(layer.num_experts):
            w, b = layer.expert_weights(j)
            naive[i] += p[i, j] * np.maximum(z[i] @ w + b, 0.0)
    assert np.abs(out - naive).max() < 1e-12


def test_hard_test_routing_is_deterministic_and_single_expert():
    layer = make_layer(n_splits=3, seed=10, mode="hard")
    z = rng_stream(11).normal(size=(40, 4))
    out1, rec1 = moe_forward(layer, z, train=False)
    out2, rec2 = moe_forward(layer, z, train=False)
    assert np.array_equal(out1, out2)
    assert np.array_equal(rec1.selected, rec2.selected)
    for i in range(40):
        j = int(rec1.selected[i])
        w, b = layer.expert_weights(j)
        # gemv vs batched gemm may differ in the last ulp
        assert np.allclose(out1[i], np.maximum(z[i] @ w + b, 0.0), rtol=0, atol=1e-12)


def test_hard_train_samples_from_leaf_distribution():
    layer = make_layer(n_splits=1, seed=12, mode="hard")
    layer.params["g0.W"] = np.zeros((4, 2))  # 50/50 gate
    z = rng_stream(13).normal(size=(4000, 4))
    _, rec = moe_forward(layer, z, train=True, rng=rng_stream(14))
    share = (rec.selected == 0).mean()
    assert 0.45 < share < 0.55
    with pytest.raises(InputError):
        moe_forward(layer, z, train=True, rng=None)


# ---------------------------------------------------------------- backward

def test_soft_backward_matches_finite_differences():
    layer = make_layer(d_in=3, d_out=3, n_splits=2, seed=15)
    z = rng_stream(16).normal(size=(6, 3))
    labels = rng_stream(17).integers(0, 3, size=6)

    def loss_fn(_params):
        out, rec = moe_forward(layer, z)
        loss, dlogits = softmax_xent(out, labels)
        grads, _ = moe_backward(layer, rec, dlogits)
        return loss, grads

    assert finite_diff_check(loss_fn, layer.params, h=1e-5) <= 1e-5


def test_soft_backward_input_gradient_matches_finite_differences():
    layer = make_layer(d_in=3, d_out=3, n_splits=1, seed=18)
    z = rng_stream(19).normal(size=(4, 3))
    labels = np.array([0, 2, 1, 0])
    out, rec = moe_forward(layer, z)
    loss, dlogits = softmax_xent(out, labels)
    _, dz = moe_backward(layer, rec, dlogits)
    h = 1e-6
    for i in range(4):
        for j in range(3):
            zp = z.copy()
            zp[i, j] += h
            op, _ = moe_forward(layer, zp)
            lp, _ = softmax_xent(op, labels)
            zp[i, j] -= 2 * h
            om, _ = moe_forward(layer, zp)
            lm, _ = softmax_xent(om, labels)
            num = (lp - lm) / (2 * h)
            assert abs(dz[i, j] - num) / max(1.0, abs(num) + abs(dz[i, j])) <= 1e-5


def test_single_expert_backward_is_plain_block():
    layer = make_layer(d_in=3, d_out=2, seed=20)
    z = rng_stream(21).normal(size=(5, 3))
    out, rec = moe_forward(layer, z)
    upstream = rng_stream(22).normal(size=(5, 2))
    grads, dz = moe_backward(layer, rec, upstream)
    assert grads.names() == ["e0.W", "e0.b"]  # no gate entries
    w, b = layer.expert_weights(0)
    da = upstream * ((z @ w + b) > 0)
    assert np.allclose(grads["e0.W"], z.T @ da, rtol=0, atol=0)
    assert np.allclose(dz, da @ w.T, rtol=0, atol=0)


def test_hard_backward_unselected_experts_get_zero():
    layer = make_layer(d_in=4, d_out=3, n_splits=3, seed=23, mode="hard")
    z = rng_stream(24).normal(size=(30, 4))
    out, rec = moe_forward(layer, z, train=True, rng=rng_stream(25))
    loss, dlogits = softmax_xent(out, rng_stream(26).integers(0, 3, size=30))
    grads, _ = moe_backward(layer, rec, dlogits)
    routed = set(int(j) for j in np.unique(rec.selected))
    for j in range(layer.num_experts):
        norm = np.abs(grads[f"e{j}.W"]).max()
        if j in routed:
            assert norm > 0.0
        else:
            assert norm == 0.0
    # gates still receive gradient (straight-through)
    assert any(np.abs(grads[f"g{g}.W"]).max() > 0 for g in range(layer.next_gate_id))


def test_stale_record_rejected():
    layer = make_layer(n_splits=1, seed=27)
    z = rng_stream(28).normal(size=(3, 4))
    _, rec = moe_forward(layer, z)
    split_expert(layer, 0, rng_stream(29))
    with pytest.raises(StateError):
        moe_backward(layer, rec, np.ones((3, 3)))


# ---------------------------------------------------------------- loss stats

def test_accumulate_all_to_one_expert():
    layer = make_layer(n_splits=1, seed=30, mode="hard")
    z = rng_stream(31).normal(size=(8, 4))
    _, rec = moe_forward(layer, z, train=False)
    rec.selected[:] = 0
    stats = ExpertLossStats.zeros(layer.num_experts)
    losses = np.full(8, 0.5)
    accumulate_expert_loss(stats, rec, losses)
    assert stats.loss_sum[0] == 4.0 and stats.routed_count[0] == 8
    assert stats.loss_sum[1] == 0.0 and stats.routed_count[1] == 0


def test_accumulate_empty_validation_is_noop():
    layer = make_layer(n_splits=1, seed=32)
    z = np.zeros((0, 4))
    _, rec = moe_forward(layer, z)
    stats = ExpertLossStats.zeros(2)
    accumulate_expert_loss(stats, rec, np.zeros(0))
    assert stats.loss_sum.sum() == 0.0 and stats.routed_count.sum() == 0


def test_accumulate_matches_group_by_oracle():
    layer = make_layer(n_splits=4, seed=33, mode="hard")
    z = rng_stream(34).normal(size=(200, 4))
    _, rec = moe_forward(layer, z, train=True, rng=rng_stream(35))
    losses = rng_stream(36).random(200)
    stats = ExpertLossStats.zeros(layer.num_experts)
    accumulate_expert_loss(stats, rec, losses)
    for j in range(layer.num_experts):
        mask = rec.selected == j
        assert stats.routed_count[j] == mask.sum()
        assert abs(stats.loss_sum[j] - losses[mask].sum()) < 1e-12


def test_accumulate_rejects_misaligned():
    layer = make_layer(seed=37)
    _, rec = moe_forward(layer, np.zeros((3, 4)))
    with pytest.raises(InputError):
        accumulate_expert_loss(ExpertLossStats.zeros(1), rec, np.zeros(5))


def test_select_losing_expert():
    stats = ExpertLossStats(np.array([0.3, 0.9, 0.1]), np.array([1, 1, 1]))
    assert select_losing_expert(stats) == 1
    tie = ExpertLossStats(np.array([0.5, 0.5]), np.array([2, 2]))
    assert select_losing_expert(tie) == 0
    unrouted_max = ExpertLossStats(np.array([0.2, 9.9]), np.array([3, 0]))
    assert select_losing_expert(unrouted_max) == 0
    with pytest.raises(StateError):
        select_losing_expert(ExpertLossStats.zeros(3))


def test_select_matches_brute_force():
    rng = rng_stream(38)
    for _ in range(25):
        losses = rng.random(6)
        counts = rng.integers(0, 3, size=6)
        if not (counts > 0).any():
            continue
        stats = ExpertLossStats(losses, counts)
        best, best_loss = None, -1.0
        for j in range(6):
            if counts[j] > 0 and losses[j] > best_loss:
                best, best_loss = j, losses[j]
        assert select_losing_expert(stats) == best


# ---------------------------------------------------------------- split

def test_split_grows_tree_and_param_count():
    layer = make_layer(d_in=4, d_out=3, seed=39)
    before = layer.params.param_count
    split_expert(layer, 0, rng_stream(40))
    assert layer.num_experts == 2
    assert leaf_experts(layer.root) == [0, 1]
    # one expert block plus one 2-way gate
    assert layer.params.param_count == before + (4 * 3 + 3) + (4 * 2 + 2)
    assert np.array_equal(layer.params["e0.W"], layer.params["e1.W"])
    with pytest.raises(InputError):
        split_expert(layer, 9, rng_stream(41))


def test_split_preserves_soft_output():
    layer = make_layer(d_in=5, d_out=4, n_splits=2, seed=42)
    z = rng_stream(43).normal(size=(50, 5))
    before, _ = moe_forward(layer, z)
    split_expert(layer, 1, rng_stream(44))
    after, _ = moe_forward(layer, z)
    assert np.abs(after - before).max() <= 1e-6


def test_split_preserves_hard_test_output():
    layer = make_layer(d_in=5, d_out=4, n_splits=2, seed=45, mode="hard")
    z = rng_stream(46).normal(size=(50, 5))
    before, rec = moe_forward(layer, z, train=False)
    losing = int(rec.selected[0])
    split_expert(layer, losing, rng_stream(47))
    after, _ = moe_forward(layer, z, train=False)
    assert np.abs(after - before).max() <= 1e-6


def test_five_sequential_splits_keep_probabilities_normalized():
    layer = make_layer(d_in=3, d_out=2, seed=48)
    for s in range(5):
        split_expert(layer, s % layer.num_experts, rng_stream(49, s))
    assert layer.num_experts == 6
    p = gate_probs(layer, rng_stream(50).normal(size=(100, 3)))
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12


# ---------------------------------------------------------------- whole model

def test_model_with_two_moe_layers_grows_one_expert_each():
    model = build_moe_model(6, (5, 4), 3, seed=51, moe_layer_indices=(0, 1))
    counts = [layer.num_experts for _, layer in model.moe_layers()]
    assert counts == [1, 1]
    before = model.param_count
    val_x = rng_stream(52).normal(size=(30, 6))
    val_y = rng_stream(53).integers(0, 3, size=30)
    grow_step(model, val_x, val_y, seed=54)
    assert [layer.num_experts for _, layer in model.moe_layers()] == [2, 2]
    added = (6 * 5 + 5) + (6 * 2 + 2) + (5 * 4 + 4) + (5 * 2 + 2)
    assert model.param_count == before + added


def test_grow_step_preserves_validation_loss():
    model = build_moe_model(6, (5, 4), 3, seed=55, moe_layer_indices=(0, 1))
    val_x = rng_stream(56).normal(size=(40, 6))
    val_y = rng_stream(57).integers(0, 3, size=40)
    loss_before = xent_per_example(model_logits(model, val_x), val_y).mean()
    grow_step(model, val_x, val_y, seed=58)
    loss_after = xent_per_example(model_logits(model, val_x), val_y).mean()
    assert abs(loss_after - loss_before) <= 1e-9


def test_grow_step_rejects_empty_validation():
    model = build_moe_model(4, (3, 3), 2, seed=59)
    with pytest.raises(InputError):
        grow_step(model, np.zeros((0, 4)), [], seed=60)


def test_model_gradients_match_finite_differences():
    model = build_moe_model(3, (4, 3), 3, seed=61, moe_layer_indices=(0, 1))
    grow_step(model, rng_stream(62).normal(size=(20, 3)),
              rng_stream(63).integers(0, 3, size=20), seed=64)
    x = rng_stream(65).normal(size=(6, 3))
    labels = rng_stream(66).integers(0, 3, size=6)

    merged = ParamSet()
    for i, layer in enumerate(model.layers):
        for name, value in layer.params.items():
            merged.add(f"L{i}.{name}", value)  # shared references

    def loss_fn(_):
        loss, _, grads = model_loss_grads(model, x, labels, train=False)
        flat = ParamSet()
        for i, g in enumerate(grads):
            for name, value in g.items():
                flat.add(f"L{i}.{name}", value)
        return loss, flat

    assert finite_diff_check(loss_fn, merged, h=1e-5) <= 1e-5


def test_untouched_experts_do_not_move_during_growth():
    model = build_moe_model(5, (4, 4), 3, seed=67)
    grow_step(model, rng_stream(68).normal(size=(25, 5)),
              rng_stream(69).integers(0, 3, size=25), seed=70)
    layer = model.layers[0]
    w_before = {n: v.copy() for n, v in layer.params.items() if n.startswith("e")}
    grow_step(model, rng_stream(71).normal(size=(25, 5)),
              rng_stream(72).integers(0, 3, size=25), seed=73, event_index=1)
    for name, value in w_before.items():
        assert np.array_equal(layer.params[name], value)
