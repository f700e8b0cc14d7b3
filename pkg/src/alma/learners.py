"""Learner kinds and their training loops.

  SM    single network, warm-started across training events
  Ens   N independently trained networks, probabilities averaged at test
  UMix  N networks trained jointly through the mean of their logits
  gEns  grows k fresh networks per training event, freezing the old ones
  gMoE  mixture-of-experts model that splits its losing experts over time

Every source of randomness is a substream keyed by (component seed, event
index, epoch), so runs are bit-reproducible, ensemble results do not depend
on component execution order, and a resumed run continues exactly. A gEns
component trains in exactly one event and keys its shuffles with event 0,
which makes its final replay component an exact replica of an SM trained on
the same data with the same seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError
from .gmoe import MoELayer, MoeModel, build_moe_model, grow_step, model_forward, model_logits, model_loss_grads
from .metrics import LayerCost, flops_model
from .numkit import (
    KEY_ROUTING,
    KEY_SHUFFLE,
    AdaDeltaState,
    Matrix,
    MlpConfig,
    ParamSet,
    SgdMomentumState,
    adadelta_step,
    init_mlp,
    mlp_forward,
    mlp_backward,
    mlp_forward_backward,
    mlp_logits,
    rng_stream,
    sgd_momentum_step,
    softmax,
    softmax_xent,
)
from .stream import Dataset, minibatches

KINDS = ("SM", "Ens", "UMix", "gEns", "gMoE")
DEFAULT_ENSEMBLE_SIZE = 5
DEFAULT_GENS_K = 1


@dataclass
class Component:
    params: ParamSet
    seed: int
    frozen: bool = False
    opt_state: object = None


@dataclass
class TrainReport:
    epochs_run: int
    final_train_loss: float
    flops_used: float
    wall_ms: float


@dataclass
class LearnerHandle:
    kind: str
    config: MlpConfig
    optimizer: str = "adadelta"
    opt_hyper: dict = field(default_factory=dict)
    minibatch_size: int = 128
    components: list[Component] = field(default_factory=list)
    moe: MoeModel | None = None
    moe_opt_states: list = field(default_factory=list)
    ensemble_size: int = DEFAULT_ENSEMBLE_SIZE
    gens_k: int = DEFAULT_GENS_K
    moe_layer_indices: tuple = (0, 1)
    gating: str = "soft"
    routing_seed: int = 0
    event_count: int = 0
    next_component_index: int = 0


def _fresh_state(optimizer: str, params: ParamSet):
    if optimizer == "adadelta":
        return AdaDeltaState.fresh(params)
    if optimizer == "sgd":
        return SgdMomentumState.fresh(params)
    raise InputError(f"unknown optimizer {optimizer!r}")


def _new_component(h: LearnerHandle, seed: int) -> Component:
    params = init_mlp(replace(h.config, seed=seed))
    return Component(params=params, seed=seed, opt_state=_fresh_state(h.optimizer, params))


def make_learner(
    kind: str,
    config: MlpConfig,
    optimizer: str = "adadelta",
    opt_hyper: dict | None = None,
    minibatch_size: int = 128,
    ensemble_size: int = DEFAULT_ENSEMBLE_SIZE,
    gens_k: int = DEFAULT_GENS_K,
    moe_layer_indices=(0, 1),
    gating: str = "soft",
    routing_seed: int = 0,
) -> LearnerHandle:
    if kind not in KINDS:
        raise InputError(f"unknown learner kind {kind!r}")
    h = LearnerHandle(
        kind=kind,
        config=config,
        optimizer=optimizer,
        opt_hyper=dict(opt_hyper or {}),
        minibatch_size=minibatch_size,
        ensemble_size=ensemble_size,
        gens_k=gens_k,
        moe_layer_indices=tuple(moe_layer_indices),
        gating=gating,
        routing_seed=routing_seed,
    )
    if kind == "SM":
        h.components = [_new_component(h, config.seed)]
    elif kind in ("Ens", "UMix"):
        h.components = [_new_component(h, config.seed + i) for i in range(ensemble_size)]
    elif kind == "gEns":
        h.components = []  # grown at the first training event
    else:  # gMoE
        h.moe = build_moe_model(
            config.input_dim, config.hidden_dims, config.num_classes,
            config.seed, moe_layer_indices, gating,
        )
        h.moe_opt_states = [_fresh_state(optimizer, l.params) for l in h.moe.layers]
    return h


def param_count(h: LearnerHandle) -> int:
    total = sum(c.params.param_count for c in h.components)
    if h.moe is not None:
        total += h.moe.param_count
    return total


# ---------------------------------------------------------------- cost model hooks

def mlp_cost_layers(config: MlpConfig) -> list[LayerCost]:
    dims = (config.input_dim, *config.hidden_dims, config.num_classes)
    return [LayerCost("affine", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def moe_cost_layers(model: MoeModel) -> list[LayerCost]:
    out = []
    for layer in model.layers:
        if isinstance(layer, MoELayer):
            out.append(LayerCost("moe", layer.d_in, layer.d_out,
                                 experts=layer.num_experts,
                                 gate_nodes=layer.num_experts - 1,
                                 gating=layer.mode))
        else:
            out.append(LayerCost("affine", layer.d_in, layer.d_out))
    return out


def inference_cost_layers(h: LearnerHandle) -> list[LayerCost]:
    """Cost of one prediction pass: every live component runs."""
    if h.kind == "gMoE":
        return moe_cost_layers(h.moe)
    per = mlp_cost_layers(h.config)
    return per * len(h.components)


# ---------------------------------------------------------------- optimizer step

def _opt_step(h: LearnerHandle, params: ParamSet, grads: ParamSet, state) -> None:
    if h.optimizer == "adadelta":
        adadelta_step(params, grads, state,
                      rho=h.opt_hyper.get("rho", 0.9), eps=h.opt_hyper.get("eps", 1e-6))
    else:
        sgd_momentum_step(params, grads, state,
                          lr=h.opt_hyper.get("lr", 0.01),
                          momentum=h.opt_hyper.get("momentum", 0.9))


def _check_data(h: LearnerHandle, data: Dataset) -> None:
    if data.dim != h.config.input_dim:
        raise InputError(f"data dim {data.dim} != model input dim {h.config.input_dim}")
    if data.num_classes != h.config.num_classes:
        raise InputError("data and model disagree on number of classes")


def _val_accuracy(predict_logits, val: Dataset) -> float:
    return float((predict_logits(val.inputs).argmax(axis=1) == val.labels).mean())


def _train_mlp_component(h, comp: Component, data: Dataset, epochs: int,
                         event_key: int, val: Dataset | None, patience: int | None):
    """Minibatch SGD over one network; returns (epochs_run, last loss, flops)."""
    layers = mlp_cost_layers(h.config)
    flops = 0.0
    last_loss = float("nan")
    epochs_run = 0
    best_acc, stall = -1.0, 0
    for e in range(epochs):
        rng = rng_stream(comp.seed, KEY_SHUFFLE, event_key, e)
        for idx in minibatches(data, h.minibatch_size, rng):
            last_loss, _, grads = mlp_forward_backward(
                comp.params, data.inputs[idx], data.labels[idx])
            _opt_step(h, comp.params, grads, comp.opt_state)
            flops += flops_model(layers, len(idx), "training")
        epochs_run += 1
        if patience is not None and val is not None and val.n:
            acc = _val_accuracy(lambda x: mlp_logits(comp.params, x), val)
            if acc > best_acc:
                best_acc, stall = acc, 0
            else:
                stall += 1
                if stall >= patience:
                    break
    return epochs_run, last_loss, flops


def sm_train(h: LearnerHandle, data: Dataset, epochs: int, from_scratch: bool = False,
             val: Dataset | None = None, patience: int | None = None) -> TrainReport:
    if h.kind != "SM":
        raise InputError("sm_train needs an SM handle")
    _check_data(h, data)
    start = time.perf_counter()
    comp = h.components[0]
    if from_scratch:
        comp.params = init_mlp(replace(h.config, seed=comp.seed))
        comp.opt_state = _fresh_state(h.optimizer, comp.params)
        h.event_count = 0
    epochs_run, loss, flops = _train_mlp_component(
        h, comp, data, epochs, h.event_count, val, patience)
    h.event_count += 1
    return TrainReport(epochs_run, loss, flops, (time.perf_counter() - start) * 1e3)


def ens_train(h: LearnerHandle, data: Dataset, epochs: int,
              val: Dataset | None = None, patience: int | None = None) -> TrainReport:
    if h.kind != "Ens":
        raise InputError("ens_train needs an Ens handle")
    _check_data(h, data)
    start = time.perf_counter()
    flops, loss, ran = 0.0, float("nan"), 0
    for comp in h.components:
        e_run, loss, f = _train_mlp_component(h, comp, data, epochs, h.event_count, val, patience)
        flops += f
        ran = max(ran, e_run)
    h.event_count += 1
    return TrainReport(ran, loss, flops, (time.perf_counter() - start) * 1e3)


def umix_forward_backward(h: LearnerHandle, x: Matrix, labels):
    """Joint loss through the mean of component logits; grads per component."""
    if h.kind != "UMix":
        raise InputError("umix_forward_backward needs a UMix handle")
    forwards = [mlp_forward(c.params, x) for c in h.components]
    mean_logits = _centered_mean([logits for logits, _ in forwards])
    loss, dmean = softmax_xent(mean_logits, labels)
    share = dmean / len(h.components)
    grads = [mlp_backward(c.params, cache, share)
             for c, (_, cache) in zip(h.components, forwards)]
    return loss, grads


def umix_train(h: LearnerHandle, data: Dataset, epochs: int,
               val: Dataset | None = None, patience: int | None = None) -> TrainReport:
    if h.kind != "UMix":
        raise InputError("umix_train needs a UMix handle")
    _check_data(h, data)
    start = time.perf_counter()
    layers = mlp_cost_layers(h.config) * len(h.components)
    flops, loss, epochs_run = 0.0, float("nan"), 0
    best_acc, stall = -1.0, 0
    lead_seed = h.components[0].seed  # joint step: one shuffle for all components
    for e in range(epochs):
        rng = rng_stream(lead_seed, KEY_SHUFFLE, h.event_count, e)
        for idx in minibatches(data, h.minibatch_size, rng):
            loss, grads = umix_forward_backward(h, data.inputs[idx], data.labels[idx])
            for comp, g in zip(h.components, grads):
                _opt_step(h, comp.params, g, comp.opt_state)
            flops += flops_model(layers, len(idx), "training")
        epochs_run += 1
        if patience is not None and val is not None and val.n:
            acc = _val_accuracy(lambda inp: _umix_logits(h, inp), val)
            if acc > best_acc:
                best_acc, stall = acc, 0
            else:
                stall += 1
                if stall >= patience:
                    break
    h.event_count += 1
    return TrainReport(epochs_run, loss, flops, (time.perf_counter() - start) * 1e3)


def gens_grow_and_train(h: LearnerHandle, data: Dataset, epochs: int, k: int | None = None,
                        val: Dataset | None = None, patience: int | None = None) -> TrainReport:
    """Freeze everything trained so far, then add and train k fresh networks."""
    if h.kind != "gEns":
        raise InputError("gens_grow_and_train needs a gEns handle")
    _check_data(h, data)
    k = h.gens_k if k is None else k
    if k < 1:
        raise InputError("k must be >= 1")
    start = time.perf_counter()
    for comp in h.components:
        comp.frozen = True
    fresh = []
    for _ in range(k):
        comp = _new_component(h, h.config.seed + h.next_component_index)
        h.next_component_index += 1
        h.components.append(comp)
        fresh.append(comp)
    flops, loss, ran = 0.0, float("nan"), 0
    for comp in fresh:
        # a gEns component trains exactly once; its shuffle stream starts at event 0
        e_run, loss, f = _train_mlp_component(h, comp, data, epochs, 0, val, patience)
        flops += f
        ran = max(ran, e_run)
    h.event_count += 1
    return TrainReport(ran, loss, flops, (time.perf_counter() - start) * 1e3)


def gmoe_train(h: LearnerHandle, data: Dataset, epochs: int,
               val: Dataset | None = None, patience: int | None = None) -> TrainReport:
    if h.kind != "gMoE":
        raise InputError("gmoe_train needs a gMoE handle")
    _check_data(h, data)
    start = time.perf_counter()
    layers = moe_cost_layers(h.moe)
    flops, loss, epochs_run = 0.0, float("nan"), 0
    best_acc, stall = -1.0, 0
    hard = h.gating == "hard"
    for e in range(epochs):
        rng = rng_stream(h.config.seed, KEY_SHUFFLE, h.event_count, e)
        for bi, idx in enumerate(minibatches(data, h.minibatch_size, rng)):
            route_rng = rng_stream(h.routing_seed, KEY_ROUTING, h.event_count, e, bi) if hard else None
            loss, _, grads = model_loss_grads(
                h.moe, data.inputs[idx], data.labels[idx], train=True, rng=route_rng)
            for layer, g, state in zip(h.moe.layers, grads, h.moe_opt_states):
                _opt_step(h, layer.params, g, state)
            flops += flops_model(layers, len(idx), "training")
        epochs_run += 1
        if patience is not None and val is not None and val.n:
            acc = _val_accuracy(lambda inp: model_logits(h.moe, inp), val)
            if acc > best_acc:
                best_acc, stall = acc, 0
            else:
                stall += 1
                if stall >= patience:
                    break
    h.event_count += 1
    return TrainReport(epochs_run, loss, flops, (time.perf_counter() - start) * 1e3)


def gmoe_grow(h: LearnerHandle, val: Dataset, event_index: int) -> None:
    """Split the losing expert at every mixture layer, then widen optimizer state."""
    if h.kind != "gMoE":
        raise InputError("gmoe_grow needs a gMoE handle")
    grow_step(h.moe, val.inputs, val.labels, seed=h.config.seed, event_index=event_index)
    for layer_index, parent, new_id, gate_name in h.moe.last_growth:
        layer = h.moe.layers[layer_index]
        state = h.moe_opt_states[layer_index]
        for slots in _state_slots(state):
            # twin expert inherits its parent's slots; the fresh gate starts at zero
            slots.add(f"e{new_id}.W", slots[f"e{parent}.W"].copy())
            slots.add(f"e{new_id}.b", slots[f"e{parent}.b"].copy())
            slots.add(f"{gate_name}.W", np.zeros_like(layer.params[f"{gate_name}.W"]))
            slots.add(f"{gate_name}.b", np.zeros_like(layer.params[f"{gate_name}.b"]))


def _state_slots(state) -> list[ParamSet]:
    if isinstance(state, AdaDeltaState):
        return [state.avg_sq_grad, state.avg_sq_delta]
    return [state.velocity]


# ---------------------------------------------------------------- prediction

def _centered_mean(rows: list[np.ndarray]) -> np.ndarray:
    """Mean computed around the first element: exact when all inputs coincide."""
    base = rows[0]
    if len(rows) == 1:
        return base
    acc = np.zeros_like(base)
    for r in rows[1:]:
        acc += r - base
    return base + acc / len(rows)


def _umix_logits(h: LearnerHandle, x: Matrix) -> Matrix:
    return _centered_mean([mlp_logits(c.params, x) for c in h.components])


def ens_predict(h: LearnerHandle, x: Matrix) -> Matrix:
    """Uniform average of per-component class probabilities; rows sum to 1."""
    if h.kind not in ("Ens", "gEns"):
        raise InputError("ens_predict needs an Ens or gEns handle")
    x = np.asarray(x, dtype=np.float64)
    if not h.components:  # gEns before its first growth step: no opinion yet
        return np.full((x.shape[0], h.config.num_classes), 1.0 / h.config.num_classes)
    return _centered_mean([softmax(mlp_logits(c.params, x)) for c in h.components])


def predict_probs(h: LearnerHandle, x: Matrix) -> Matrix:
    if h.kind == "SM":
        return softmax(mlp_logits(h.components[0].params, x))
    if h.kind in ("Ens", "gEns"):
        return ens_predict(h, x)
    if h.kind == "UMix":
        return softmax(_umix_logits(h, x))
    logits, _ = model_forward(h.moe, x, train=False)
    return softmax(logits)


def predict(h: LearnerHandle, x: Matrix) -> np.ndarray:
    """Predicted class indices; exact ties resolve to the lowest class."""
    return predict_probs(h, x).argmax(axis=1)


def train_event(h: LearnerHandle, data: Dataset, epochs: int, from_scratch: bool = False,
                val: Dataset | None = None, patience: int | None = None) -> TrainReport:
    """Run one training event with the kind-appropriate procedure."""
    if epochs < 0:
        raise InputError("epochs must be >= 0")
    if h.kind == "SM":
        return sm_train(h, data, epochs, from_scratch=from_scratch, val=val, patience=patience)
    if h.kind == "Ens":
        return ens_train(h, data, epochs, val=val, patience=patience)
    if h.kind == "UMix":
        return umix_train(h, data, epochs, val=val, patience=patience)
    if h.kind == "gEns":
        return gens_grow_and_train(h, data, epochs, val=val, patience=patience)
    return gmoe_train(h, data, epochs, val=val, patience=patience)
