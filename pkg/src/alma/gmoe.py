"""Tree-gated growing mixture of experts.

Each mixture layer holds k experts (affine + ReLU blocks of one shared
shape) at the leaves of a binary gate tree. Internal nodes are 2-way
softmax gates reading the layer input, so a leaf's weight is the product of
gate probabilities along its root-to-leaf path.

Routing modes:
  soft       probability-weighted sum over every expert
  hard       training samples one expert per example from the leaf
             distribution; evaluation descends the tree greedily, taking
             the argmax branch at every gate

Growth replaces the losing leaf (largest accumulated validation loss) with
an internal node whose two children start as exact copies of the parent
expert, with a freshly initialized gate between them. Both children compute
the parent's function, so the layer output is preserved across the split in
every mode: greedy descent either never reaches the new gate or lands on
one of the two identical children.

Gradients: soft mode is exact. Hard mode is a straight-through estimator:
expert parameters receive gradient only through the selected expert, while
gate parameters receive the gradient they would have seen under soft
routing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StateError
from .numkit import (
    KEY_GROW,
    KEY_INIT,
    Matrix,
    ParamSet,
    affine_init,
    as_matrix,
    rng_stream,
    softmax,
    softmax_xent,
    xent_per_example,
)


@dataclass
class GateNode:
    """Leaf (expert >= 0) or internal 2-way gate referencing a parameter block."""

    expert: int | None = None
    gate: str | None = None
    left: "GateNode | None" = None
    right: "GateNode | None" = None

    def is_leaf(self) -> bool:
        return self.expert is not None


def leaf_experts(node: GateNode) -> list[int]:
    if node.is_leaf():
        return [node.expert]
    return leaf_experts(node.left) + leaf_experts(node.right)


class MoELayer:
    """One mixture layer: expert parameter blocks plus the gate tree over them."""

    def __init__(self, d_in: int, d_out: int, params: ParamSet, root: GateNode,
                 mode: str = "soft", next_expert_id: int = 1, next_gate_id: int = 0):
        if mode not in ("soft", "hard"):
            raise InputError(f"unknown gating mode {mode!r}")
        self.d_in = d_in
        self.d_out = d_out
        self.params = params
        self.root = root
        self.mode = mode
        self.next_expert_id = next_expert_id
        self.next_gate_id = next_gate_id
        self.version = 0

    @classmethod
    def single_expert(cls, d_in: int, d_out: int, rng, mode: str = "soft") -> "MoELayer":
        params = ParamSet()
        params.add("e0.W", affine_init(rng, d_in, d_out))
        params.add("e0.b", np.zeros(d_out))
        return cls(d_in, d_out, params, GateNode(expert=0), mode=mode)

    @property
    def num_experts(self) -> int:
        return self.next_expert_id

    def expert_weights(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[f"e{j}.W"], self.params[f"e{j}.b"]

    def gate_weights(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.params[f"{name}.W"], self.params[f"{name}.b"]


@dataclass
class RoutingRecord:
    """Forward caches moe_backward needs; invalid once the layer grows."""

    layer_version: int
    mode: str  # 'soft', 'hard-train' or 'hard-test'
    z: Matrix
    leaf_probs: Matrix
    gate_cache: dict = field(default_factory=dict)   # gate name -> (q n x 2, reach n)
    expert_preacts: dict = field(default_factory=dict)  # soft: expert -> preact
    hard_preacts: dict = field(default_factory=dict)    # hard: expert -> (row mask, preact)
    selected: np.ndarray | None = None


def gate_probs(layer: MoELayer, z: Matrix) -> Matrix:
    """Per-example leaf probabilities, column j for expert j. Rows sum to 1."""
    probs, _ = _gate_probs_cached(layer, as_matrix(z))
    return probs


def _gate_probs_cached(layer: MoELayer, z: Matrix):
    n = z.shape[0]
    probs = np.zeros((n, layer.num_experts))
    cache: dict = {}

    def walk(node: GateNode, reach: np.ndarray):
        if node.is_leaf():
            probs[:, node.expert] = reach
            return
        w, b = layer.gate_weights(node.gate)
        q = softmax(z @ w + b)
        cache[node.gate] = (q, reach)
        walk(node.left, reach * q[:, 0])
        walk(node.right, reach * q[:, 1])

    walk(layer.root, np.ones(n))
    return probs, cache


def _greedy_descent(layer: MoELayer, cache: dict, n: int) -> np.ndarray:
    """Hard-test selection: argmax branch at every gate (ties go left)."""
    selected = np.empty(n, dtype=np.int64)

    def walk(node: GateNode, mask: np.ndarray):
        if node.is_leaf():
            selected[mask] = node.expert
            return
        q, _ = cache[node.gate]
        go_right = q[:, 1] > q[:, 0]
        walk(node.left, mask & ~go_right)
        walk(node.right, mask & go_right)

    walk(layer.root, np.ones(n, dtype=bool))
    return selected


def _sample_leaves(probs: Matrix, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cum = np.cumsum(probs, axis=1)
    sel = (cum < u[:, None]).sum(axis=1)
    return np.minimum(sel, probs.shape[1] - 1).astype(np.int64)


def moe_forward(layer: MoELayer, z: Matrix, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Matrix, RoutingRecord]:
    """Run the mixture layer. Hard-mode training needs a routing rng stream."""
    z = as_matrix(z)
    probs, cache = _gate_probs_cached(layer, z)
    n = z.shape[0]

    if layer.mode == "soft":
        record = RoutingRecord(layer.version, "soft", z, probs, cache)
        out = np.zeros((n, layer.d_out))
        for j in range(layer.num_experts):
            w, b = layer.expert_weights(j)
            preact = z @ w + b
            record.expert_preacts[j] = preact
            out += probs[:, j : j + 1] * np.maximum(preact, 0.0)
        return out, record

    if train:
        if rng is None:
            raise InputError("hard-mode training requires a routing rng stream")
        selected = _sample_leaves(probs, rng)
        mode = "hard-train"
    else:
        selected = _greedy_descent(layer, cache, n)
        mode = "hard-test"
    record = RoutingRecord(layer.version, mode, z, probs, cache, selected=selected)
    out = np.zeros((n, layer.d_out))
    for j in np.unique(selected):
        mask = selected == j
        w, b = layer.expert_weights(int(j))
        preact = z[mask] @ w + b
        record.hard_preacts[int(j)] = (mask, preact)
        out[mask] = np.maximum(preact, 0.0)
    return out, record


def moe_backward(layer: MoELayer, record: RoutingRecord,
                 upstream: Matrix) -> tuple[ParamSet, Matrix]:
    """Gradients for the layer's experts and gates plus the input gradient.

    Soft mode differentiates the convex combination exactly. Hard mode routes
    expert gradients through the selected expert only and gives gates the
    soft-routing gradient (straight-through), which means re-running every
    expert forward over the batch.
    """
    if record.layer_version != layer.version:
        raise StateError("routing record predates a growth step")
    upstream = as_matrix(upstream)
    z = record.z
    n, k = record.leaf_probs.shape
    grads = layer.params.zeros_like()
    dz = np.zeros_like(z)
    scores = np.zeros((n, k))  # dL/d leaf prob

    if record.mode == "soft":
        for j in range(k):
            w, _ = layer.expert_weights(j)
            preact = record.expert_preacts[j]
            h = np.maximum(preact, 0.0)
            scores[:, j] = (upstream * h).sum(axis=1)
            da = record.leaf_probs[:, j : j + 1] * upstream * (preact > 0.0)
            grads[f"e{j}.W"] += z.T @ da
            grads[f"e{j}.b"] += da.sum(axis=0)
            dz += da @ w.T
    else:
        for j, (mask, preact) in record.hard_preacts.items():
            w, _ = layer.expert_weights(j)
            da = upstream[mask] * (preact > 0.0)
            grads[f"e{j}.W"] += z[mask].T @ da
            grads[f"e{j}.b"] += da.sum(axis=0)
            dz[mask] += da @ w.T
        for j in range(k):
            w, b = layer.expert_weights(j)
            h = np.maximum(z @ w + b, 0.0)
            scores[:, j] = (upstream * h).sum(axis=1)

    def walk(node: GateNode) -> np.ndarray:
        if node.is_leaf():
            return scores[:, node.expert]
        q, reach = record.gate_cache[node.gate]
        t_left = walk(node.left)
        t_right = walk(node.right)
        dq = np.stack([reach * t_left, reach * t_right], axis=1)
        du = q * (dq - (dq * q).sum(axis=1, keepdims=True))
        w, _ = layer.gate_weights(node.gate)
        grads[f"{node.gate}.W"] += z.T @ du
        grads[f"{node.gate}.b"] += du.sum(axis=0)
        nonlocal dz
        dz += du @ w.T
        return q[:, 0] * t_left + q[:, 1] * t_right

    walk(layer.root)
    return grads, dz


# ---------------------------------------------------------------- growth

@dataclass
class ExpertLossStats:
    loss_sum: np.ndarray
    routed_count: np.ndarray

    @classmethod
    def zeros(cls, num_experts: int) -> "ExpertLossStats":
        return cls(np.zeros(num_experts), np.zeros(num_experts, dtype=np.int64))


def accumulate_expert_loss(stats: ExpertLossStats, record: RoutingRecord,
                           losses) -> ExpertLossStats:
    """Add each example's loss to its expert (selection, or argmax leaf in soft mode)."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.shape[0] != record.leaf_probs.shape[0]:
        raise InputError("losses misaligned with routing record")
    if losses.size == 0:
        return stats
    assign = record.selected if record.selected is not None \
        else record.leaf_probs.argmax(axis=1)
    np.add.at(stats.loss_sum, assign, losses)
    np.add.at(stats.routed_count, assign, 1)
    return stats


def select_losing_expert(stats: ExpertLossStats) -> int:
    """Expert with the largest cumulative loss among those that saw examples."""
    eligible = stats.routed_count > 0
    if not eligible.any():
        raise StateError("no expert has routed examples")
    masked = np.where(eligible, stats.loss_sum, -np.inf)
    return int(np.argmax(masked))


def split_expert(layer: MoELayer, expert_id: int, rng: np.random.Generator) -> MoELayer:
    """Replace the expert's leaf by a gate over two exact copies of it.

    The new gate is drawn from the standard affine init; the twin expert
    duplicates the parent's parameters, so layer output is preserved.
    """
    def find(node: GateNode) -> GateNode | None:
        if node.is_leaf():
            return node if node.expert == expert_id else None
        return find(node.left) or find(node.right)

    leaf = find(layer.root)
    if leaf is None:
        raise InputError(f"no expert {expert_id} in this layer")

    new_id = layer.next_expert_id
    w, b = layer.expert_weights(expert_id)
    layer.params.add(f"e{new_id}.W", w.copy())
    layer.params.add(f"e{new_id}.b", b.copy())

    gate_name = f"g{layer.next_gate_id}"
    layer.params.add(f"{gate_name}.W", affine_init(rng, layer.d_in, 2))
    layer.params.add(f"{gate_name}.b", np.zeros(2))

    leaf.expert = None
    leaf.gate = gate_name
    leaf.left = GateNode(expert=expert_id)
    leaf.right = GateNode(expert=new_id)
    layer.next_expert_id += 1
    layer.next_gate_id += 1
    layer.version += 1
    return layer


# ---------------------------------------------------------------- whole model

class DenseLayer:
    """Plain affine layer, ReLU on hidden layers, identity on the output layer."""

    def __init__(self, d_in: int, d_out: int, rng, relu: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.relu = relu
        self.params = ParamSet()
        self.params.add("W", affine_init(rng, d_in, d_out))
        self.params.add("b", np.zeros(d_out))

    @classmethod
    def from_params(cls, d_in: int, d_out: int, relu: bool, params: ParamSet) -> "DenseLayer":
        layer = cls.__new__(cls)
        layer.d_in, layer.d_out, layer.relu, layer.params = d_in, d_out, relu, params
        return layer


class MoeModel:
    """Feed-forward classifier whose hidden layers may be growing mixtures."""

    def __init__(self, layers: list, num_classes: int, gating: str):
        self.layers = layers
        self.num_classes = num_classes
        self.gating = gating
        # (layer_index, parent_expert, new_expert, gate_name) of the latest grow_step
        self.last_growth: list[tuple[int, int, int, str]] = []

    @property
    def param_count(self) -> int:
        return sum(layer.params.param_count for layer in self.layers)

    def moe_layers(self) -> list[tuple[int, MoELayer]]:
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, MoELayer)]


def build_moe_model(input_dim: int, hidden_dims, num_classes: int, seed: int,
                    moe_layer_indices=(0, 1), gating: str = "soft") -> MoeModel:
    """Start-off architecture: one expert per mixture layer (plain MLP shape)."""
    hidden_dims = tuple(hidden_dims)
    for idx in moe_layer_indices:
        if not 0 <= idx < len(hidden_dims):
            raise InputError(f"moe layer index {idx} outside hidden layers")
    dims = (input_dim, *hidden_dims, num_classes)
    layers: list = []
    for i in range(len(hidden_dims)):
        rng = rng_stream(seed, KEY_INIT, i)
        if i in moe_layer_indices:
            layers.append(MoELayer.single_expert(dims[i], dims[i + 1], rng, mode=gating))
        else:
            layers.append(DenseLayer(dims[i], dims[i + 1], rng, relu=True))
    rng = rng_stream(seed, KEY_INIT, len(hidden_dims))
    layers.append(DenseLayer(dims[-2], dims[-1], rng, relu=False))
    return MoeModel(layers, num_classes, gating)


def model_forward(model: MoeModel, x: Matrix, train: bool = False,
                  rng: np.random.Generator | None = None):
    """Returns (logits, caches); caches align with model.layers for backward."""
    z = as_matrix(x)
    caches: list = []
    for layer in model.layers:
        if isinstance(layer, MoELayer):
            z, record = moe_forward(layer, z, train=train, rng=rng)
            caches.append(record)
        else:
            preact = z @ layer.params["W"] + layer.params["b"]
            caches.append((z, preact))
            z = np.maximum(preact, 0.0) if layer.relu else preact
    return z, caches


def model_logits(model: MoeModel, x: Matrix) -> Matrix:
    logits, _ = model_forward(model, x, train=False)
    return logits


def model_loss_grads(model: MoeModel, x: Matrix, labels, train: bool = True,
                     rng: np.random.Generator | None = None):
    """(loss, logits, per-layer gradient ParamSets) for one joint step."""
    logits, caches = model_forward(model, x, train=train, rng=rng)
    loss, dlogits = softmax_xent(logits, labels)
    grads: list[ParamSet | None] = [None] * len(model.layers)
    delta = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, MoELayer):
            grads[i], delta = moe_backward(layer, caches[i], delta)
        else:
            z_in, preact = caches[i]
            if layer.relu:
                delta = delta * (preact > 0.0)
            g = layer.params.zeros_like()
            g["W"] += z_in.T @ delta
            g["b"] += delta.sum(axis=0)
            grads[i] = g
            delta = delta @ layer.params["W"].T
    return loss, logits, grads


def grow_step(model: MoeModel, val_inputs: Matrix, val_labels, seed: int,
              event_index: int = 0) -> MoeModel:
    """One growth step: split the losing expert at every mixture layer.

    Losing experts are chosen from per-expert cumulative validation loss
    under inference-mode routing (argmax leaf assignment in soft mode).
    """
    val_inputs = as_matrix(val_inputs)
    if val_inputs.shape[0] == 0:
        raise InputError("growth needs a nonempty validation set")
    logits, caches = model_forward(model, val_inputs, train=False)
    losses = xent_per_example(logits, val_labels)
    model.last_growth = []
    for layer_index, layer in model.moe_layers():
        stats = ExpertLossStats.zeros(layer.num_experts)
        accumulate_expert_loss(stats, caches[layer_index], losses)
        losing = select_losing_expert(stats)
        split_expert(layer, losing, rng_stream(seed, KEY_GROW, event_index, layer_index))
        model.last_growth.append(
            (layer_index, losing, layer.next_expert_id - 1, f"g{layer.next_gate_id - 1}")
        )
    return model
