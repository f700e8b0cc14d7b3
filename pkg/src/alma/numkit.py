"""Dense numerical core: float64 matrices, affine+ReLU MLPs with hand-derived
backprop, softmax cross-entropy, SGD-with-momentum and AdaDelta, and a
central-finite-difference gradient oracle.

Everything is float64 and deterministic. Randomness comes only from
``rng_stream``, a splittable counter-based generator (Philox keyed through a
SeedSequence spawn key), so every component/layer/epoch can draw an
independent substream from a single 64-bit seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, ShapeError

Matrix = np.ndarray  # 2-D float64, row-major


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent deterministic substream identified by (seed, key path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_matrix(data) -> Matrix:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def softmax(logits: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction for stability."""
    logits = as_matrix(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels


def softmax_xent(logits: Matrix, labels) -> tuple[float, Matrix]:
    """Mean negative log-likelihood and its gradient (softmax - onehot) / n."""
    logits = as_matrix(logits)
    n, c = logits.shape
    if n < 1:
        raise InputError("softmax_xent needs at least one row")
    labels = _check_labels(labels, c)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    probs = softmax(logits)
    rows = np.arange(n)
    loss = float(-np.log(probs[rows, labels]).mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def xent_per_example(logits: Matrix, labels) -> np.ndarray:
    """Per-example negative log-likelihood (no reduction)."""
    logits = as_matrix(logits)
    labels = _check_labels(labels, logits.shape[1])
    probs = softmax(logits)
    return -np.log(probs[np.arange(logits.shape[0]), labels])


class ParamSet:
    """Named, shaped float64 parameter arrays with deterministic iteration order.

    Arrays are stored by reference; mutation happens only through the explicit
    update ops (optimizer steps) or direct item assignment.
    """

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._entries: dict[str, np.ndarray] = {}
        if entries:
            for name, value in entries.items():
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._entries:
            raise InputError(f"duplicate parameter name {name!r}")
        self._entries[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._entries:
            raise InputError(f"unknown parameter {name!r}; use add() for new entries")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._entries[name].shape:
            raise ShapeError(f"shape change for {name!r}")
        self._entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self._entries.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._entries.items():
            out.add(name, value.copy())
        return out

    def zeros_like(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self._entries.items():
            out.add(name, np.zeros_like(value))
        return out

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality: same names, order, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            v.shape == other[k].shape and np.array_equal(v, other[k], equal_nan=True)
            for k, v in self.items()
        )


@dataclass(frozen=True)
class MlpConfig:
    """Fully connected ReLU network shape. Two hidden layers is the default depth."""

    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (8, 8)
    seed: int = 0

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d < 1 for d in dims):
            raise InputError("all layer dimensions must be >= 1")


def affine_init(rng: np.random.Generator, d_in: int, d_out: int) -> Matrix:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


# spawn-key namespaces so init / shuffle / routing / growth streams never collide
KEY_INIT = 0
KEY_SHUFFLE = 1
KEY_ROUTING = 2
KEY_GROW = 3


def init_mlp(config: MlpConfig) -> ParamSet:
    """Layer parameters l{i}.W / l{i}.b, each layer on its own seed substream."""
    dims = (config.input_dim, *config.hidden_dims, config.num_classes)
    params = ParamSet()
    for i in range(len(dims) - 1):
        rng = rng_stream(config.seed, KEY_INIT, i)
        params.add(f"l{i}.W", affine_init(rng, dims[i], dims[i + 1]))
        params.add(f"l{i}.b", np.zeros(dims[i + 1]))
    return params


def _mlp_depth(params: ParamSet) -> int:
    depth = 0
    while f"l{depth}.W" in params:
        depth += 1
    return depth


def mlp_logits(params: ParamSet, x: Matrix) -> Matrix:
    logits, _ = mlp_forward(params, x)
    return logits


def mlp_forward(params: ParamSet, x: Matrix) -> tuple[Matrix, list[Matrix]]:
    """Forward pass; returns logits and the per-layer inputs needed by backward."""
    x = as_matrix(x)
    depth = _mlp_depth(params)
    if depth == 0:
        raise InputError("parameter set holds no layers l0.W, l1.W, ...")
    layer_inputs = []
    a = x
    for i in range(depth):
        w = params[f"l{i}.W"]
        if a.shape[1] != w.shape[0]:
            raise ShapeError(f"layer {i}: input width {a.shape[1]} vs weight rows {w.shape[0]}")
        layer_inputs.append(a)
        z = a @ w + params[f"l{i}.b"]
        a = np.maximum(z, 0.0) if i < depth - 1 else z
    return a, layer_inputs


def mlp_backward(params: ParamSet, layer_inputs: list[Matrix], dlogits: Matrix) -> ParamSet:
    """Gradients for every l{i}.W / l{i}.b given the loss gradient at the logits."""
    depth = len(layer_inputs)
    grads = ParamSet()
    delta = dlogits
    for i in range(depth - 1, -1, -1):
        a = layer_inputs[i]
        grads.add(f"l{i}.W", a.T @ delta)
        grads.add(f"l{i}.b", delta.sum(axis=0))
        if i > 0:
            delta = delta @ params[f"l{i}.W"].T
            # ReLU mask: the stored input of layer i is the activation of layer i-1
            delta = delta * (a > 0.0)
    # restore forward declaration order
    ordered = ParamSet()
    for name in params.names():
        ordered.add(name, grads[name])
    return ordered


def mlp_forward_backward(params: ParamSet, x: Matrix, labels) -> tuple[float, Matrix, ParamSet]:
    logits, layer_inputs = mlp_forward(params, x)
    loss, dlogits = softmax_xent(logits, labels)
    grads = mlp_backward(params, layer_inputs, dlogits)
    return loss, logits, grads


@dataclass
class SgdMomentumState:
    velocity: ParamSet

    @classmethod
    def fresh(cls, params: ParamSet) -> "SgdMomentumState":
        return cls(velocity=params.zeros_like())


@dataclass
class AdaDeltaState:
    avg_sq_grad: ParamSet
    avg_sq_delta: ParamSet

    @classmethod
    def fresh(cls, params: ParamSet) -> "AdaDeltaState":
        return cls(avg_sq_grad=params.zeros_like(), avg_sq_delta=params.zeros_like())


def _aligned(params: ParamSet, grads: ParamSet) -> None:
    if params.names() != grads.names():
        raise ShapeError("gradient names do not match parameter names")


def sgd_momentum_step(
    params: ParamSet,
    grads: ParamSet,
    state: SgdMomentumState,
    lr: float,
    momentum: float,
) -> tuple[ParamSet, SgdMomentumState]:
    """v <- momentum * v + g; theta <- theta - lr * v. Updates in place."""
    _aligned(params, grads)
    for name, g in grads.items():
        check_finite(g, f"gradient {name}")
        v = state.velocity[name]
        v *= momentum
        v += g
        params[name] = params[name] - lr * v
    return params, state


def adadelta_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdaDeltaState,
    rho: float = 0.9,
    eps: float = 1e-6,
) -> tuple[ParamSet, AdaDeltaState]:
    """AdaDelta with unit learning rate. Updates in place."""
    if not 0.0 < rho < 1.0:
        raise InputError("rho must lie in (0, 1)")
    if eps <= 0.0:
        raise InputError("eps must be positive")
    _aligned(params, grads)
    for name, g in grads.items():
        check_finite(g, f"gradient {name}")
        eg2 = state.avg_sq_grad[name]
        ed2 = state.avg_sq_delta[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        delta = -np.sqrt((ed2 + eps) / (eg2 + eps)) * g
        ed2 *= rho
        ed2 += (1.0 - rho) * delta * delta
        params[name] = params[name] + delta
    return params, state


def finite_diff_check(loss_fn, params: ParamSet, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` maps the (shared, mutable) ParamSet to (loss, grads) and must be
    deterministic. Relative error per coordinate is
    |g_a - g_n| / max(1, |g_a| + |g_n|).
    """
    _, grads = loss_fn(params)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        g_flat = np.asarray(grads[name]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            loss_plus, _ = loss_fn(params)
            flat[j] = orig - h
            loss_minus, _ = loss_fn(params)
            flat[j] = orig
            g_num = (loss_plus - loss_minus) / (2.0 * h)
            g_ana = g_flat[j]
            rel = abs(g_ana - g_num) / max(1.0, abs(g_ana) + abs(g_num))
            worst = max(worst, rel)
    return worst
