"""Mega-batch stream construction and waiting-time / replay scheduling.

A dataset is split once into B disjoint mega-batches, each with its own
held-out validation slice. Training events fire when the waiting window
fills: at arrivals t = w, 2w, ..., plus one final partial window when B is
not a multiple of w. Replay unions everything seen so far instead of just
the current window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .numkit import Matrix, as_matrix, rng_stream


@dataclass
class Dataset:
    inputs: Matrix
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise InputError(
                f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} examples"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def concat_datasets(parts: list[Dataset]) -> Dataset:
    if not parts:
        raise InputError("nothing to concatenate")
    c = parts[0].num_classes
    if any(p.num_classes != c for p in parts):
        raise InputError("datasets disagree on num_classes")
    return Dataset(
        np.concatenate([p.inputs for p in parts], axis=0),
        np.concatenate([p.labels for p in parts]),
        c,
    )


@dataclass
class MegaBatch:
    index: int  # 1-based position in the stream
    train: Dataset
    val: Dataset


def partition_stream(
    data: Dataset, num_mega_batches: int, val_frac: float = 0.10, seed: int = 0
) -> list[MegaBatch]:
    """Random disjoint partition into B mega-batches covering the dataset.

    The first (n mod B) mega-batches take one extra example. Within each
    mega-batch the trailing round(val_frac * size) examples of the shuffled
    order form the validation slice.
    """
    b = int(num_mega_batches)
    if b < 1:
        raise InputError("need at least one mega-batch")
    if b > data.n:
        raise InputError(f"cannot split {data.n} examples into {b} mega-batches")
    if not 0.0 <= val_frac < 1.0:
        raise InputError("val_frac must lie in [0, 1)")
    perm = rng_stream(seed).permutation(data.n)
    base, extra = divmod(data.n, b)
    mega_batches = []
    start = 0
    for i in range(b):
        size = base + (1 if i < extra else 0)
        chunk = perm[start : start + size]
        start += size
        n_val = round(val_frac * size)
        mega_batches.append(
            MegaBatch(
                index=i + 1,
                train=data.subset(chunk[: size - n_val]),
                val=data.subset(chunk[size - n_val :]),
            )
        )
    return mega_batches


@dataclass
class StreamState:
    mega_batches: list[MegaBatch]
    waiting_time: int
    replay: bool = False
    cursor: int = 0
    accumulated: list[int] = field(default_factory=list)  # replay references, not copies

    def __post_init__(self):
        if not 1 <= self.waiting_time <= self.num_mega_batches:
            raise InputError("waiting time must lie in [1, B]")

    @property
    def num_mega_batches(self) -> int:
        return len(self.mega_batches)


def training_event_arrivals(num_mega_batches: int, waiting_time: int) -> list[int]:
    """Arrivals at which a training event fires: w, 2w, ..., and B for a partial tail."""
    events = list(range(waiting_time, num_mega_batches + 1, waiting_time))
    if num_mega_batches % waiting_time != 0:
        events.append(num_mega_batches)
    return events


def is_training_event(t: int, num_mega_batches: int, waiting_time: int) -> bool:
    return t % waiting_time == 0 or t == num_mega_batches


def assemble_training_set(state: StreamState, t: int) -> Dataset | None:
    """Training set for arrival t, or None when the waiting window is still filling.

    Without replay the set is the union of the train splits of the current
    window; with replay it is the union of every train split seen so far.
    Validation slices never enter the result.
    """
    b = state.num_mega_batches
    if not 1 <= t <= b:
        raise InputError(f"arrival {t} outside stream of length {b}")
    state.cursor = t
    if not is_training_event(t, b, state.waiting_time):
        return None
    if state.replay:
        first = 1
    elif t % state.waiting_time == 0:
        first = t - state.waiting_time + 1
    else:  # final partial window
        first = (t // state.waiting_time) * state.waiting_time + 1
    state.accumulated = list(range(first, t + 1))
    return concat_datasets([state.mega_batches[i - 1].train for i in state.accumulated])


def window_validation_set(state: StreamState, t: int) -> Dataset:
    """Union of the validation slices matching the training set at arrival t."""
    b = state.num_mega_batches
    if not 1 <= t <= b:
        raise InputError(f"arrival {t} outside stream of length {b}")
    if state.replay:
        first = 1
    elif t % state.waiting_time == 0:
        first = t - state.waiting_time + 1
    else:
        first = (t // state.waiting_time) * state.waiting_time + 1
    return concat_datasets([state.mega_batches[i - 1].val for i in range(first, t + 1)])


def minibatches(data: Dataset, size: int, epoch_seed):
    """Seeded shuffle of 0..n-1 yielded in slices; the last slice may be short.

    ``epoch_seed`` is an int or an already-derived Generator; each epoch gets
    a fresh one, so every example appears exactly once per epoch.
    """
    if data.n == 0:
        raise InputError("empty dataset")
    if size < 1:
        raise InputError("minibatch size must be >= 1")
    rng = epoch_seed if isinstance(epoch_seed, np.random.Generator) else rng_stream(epoch_seed)
    perm = rng.permutation(data.n)
    for start in range(0, data.n, size):
        yield perm[start : start + size]
