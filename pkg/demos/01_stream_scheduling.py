"""Stream construction and waiting-time scheduling, step by step.

A dataset becomes an ordered stream of B mega-batches, each with a held-out
validation slice. A learner with waiting time w trains only when the window
fills; with replay it revisits everything seen so far.
"""

import numpy as np

from alma.data import gen_synthetic
from alma.stream import (
    StreamState,
    assemble_training_set,
    minibatches,
    partition_stream,
    training_event_arrivals,
)

data = gen_synthetic(num_classes=5, dim=8, n=1000, spread=0.5, seed=7)
print(f"dataset: {data.n} examples, {data.dim} features, {data.num_classes} classes")

B = 10
mbs = partition_stream(data, B, val_frac=0.10, seed=7)
print(f"\npartitioned into B={B} mega-batches:")
for mb in mbs[:3]:
    print(f"  mega-batch {mb.index}: train={mb.train.n} val={mb.val.n}")
print("  ...")

for w in (1, 3, 10):
    print(f"\nwaiting time w={w}: training events at arrivals {training_event_arrivals(B, w)}")

print("\nwithout replay, each event sees only its window:")
state = StreamState(mbs, waiting_time=3, replay=False)
for t in range(1, B + 1):
    out = assemble_training_set(state, t)
    print(f"  t={t}: {'no event' if out is None else f'train on {out.n} examples'}")

print("\nwith replay, the training set keeps growing:")
state = StreamState(mbs, waiting_time=3, replay=True)
for t in range(1, B + 1):
    out = assemble_training_set(state, t)
    if out is not None:
        print(f"  t={t}: train on {out.n} examples (mega-batches 1..{t})")

print("\nminibatches cover every example exactly once per epoch:")
epoch0 = list(minibatches(mbs[0].train, size=32, epoch_seed=0))
epoch1 = list(minibatches(mbs[0].train, size=32, epoch_seed=1))
print(f"  epoch 0 slice sizes: {[len(s) for s in epoch0]}")
print(f"  epochs shuffle differently: {not np.array_equal(np.concatenate(epoch0), np.concatenate(epoch1))}")
