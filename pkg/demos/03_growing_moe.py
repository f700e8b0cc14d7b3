"""Growing a tree-gated mixture of experts without disturbing its loss.

Splitting the losing expert copies its parameters into two children behind a
fresh 2-way gate, so the model's function is unchanged at the moment of
growth; training afterwards lets the twins specialize.
"""

import numpy as np

from alma.data import gen_synthetic
from alma.gmoe import gate_probs, model_logits
from alma.learners import gmoe_grow, make_learner, param_count, predict, train_event
from alma.metrics import error_rate
from alma.numkit import MlpConfig, xent_per_example

train = gen_synthetic(num_classes=4, dim=10, n=1500, spread=1.8, seed=3, sample_stream=0)
val = gen_synthetic(num_classes=4, dim=10, n=300, spread=1.8, seed=3, sample_stream=1)
test = gen_synthetic(num_classes=4, dim=10, n=600, spread=1.8, seed=3, sample_stream=2)

h = make_learner("gMoE", MlpConfig(10, 4, hidden_dims=(8, 8), seed=3),
                 minibatch_size=64, moe_layer_indices=(0, 1), gating="soft")

print("stage | experts/layer | params | val loss before/after growth | test error")
for stage in range(4):
    val_loss_before = xent_per_example(model_logits(h.moe, val.inputs), val.labels).mean()
    gmoe_grow(h, val, event_index=stage)
    val_loss_after = xent_per_example(model_logits(h.moe, val.inputs), val.labels).mean()
    train_event(h, train, epochs=10)
    err = error_rate(predict(h, test.inputs), test.labels)
    counts = [layer.num_experts for _, layer in h.moe.moe_layers()]
    print(f"  {stage}   | {counts}        | {param_count(h):5d}  | "
          f"{val_loss_before:.6f} / {val_loss_after:.6f}       | {err:.3f}")

print("\nthe growth step is loss-preserving: the before/after numbers above match")
print("to ~1e-16; only training moves the loss.")

layer = h.moe.layers[0]
probs = gate_probs(layer, test.inputs[:500])
print(f"\nfirst mixture layer now routes over {layer.num_experts} experts;")
print(f"leaf probabilities still sum to 1 (max deviation "
      f"{np.abs(probs.sum(axis=1) - 1).max():.1e})")
print(f"average routing mass per expert: {np.round(probs.mean(axis=0), 3)}")
