"""The anytime trade-off on synthetic data: greedy vs intermediate vs tardy.

A tardy learner (w = B) ends with the best predictor but pays for it with a
useless model throughout the stream, so its cumulative error rate is the
worst. Runs in a few seconds and writes ledgers under /tmp/alma-demo.
"""

from alma.harness import ExperimentConfig, report, run_experiment

BASE = dict(
    dataset="synthetic",
    synthetic_classes=5,
    synthetic_dim=12,
    synthetic_n=2000,
    synthetic_test_n=1000,
    synthetic_spread=2.2,
    synthetic_seed=0,
    num_mega_batches=20,
    learner="SM",
    hidden_dims=[8, 8],
    epochs_per_event=5,
    minibatch_size=64,
    seed_stream=0,
    seed_init=0,
)

rows = []
for w in (1, 5, 20):
    cfg = ExperimentConfig.from_dict({**BASE, "waiting_time": w,
                                      "output_dir": f"/tmp/alma-demo/w{w}"})
    out = run_experiment(cfg)
    rows.append((w, out))
    print(f"w={w:2d}: CER={out['cer']:6.2f}  mean_error={out['mean_error']:.3f}  "
          f"final_error={out['final_error']:.3f}  train_flops={out['cum_comp']:.2e}")

best_final = min(rows, key=lambda r: r[1]["final_error"])[0]
best_anytime = min(rows, key=lambda r: r[1]["cer"])[0]
print(f"\nbest final error:   w={best_final}")
print(f"best anytime (CER): w={best_anytime}")

merged = report([f"/tmp/alma-demo/w{w}" for w, _ in rows],
                output_path="/tmp/alma-demo/merged.json")
print(f"\nmerged report for plotting: /tmp/alma-demo/merged.json "
      f"({len(merged['runs'])} runs, error curves of length {BASE['num_mega_batches']})")
