"""Experiment driver: config handling, the stream training loop, the
sequential-vs-iid ablation, and run reporting.

A run walks the stream arrival by arrival. When the waiting window fills it
assembles the training set (window union, or everything so far under
replay), optionally grows a gMoE, trains, and then, at every arrival
(trained or not), evaluates on the common test set and appends one ledger
row. Artifacts per run: ledger.csv (one row per arrival, flushed as it
goes), summary.json, checkpoint.bin. Identical configs give byte-identical
artifacts, and a checkpoint resume finishes with the same bytes as an
uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_handle, save_checkpoint
from .data import gen_synthetic, load_mnist_dir
from .errors import ConfigError, NumericError, StateError
from .learners import (
    KINDS,
    LearnerHandle,
    gmoe_grow,
    make_learner,
    param_count,
    predict,
    train_event,
)
from .metrics import (
    ArrivalRecord,
    CSV_HEADER,
    MetricsLedger,
    csv_row,
    error_rate,
    summary,
    write_summary_json,
)
from .numkit import MlpConfig
from .stream import (
    Dataset,
    StreamState,
    assemble_training_set,
    concat_datasets,
    partition_stream,
    training_event_arrivals,
    window_validation_set,
)

OUTPUT_ROOT_ENV = "ALMA_OUTPUT_ROOT"


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    mnist_dir: str = "data/mnist"
    synthetic_classes: int = 10
    synthetic_dim: int = 16
    synthetic_n: int = 4000
    synthetic_test_n: int = 1000
    synthetic_spread: float = 0.6
    synthetic_seed: int = 0
    num_mega_batches: int = 100
    val_frac: float = 0.10
    waiting_time: int = 10
    replay: bool = False
    learner: str = "SM"
    hidden_dims: tuple = (8, 8)
    ensemble_size: int = 5
    gens_k: int = 1
    moe_layers: tuple = (0, 1)
    gating: str = "soft"
    grow: bool = False
    grow_order: str = "before"
    grow_every: int = 1  # growth stride in training events
    optimizer: str = "adadelta"
    lr: float = 0.01
    momentum: float = 0.9
    rho: float = 0.9
    eps: float = 1e-6
    epochs_per_event: int = 20
    minibatch_size: int = 128
    patience: int | None = None
    from_scratch: bool = False
    seed_stream: int = 0
    seed_init: int = 0
    seed_routing: int = 0
    output_dir: str = "runs/run"

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        self.moe_layers = tuple(int(i) for i in self.moe_layers)
        if self.dataset not in ("synthetic", "mnist_idx"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.learner not in KINDS:
            raise ConfigError(f"unknown learner {self.learner!r}")
        if self.num_mega_batches < 1:
            raise ConfigError("num_mega_batches must be >= 1")
        if not 1 <= self.waiting_time <= self.num_mega_batches:
            raise ConfigError("waiting_time must lie in [1, num_mega_batches]")
        if self.epochs_per_event < 1:
            raise ConfigError("epochs_per_event must be >= 1")
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be >= 1")
        if not 0.0 <= self.val_frac < 1.0:
            raise ConfigError("val_frac must lie in [0, 1)")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.gating not in ("soft", "hard"):
            raise ConfigError(f"unknown gating mode {self.gating!r}")
        if self.grow_order not in ("before", "after"):
            raise ConfigError("grow_order must be 'before' or 'after'")
        if self.grow and self.learner != "gMoE":
            raise ConfigError("grow applies to the gMoE learner only")
        if self.grow_every < 1:
            raise ConfigError("grow_every must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 when set")
        for name in ("seed_stream", "seed_init", "seed_routing"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a nonnegative integer")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        out["moe_layers"] = list(self.moe_layers)
        return out

    def canonical_json(self) -> str:
        """Canonical experiment fingerprint: every field except where the
        artifacts land, so relocated reruns and resumes stay compatible."""
        fields = self.to_dict()
        fields.pop("output_dir")
        return json.dumps(fields, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "mnist_idx":
        return load_mnist_dir(config.mnist_dir, "train"), load_mnist_dir(config.mnist_dir, "test")
    train = gen_synthetic(config.synthetic_classes, config.synthetic_dim,
                          config.synthetic_n, config.synthetic_spread,
                          config.synthetic_seed, sample_stream=0)
    test = gen_synthetic(config.synthetic_classes, config.synthetic_dim,
                         config.synthetic_test_n, config.synthetic_spread,
                         config.synthetic_seed, sample_stream=1)
    return train, test


def build_learner(config: ExperimentConfig, input_dim: int, num_classes: int) -> LearnerHandle:
    mlp = MlpConfig(input_dim=input_dim, num_classes=num_classes,
                    hidden_dims=config.hidden_dims, seed=config.seed_init)
    opt_hyper = {"lr": config.lr, "momentum": config.momentum,
                 "rho": config.rho, "eps": config.eps}
    return make_learner(
        config.learner, mlp,
        optimizer=config.optimizer, opt_hyper=opt_hyper,
        minibatch_size=config.minibatch_size,
        ensemble_size=config.ensemble_size, gens_k=config.gens_k,
        moe_layer_indices=config.moe_layers, gating=config.gating,
        routing_seed=config.seed_routing,
    )


def _dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.inputs).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def run_experiment(config: ExperimentConfig, resume_from=None, stop_after: int | None = None) -> dict:
    """Execute the stream loop; writes ledger.csv, summary.json, checkpoint.bin."""
    outdir = config.resolved_output_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    digest = config.config_hash()
    (outdir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    train, test = load_datasets(config)
    test_canary = _dataset_digest(test)
    mbs = partition_stream(train, config.num_mega_batches, config.val_frac, config.seed_stream)
    state = StreamState(mbs, config.waiting_time, config.replay)
    b = config.num_mega_batches

    handle = build_learner(config, train.dim, train.num_classes)
    ledger = MetricsLedger(t0_param_count=param_count(handle))
    start_t = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != digest:
            raise StateError("checkpoint was written by a different configuration")
        restore_handle(ckpt, handle)
        ledger = ckpt.ledger
        start_t = ckpt.arrival_t + 1

    events = training_event_arrivals(b, config.waiting_time)
    event_index = sum(1 for e in events if e < start_t)

    csv_path = outdir / "ledger.csv"
    with open(csv_path, "w", encoding="utf-8") as csv:
        csv.write(CSV_HEADER + "\n")
        for rec in ledger.records:  # replay rows restored from a checkpoint
            csv.write(csv_row(rec) + "\n")
        csv.flush()

        for t in range(start_t, b + 1):
            data = assemble_training_set(state, t)
            trained, flops = False, 0.0
            if data is not None:
                val = window_validation_set(state, t)
                grow_now = (config.learner == "gMoE" and config.grow
                            and event_index % config.grow_every == 0)
                try:
                    if grow_now and config.grow_order == "before":
                        gmoe_grow(handle, val, event_index)
                    report = train_event(
                        handle, data, config.epochs_per_event,
                        from_scratch=config.from_scratch,
                        val=val if config.patience is not None else None,
                        patience=config.patience,
                    )
                    if grow_now and config.grow_order == "after":
                        gmoe_grow(handle, val, event_index)
                    if not math.isfinite(report.final_train_loss):
                        raise NumericError(f"non-finite training loss at arrival {t}")
                except NumericError as exc:
                    (outdir / "diagnostic.json").write_text(
                        json.dumps({"arrival": t, "error": str(exc)}, sort_keys=True),
                        encoding="utf-8")
                    raise
                trained, flops = True, report.flops_used
                event_index += 1
            err = error_rate(predict(handle, test.inputs), test.labels)
            ledger.append(ArrivalRecord(t, err, param_count(handle), flops, trained))
            csv.write(csv_row(ledger.records[-1]) + "\n")
            csv.flush()
            if stop_after is not None and t == stop_after and t < b:
                save_checkpoint(outdir / "checkpoint.bin", digest, t, handle, ledger)
                return {"stopped_after": t, "checkpoint": str(outdir / "checkpoint.bin")}

    if _dataset_digest(test) != test_canary:
        raise StateError("test set changed during the run")

    save_checkpoint(outdir / "checkpoint.bin", digest, b, handle, ledger)
    out = summary(ledger)
    out["config_hash"] = digest.hex()
    write_summary_json(out, outdir / "summary.json")
    return out


def run_seq_vs_iid(config: ExperimentConfig, k: int) -> dict:
    """Equal-compute comparison: k sequential training events vs one event on
    the shuffled union of the same k mega-batches."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if config.num_mega_batches % k != 0:
        raise ConfigError("k must divide num_mega_batches")
    train, test = load_datasets(config)
    mbs = partition_stream(train, k, config.val_frac, config.seed_stream)

    seq = build_learner(config, train.dim, train.num_classes)
    seq_examples = 0
    for mb in mbs:
        train_event(seq, mb.train, config.epochs_per_event)
        seq_examples += config.epochs_per_event * mb.train.n
    seq_error = error_rate(predict(seq, test.inputs), test.labels)

    iid = build_learner(config, train.dim, train.num_classes)
    union = concat_datasets([mb.train for mb in mbs])
    train_event(iid, union, config.epochs_per_event)
    iid_examples = config.epochs_per_event * union.n
    iid_error = error_rate(predict(iid, test.inputs), test.labels)

    if seq_examples != iid_examples:
        raise StateError("arms saw different numbers of training examples")
    return {
        "k": k,
        "examples_per_arm": seq_examples,
        "seq": {"final_error": seq_error},
        "iid": {"final_error": iid_error},
        "gap": seq_error - iid_error,
    }


def report(run_dirs, output_path=None) -> dict:
    """Merge completed runs (sorted by cumulative compute) for plotting."""
    runs, incomplete = [], []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        summary_path = run_dir / "summary.json"
        csv_path = run_dir / "ledger.csv"
        if not summary_path.exists() or not csv_path.exists():
            incomplete.append(str(run_dir))
            continue
        run_summary = json.loads(summary_path.read_text(encoding="utf-8"))
        lines = csv_path.read_text(encoding="utf-8").strip().split("\n")
        curve = [float(line.split(",")[1]) for line in lines[1:]]
        runs.append({"run_dir": str(run_dir), **run_summary, "error_curve": curve})
    runs.sort(key=lambda r: r["cum_comp"])
    merged = {"runs": runs, "incomplete": sorted(incomplete)}
    if output_path is not None:
        with open(output_path, "w", encoding="utf-8") as fh:
            json.dump(merged, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return merged
