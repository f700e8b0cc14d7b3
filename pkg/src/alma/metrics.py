"""Cumulative error / memory / compute metrics and the FLOP cost model.

One ArrivalRecord per stream arrival feeds three running integrals:
cumulative error rate (sum of per-arrival test error over t = 1..B),
cumulative memory (parameter counts summed over t = 0..B, the t = 0 term
being the freshly initialized model) and cumulative compute (training FLOPs,
zero at t = 0 and at arrivals without a training event).

All three are accumulated strictly in index order so they match a naive
re-summation bit for bit. The cost model counts multiplies and adds
separately (2 FLOPs per MAC); a training step is charged 3x inference
(forward plus two backward products). Hard-gated mixture layers charge the
full gate tree but exactly one expert per example, so their inference cost
does not depend on the number of experts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError, StateError

TRAINING_COST_FACTOR = 3.0  # training FLOPs per inference FLOP


@dataclass(frozen=True)
class ArrivalRecord:
    t: int
    test_error_rate: float
    param_count: int
    flops_this_arrival: float
    trained: bool

    def __post_init__(self):
        if not 0.0 <= self.test_error_rate <= 1.0:
            raise InputError("error rate must lie in [0, 1]")
        if self.flops_this_arrival < 0.0:
            raise InputError("flops must be nonnegative")
        if not self.trained and self.flops_this_arrival != 0.0:
            raise InputError("arrival without training must report zero flops")


class MetricsLedger:
    """Append-only per-arrival records plus the t = 0 parameter count."""

    def __init__(self, t0_param_count: int):
        if t0_param_count < 0:
            raise InputError("t0 parameter count must be nonnegative")
        self.t0_param_count = int(t0_param_count)
        self.records: list[ArrivalRecord] = []

    def append(self, record: ArrivalRecord) -> None:
        expected_t = len(self.records) + 1
        if record.t != expected_t:
            raise StateError(f"expected arrival {expected_t}, got {record.t}")
        self.records.append(record)

    @property
    def num_arrivals(self) -> int:
        return len(self.records)


def error_rate(predictions, labels) -> float:
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.size == 0:
        raise InputError("empty test set")
    if predictions.shape != labels.shape:
        raise InputError("predictions and labels differ in length")
    return float(np.count_nonzero(predictions != labels)) / predictions.size


def cer(ledger: MetricsLedger) -> float:
    total = 0.0
    for rec in ledger.records:
        total += rec.test_error_rate
    return total


def mean_error(ledger: MetricsLedger) -> float:
    if not ledger.records:
        raise StateError("no arrivals recorded")
    return cer(ledger) / ledger.num_arrivals


def cum_mem(ledger: MetricsLedger) -> float:
    total = float(ledger.t0_param_count)
    for rec in ledger.records:
        total += rec.param_count
    return total


def cum_comp(ledger: MetricsLedger) -> float:
    total = 0.0  # t = 0 term: nothing processed yet
    for rec in ledger.records:
        total += rec.flops_this_arrival
    return total


# ---------------------------------------------------------------- cost model

@dataclass(frozen=True)
class LayerCost:
    """Cost-model view of one layer. kind is 'affine' or 'moe'."""

    kind: str
    d_in: int
    d_out: int
    experts: int = 1      # leaf count of a moe layer
    gate_nodes: int = 0   # internal 2-way gates of a moe layer
    gating: str = "soft"  # 'soft' runs every expert, 'hard' exactly one


def flops_affine(n: int, d_in: int, d_out: int, phase: str) -> float:
    if d_in < 1 or d_out < 1:
        raise InputError("affine dimensions must be >= 1")
    if phase not in ("inference", "training"):
        raise InputError(f"unknown phase {phase!r}")
    base = 2.0 * n * d_in * d_out
    return base * TRAINING_COST_FACTOR if phase == "training" else base


def moe_flops_breakdown(layer: LayerCost, n: int, phase: str) -> tuple[float, float]:
    """(gate_flops, expert_flops) for one mixture layer."""
    gate = layer.gate_nodes * flops_affine(n, layer.d_in, 2, phase) if layer.gate_nodes else 0.0
    per_example_experts = layer.experts if layer.gating == "soft" else 1
    expert = per_example_experts * flops_affine(n, layer.d_in, layer.d_out, phase)
    return gate, expert


def flops_model(layers, n: int, phase: str) -> float:
    total = 0.0
    for layer in layers:
        if layer.kind == "affine":
            total += flops_affine(n, layer.d_in, layer.d_out, phase)
        elif layer.kind == "moe":
            gate, expert = moe_flops_breakdown(layer, n, phase)
            total += gate + expert
        else:
            raise InputError(f"unknown layer kind {layer.kind!r}")
    return total


# ---------------------------------------------------------------- export

CSV_HEADER = "t,error_rate,param_count,flops,trained"


def csv_row(record: ArrivalRecord) -> str:
    trained = "true" if record.trained else "false"
    return (
        f"{record.t},{record.test_error_rate!r},{record.param_count},"
        f"{record.flops_this_arrival!r},{trained}"
    )


def ledger_csv(ledger: MetricsLedger) -> str:
    lines = [CSV_HEADER]
    lines.extend(csv_row(rec) for rec in ledger.records)
    return "\n".join(lines) + "\n"


def write_ledger_csv(ledger: MetricsLedger, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ledger_csv(ledger))


def summary(ledger: MetricsLedger) -> dict:
    if not ledger.records:
        raise StateError("no arrivals recorded")
    return {
        "cer": cer(ledger),
        "mean_error": mean_error(ledger),
        "cum_mem": cum_mem(ledger),
        "cum_comp": cum_comp(ledger),
        "final_error": ledger.records[-1].test_error_rate,
    }


def write_summary_json(summary_dict: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")
