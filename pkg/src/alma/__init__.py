"""Anytime learning at macroscale: stream construction, waiting-time and
replay scheduling, fixed and growing learners (including a tree-gated
growing mixture of experts), and cumulative error/memory/compute metrics.
"""

from .errors import (
    ConfigError,
    FormatError,
    InputError,
    NumericError,
    ShapeError,
    StateError,
)
from .harness import ExperimentConfig, report, run_experiment, run_seq_vs_iid
from .learners import LearnerHandle, TrainReport, make_learner, predict, predict_probs, train_event
from .metrics import ArrivalRecord, MetricsLedger, cer, cum_comp, cum_mem, error_rate
from .numkit import MlpConfig, ParamSet, rng_stream
from .stream import Dataset, MegaBatch, StreamState, minibatches, partition_stream

__version__ = "0.1.0"
