"""Dual-teacher continual test-time adaptation at desk scale.

A small, framework-free stack: a hand-differentiated BN-MLP, the
self-training / prototype / ensembling machinery around it, synthetic
corruption streams for every supported domain-arrival setting, and an
experiment runner with deterministic CSV/JSON output.
"""

__version__ = "0.1.0"

from .numnet import (
    LayerSpec,
    NetworkSpec,
    NetworkParams,
    BATCH_STATS,
    RUNNING_STATS,
    forward,
    backward,
    softmax,
    sgd_step,
    finite_diff_check,
    init_params,
)
from .engine import AdaptationConfig, adapt_step, ensemble, prior_correct
from .trio import ModelTrio, ema_update, stochastic_restore, trainable_mask
from .protostore import PrototypeStore, InsertOutcome

__all__ = [
    "__version__",
    "LayerSpec",
    "NetworkSpec",
    "NetworkParams",
    "BATCH_STATS",
    "RUNNING_STATS",
    "forward",
    "backward",
    "softmax",
    "sgd_step",
    "finite_diff_check",
    "init_params",
    "AdaptationConfig",
    "adapt_step",
    "ensemble",
    "prior_correct",
    "ModelTrio",
    "ema_update",
    "stochastic_restore",
    "trainable_mask",
    "PrototypeStore",
    "InsertOutcome",
]
