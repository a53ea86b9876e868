"""Finite-difference verification of every analytic gradient in the package.

Each check compares an analytic gradient against central differences over
a number of random seeds and reports the worst relative error together
with the leaf it occurred on. The CLI wraps `run_suite`. A check can be
run with a deliberately corrupted analytic gradient (grad_offset) so the
failure path is a real comparison failure, not a simulated one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .numnet import (
    BATCH_STATS,
    backward,
    finite_diff_check,
    forward,
    init_params,
    max_rel_error,
    mlp_spec,
    numeric_gradient,
    softmax,
)

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_leaf: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _rand_probs(rng, shape):
    raw = rng.random(shape) + 0.05
    return raw / raw.sum(axis=-1, keepdims=True)


def check_sce(seed: int, eps: float, grad_offset: float = 0.0) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    p = _rand_probs(rng, (5, 4))
    q_logits = rng.normal(size=(5, 4))
    analytic = losses.sce(p, q_logits).grad + grad_offset
    numeric = numeric_gradient(lambda z: losses.sce(p, z).value, q_logits, eps)
    return max_rel_error(analytic, numeric), "q_logits"


def check_contrastive(seed: int, eps: float, grad_offset: float = 0.0) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    n = 3
    emb = rng.normal(size=(3 * n, 8)) + 0.1
    groups = [(i, i + n, i + 2 * n) for i in range(n)]

    def value(z):
        return losses.contrastive(losses.ContrastiveBatch(z, groups, temperature=0.1)).value

    analytic = losses.contrastive(losses.ContrastiveBatch(emb, groups, temperature=0.1)).grad + grad_offset
    numeric = numeric_gradient(value, emb, eps)
    return max_rel_error(analytic, numeric), "embeddings"


def check_mse(seed: int, eps: float, grad_offset: float = 0.0) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(5, 6))
    protos = rng.normal(size=(5, 6))
    analytic = losses.mse_proto(feats, protos).grad + grad_offset
    numeric = numeric_gradient(lambda z: losses.mse_proto(z, protos).value, feats, eps)
    return max_rel_error(analytic, numeric), "features"


def check_im(seed: int, eps: float, grad_offset: float = 0.0) -> tuple[float, str]:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(8, 4))
    analytic = losses.im_loss(logits).grad + grad_offset
    numeric = numeric_gradient(lambda z: losses.im_loss(z).value, logits, eps)
    return max_rel_error(analytic, numeric), "logits"


def check_t2_objective(seed: int, eps: float, grad_offset: float = 0.0) -> tuple[float, str]:
    """The composed objective, differentiated block by block."""
    rng = np.random.default_rng(seed)
    n = 2
    emb = rng.normal(size=(3 * n, 6)) + 0.1
    groups = [(i, i + n, i + 2 * n) for i in range(n)]
    feats = rng.normal(size=(4, 6))
    protos = rng.normal(size=(4, 6))
    logits = rng.normal(size=(6, 4))
    lams = (0.7, 1.3, 1.0)

    def objective(e, f, lg):
        return losses.t2_objective(
            losses.contrastive(losses.ContrastiveBatch(e, groups, temperature=0.1)),
            losses.mse_proto(f, protos),
            losses.im_loss(lg),
            *lams,
        )

    obj = objective(emb, feats, logits)
    worst = 0.0
    leaf = "embeddings"
    for name, arr, grad, fn in (
        ("embeddings", emb, obj.grad_embeddings, lambda z: objective(z, feats, logits).value),
        ("features", feats, obj.grad_features, lambda z: objective(emb, z, logits).value),
        ("logits", logits, obj.grad_logits, lambda z: objective(emb, feats, z).value),
    ):
        err = max_rel_error(grad + grad_offset, numeric_gradient(fn, arr, eps))
        if err > worst:
            worst, leaf = err, name
    return worst, leaf


def check_network(seed: int, eps: float, grad_offset: float = 0.0) -> tuple[float, str]:
    """Full backward through the BN-MLP, including an injected feature grad."""
    rng = np.random.default_rng(seed)
    spec = mlp_spec(6, [8, 5], 3)
    params = init_params(spec, rng)
    x = rng.normal(size=(5, 6))
    p_target = _rand_probs(rng, (5, 3))
    feat_weights = rng.normal(size=(5, 5))

    def loss(ps):
        feats, logits, cache = forward(spec, ps, x, stats_mode=BATCH_STATS, update_running=False)
        sce = losses.sce(p_target, logits)
        value = sce.value + float((feats * feat_weights).sum())
        grads = backward(spec, ps, cache, sce.grad, grad_features=feat_weights)
        if grad_offset:
            grads.layers[0].weight = grads.layers[0].weight + grad_offset
        return value, grads

    return finite_diff_check(spec, params, loss, eps), "layer0.weight"


CHECKS = {
    "sce": check_sce,
    "contrastive": check_contrastive,
    "mse": check_mse,
    "im": check_im,
    "t2_objective": check_t2_objective,
    "network": check_network,
}

CORRUPTION_OFFSET = 0.05


def run_suite(eps: float = 1e-5, seeds: int = 20, corrupt: str | None = None) -> list[CheckResult]:
    """Run every check over `seeds` random seeds.

    corrupt names a check whose analytic gradient gets a constant offset,
    forcing a genuine finite-difference failure for that entry.
    """
    if corrupt is not None and corrupt not in CHECKS:
        raise ValueError(f"unknown check {corrupt!r}; choose from {sorted(CHECKS)}")
    results = []
    for name, fn in CHECKS.items():
        offset = CORRUPTION_OFFSET if corrupt == name else 0.0
        worst = 0.0
        worst_leaf = ""
        for seed in range(seeds):
            err, leaf = fn(seed, eps, offset)
            if err > worst:
                worst, worst_leaf = err, leaf
        results.append(CheckResult(name=name, max_rel_error=worst, worst_leaf=worst_leaf))
    return results
