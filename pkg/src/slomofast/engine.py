"""The per-batch adaptation step, prediction ensembling, and prior correction.

Protocol per batch: predict with the incoming models, then adapt. The
fast teacher scores and feeds the prototype queues, the slow teacher takes
a gradient step on its batch-norm parameters (plus the projector), the
student self-trains against both teachers, and the fast teacher tracks the
student by EMA. All forwards normalize by the current batch but leave the
running statistics untouched; those stay at their source-training values
so that running-statistics evaluation probes stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, numnet, reliability
from .numnet import BATCH_STATS, add_grads, backward, forward, sgd_step, softmax
from .protostore import InsertOutcome, PrototypeStore
from .reliability import Augmentation, default_plpd_augmentations
from .trio import BN_ONLY, FULL, ModelTrio, ema_update, stochastic_restore, trainable_mask

CONTRASTIVE_VIEW_AUG = Augmentation(reliability.ADDITIVE_JITTER, reliability.DEFAULT_JITTER_SCALE)

STUDENT_MODES = (BN_ONLY, FULL)


@dataclass
class AdaptationConfig:
    """Every knob of the method, with the usual defaults."""

    alpha: float = 0.99  # EMA retention for the fast teacher
    sigma: float = 0.5  # entropy threshold
    delta: float = 0.2  # augmentation-sensitivity threshold
    tau: float = 0.1  # contrastive temperature
    lambda_cl: float = 1.0
    lambda_mse: float = 1.0
    lambda_im: float = 1.0
    gamma: float | None = None  # prior smoothing; None means 1/num_classes
    queue_capacity: int = 10
    evict_interval: int = 50
    restore_prob: float = 0.01
    lr_student: float = 1e-2
    lr_t2: float = 1e-2
    student_mode: str = BN_ONLY  # "bn_only" or "full"
    pl_noise_ratio: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if self.sigma <= 0 or self.delta < 0 or self.tau <= 0:
            raise ValueError("thresholds must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.restore_prob <= 1.0:
            raise ValueError("restore_prob must lie in [0, 1]")
        if not 0.0 <= self.pl_noise_ratio <= 1.0:
            raise ValueError("pl_noise_ratio must lie in [0, 1]")
        if min(self.lambda_cl, self.lambda_mse, self.lambda_im) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.student_mode not in STUDENT_MODES:
            raise ValueError(f"unknown student_mode {self.student_mode!r}")
        if self.queue_capacity < 1 or self.evict_interval < 1:
            raise ValueError("queue_capacity and evict_interval must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def prior_gamma(self, num_classes: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / num_classes


@dataclass
class EnsemblePrediction:
    probs: np.ndarray
    labels: np.ndarray


@dataclass
class StepDiagnostics:
    loss_sce: float = 0.0
    loss_cl: float = 0.0
    loss_mse: float = 0.0
    loss_im: float = 0.0
    n_selected: int = 0
    contrastive_applied: bool = False
    mse_applied: bool = False
    insert_outcomes: dict[str, int] = field(default_factory=dict)
    queue_sizes: list[int] = field(default_factory=list)
    ensemble_error: float | None = None


def ensemble(probs_s: np.ndarray, probs_t2: np.ndarray) -> np.ndarray:
    """Elementwise sum of the two posteriors, renormalized per row."""
    probs_s = np.asarray(probs_s, dtype=np.float64)
    probs_t2 = np.asarray(probs_t2, dtype=np.float64)
    if probs_s.shape != probs_t2.shape:
        raise ValueError("prediction shapes differ")
    total = probs_s + probs_t2
    return total / total.sum(axis=1, keepdims=True)


def prior_correct(probs: np.ndarray, gamma: float, num_classes: int) -> np.ndarray:
    """Reweight rows by the smoothed batch label prior and renormalize."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    probs = np.asarray(probs, dtype=np.float64)
    p_hat = probs.mean(axis=0)
    p_bar = (p_hat + gamma) / (1.0 + gamma * num_classes)
    out = probs * p_bar[None, :]
    return out / out.sum(axis=1, keepdims=True)


def _adaptation_forward(spec, params, x):
    """Batch-statistics forward that leaves the running buffers untouched."""
    return forward(spec, params, x, stats_mode=BATCH_STATS, update_running=False)


def _probe_probs(spec, params):
    def fn(x):
        _, logits, _ = _adaptation_forward(spec, params, x)
        return softmax(logits)

    return fn


def _inject_label_noise(labels, noise_ratio, num_classes, rng):
    """Replace a fraction of labels with a uniformly random wrong class."""
    noisy = labels.copy()
    n = int(round(noise_ratio * labels.shape[0]))
    if n == 0:
        return noisy
    idx = rng.choice(labels.shape[0], size=n, replace=False)
    draws = rng.integers(0, num_classes - 1, size=n)
    noisy[idx] = np.where(draws >= labels[idx], draws + 1, draws)
    return noisy


def adapt_step(
    trio: ModelTrio,
    store: PrototypeStore,
    x: np.ndarray,
    cfg: AdaptationConfig,
    rng: np.random.Generator,
    labels: np.ndarray | None = None,
) -> tuple[EnsemblePrediction, StepDiagnostics]:
    """One online step: score, update queues, adapt both learners, predict.

    labels, when given, feed only the ensemble-error diagnostic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("adaptation needs a batch of at least 2")
    spec = trio.spec
    diag = StepDiagnostics()

    # (1) fast teacher scores the batch
    feats_t1, logits_t1, _ = _adaptation_forward(spec, trio.t1, x)
    probs_t1 = softmax(logits_t1)
    pl_clean, _ = reliability.pseudo_labels(probs_t1)
    entropies = reliability.sample_entropies(probs_t1)
    plpd_values = reliability.plpd(
        _probe_probs(spec, trio.t1), x, pl_clean, default_plpd_augmentations(), rng
    )
    pl_queue = _inject_label_noise(pl_clean, cfg.pl_noise_ratio, spec.num_classes, rng)

    # (2) queue maintenance with the fast teacher's features
    outcome_counts = {o.value: 0 for o in InsertOutcome}
    for i in range(x.shape[0]):
        outcome = store.try_insert(int(pl_queue[i]), feats_t1[i], float(entropies[i]), float(plpd_values[i]))
        outcome_counts[outcome.value] += 1
    store.tick()
    diag.insert_outcomes = outcome_counts

    # (3) slow teacher: contrastive + alignment on the disagreement set, IM on the batch
    feats_t2, logits_t2, cache_t2 = _adaptation_forward(spec, trio.t2, x)
    probs_t2 = softmax(logits_t2)
    selected_mask = reliability.select_disagreement(probs_t1, probs_t2, cfg.sigma)
    selected_idx = np.flatnonzero(selected_mask)
    diag.n_selected = int(selected_mask.sum())

    im = losses.im_loss(logits_t2)
    diag.loss_im = im.value

    cl_result = None
    mse_result = None
    proj_input_grad = None
    cache_aug = None
    grad_feats_aug_full = None
    mse_rows = np.empty(0, dtype=np.int64)
    cl_rows = np.empty(0, dtype=np.int64)

    if selected_idx.size > 0 and store.total_entries() > 0:
        x_view = CONTRASTIVE_VIEW_AUG.apply(x, rng)
        feats_aug, _, cache_aug = _adaptation_forward(spec, trio.t2, x_view)

        # contrastive triples need non-degenerate features on both views
        keep = [
            i
            for i in selected_idx
            if np.linalg.norm(feats_t2[i]) > 0.0 and np.linalg.norm(feats_aug[i]) > 0.0
        ]
        cl_rows = np.asarray(keep, dtype=np.int64)
        if cl_rows.size > 0:
            matched = np.stack([store.prototype(store.nearest_prototype(feats_t2[i])[0]) for i in cl_rows])
            blocks = np.concatenate([feats_t2[cl_rows], feats_aug[cl_rows], matched], axis=0)
            _, proj_out, proj_cache = forward(
                trio.projector_spec, trio.projector, blocks, stats_mode=numnet.RUNNING_STATS
            )
            if np.all(np.linalg.norm(proj_out, axis=1) > 0.0):
                batch = losses.ContrastiveBatch.from_blocks(
                    proj_out[: cl_rows.size],
                    proj_out[cl_rows.size : 2 * cl_rows.size],
                    proj_out[2 * cl_rows.size :],
                    temperature=cfg.tau,
                )
                cl_result = losses.contrastive(batch)
                diag.loss_cl = cl_result.value
                diag.contrastive_applied = True
            else:
                cl_rows = np.empty(0, dtype=np.int64)

        # alignment against the pseudo-label prototype, where one exists
        mse_rows = np.asarray(
            [i for i in selected_idx if len(store.queues[int(pl_queue[i])]) > 0], dtype=np.int64
        )
        if mse_rows.size > 0:
            protos = np.stack([store.prototype(int(pl_queue[i])) for i in mse_rows])
            mse_result = losses.mse_proto(feats_t2[mse_rows], protos)
            diag.loss_mse = mse_result.value
            diag.mse_applied = True

    objective = losses.t2_objective(cl_result, mse_result, im, cfg.lambda_cl, cfg.lambda_mse, cfg.lambda_im)

    grad_feats_main = np.zeros_like(feats_t2)
    if objective.grad_embeddings is not None:
        n = cl_rows.size
        proj_grads, g = backward(
            trio.projector_spec, trio.projector, proj_cache, objective.grad_embeddings, with_input_grad=True
        )
        grad_feats_main[cl_rows] += g[:n]
        grad_feats_aug_full = np.zeros_like(feats_t2)
        grad_feats_aug_full[cl_rows] = g[n : 2 * n]
        # rows 2n: are prototypes, held constant
        proj_mask, _ = trainable_mask(trio.projector_spec, trio.projector, FULL)
        sgd_step(trio.projector, proj_grads, cfg.lr_t2, proj_mask)
    if objective.grad_features is not None:
        grad_feats_main[mse_rows] += objective.grad_features

    grads_t2 = backward(spec, trio.t2, cache_t2, objective.grad_logits, grad_feats_main)
    if grad_feats_aug_full is not None:
        grads_aug = backward(spec, trio.t2, cache_aug, np.zeros_like(logits_t2), grad_feats_aug_full)
        grads_t2 = add_grads(grads_t2, grads_aug)
    t2_mask, _ = trainable_mask(spec, trio.t2, BN_ONLY)
    sgd_step(trio.t2, grads_t2, cfg.lr_t2, t2_mask)

    # (4) pull a random sliver of the slow teacher back to the source
    stochastic_restore(trio.t2, trio.source, cfg.restore_prob, rng)

    # (5) student self-training against both teachers
    feats_s, logits_s, cache_s = _adaptation_forward(spec, trio.student, x)
    probs_s = softmax(logits_s)
    sce_t1 = losses.sce(probs_t1, logits_s)
    sce_t2 = losses.sce(probs_t2, logits_s)
    diag.loss_sce = sce_t1.value + sce_t2.value
    grads_s = backward(spec, trio.student, cache_s, sce_t1.grad + sce_t2.grad)
    student_mask, _ = trainable_mask(spec, trio.student, cfg.student_mode)
    sgd_step(trio.student, grads_s, cfg.lr_student, student_mask)

    # (6) fast teacher tracks the student
    ema_update(trio.t1, trio.student, cfg.alpha)

    # (7) prediction from the pre-update forwards of this batch
    combined = ensemble(probs_s, probs_t2)
    corrected = prior_correct(combined, cfg.prior_gamma(spec.num_classes), spec.num_classes)
    pred_labels = corrected.argmax(axis=1)
    prediction = EnsemblePrediction(probs=corrected, labels=pred_labels)

    diag.queue_sizes = store.queue_sizes()
    if labels is not None:
        diag.ensemble_error = float(np.mean(pred_labels != np.asarray(labels)))
    if not np.all(np.isfinite(corrected)):
        raise FloatingPointError("non-finite prediction probabilities")
    return prediction, diag
