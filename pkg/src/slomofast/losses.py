"""Loss functions of the adaptation method: value plus exact gradient.

Each loss returns a LossResult whose grad is taken with respect to the
argument named in the function docstring. Probabilities inside logarithms
are clamped below at LOG_FLOOR so one-hot targets stay finite; gradients
are exact for the clamped objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numnet import softmax

LOG_FLOOR = 1e-12


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_FLOOR))


def sce(p: np.ndarray, q_logits: np.ndarray) -> LossResult:
    """Symmetric cross-entropy between p and softmax(q_logits); grad wrt q_logits.

    Batch mean of -sum(p log q) - sum(q log p).
    """
    p = np.asarray(p, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p.shape != q_logits.shape:
        raise ValueError("p and q_logits shapes differ")
    b = p.shape[0]
    q = softmax(q_logits)
    log_q = _clamped_log(q)
    log_p = _clamped_log(p)
    value = float(np.mean(-(p * log_q).sum(axis=1) - (q * log_p).sum(axis=1)))

    # term A: -sum_c p_c log q_c. Where q_c sits at the clamp floor the log is
    # constant, so those coordinates contribute nothing through q.
    active = q > LOG_FLOOR
    pa = p * active
    grad_a = q * pa.sum(axis=1, keepdims=True) - pa
    # term B: -sum_c q_c log p_c, with log p constant wrt the logits.
    s = (q * log_p).sum(axis=1, keepdims=True)
    grad_b = -q * (log_p - s)
    return LossResult(value=value, grad=(grad_a + grad_b) / b)


def sce_value(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric cross-entropy of two probability matrices (no gradient)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.mean(-(p * _clamped_log(q)).sum(axis=1) - (q * _clamped_log(p)).sum(axis=1)))


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy of one probability vector, natural log, 0 log 0 := 0."""
    probs = np.asarray(probs, dtype=np.float64)
    nz = probs[probs > 0.0]
    return float(-(nz * np.log(nz)).sum())


def row_entropies(probs: np.ndarray) -> np.ndarray:
    """Per-row entropies of a probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    terms = np.where(probs > 0.0, probs * np.log(np.maximum(probs, LOG_FLOOR)), 0.0)
    return -terms.sum(axis=1)


@dataclass
class ContrastiveBatch:
    """Embeddings ordered as [selected | augmented views | matched prototypes].

    view_groups lists the index triples (i, i+n, i+2n); together they
    partition all 3n rows.
    """

    embeddings: np.ndarray  # (3n, e)
    view_groups: list[tuple[int, int, int]]
    temperature: float

    @classmethod
    def from_blocks(
        cls,
        selected: np.ndarray,
        augmented: np.ndarray,
        prototypes: np.ndarray,
        temperature: float,
    ) -> "ContrastiveBatch":
        n = selected.shape[0]
        if n < 1:
            raise ValueError("contrastive batch needs at least one selected sample")
        if augmented.shape != selected.shape or prototypes.shape != selected.shape:
            raise ValueError("block shapes differ")
        emb = np.concatenate([selected, augmented, prototypes], axis=0)
        groups = [(i, i + n, i + 2 * n) for i in range(n)]
        return cls(embeddings=np.asarray(emb, dtype=np.float64), view_groups=groups, temperature=temperature)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        m = self.embeddings.shape[0]
        seen = sorted(i for g in self.view_groups for i in g)
        if seen != list(range(m)):
            raise ValueError("view groups must partition the embedding rows")


def contrastive(batch: ContrastiveBatch) -> LossResult:
    """Multi-view InfoNCE over cosine similarities; grad wrt the raw embeddings.

    Every row is L2-normalized internally; each anchor contrasts its two
    group mates against all other rows.
    """
    z = np.asarray(batch.embeddings, dtype=np.float64)
    m = z.shape[0]
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding")
    u = z / norms[:, None]
    sims = u @ u.T
    tau = batch.temperature

    group_of = {}
    for g in batch.view_groups:
        for i in g:
            group_of[i] = g

    logits = sims / tau
    np.fill_diagonal(logits, -np.inf)  # A(i) excludes the anchor itself
    row_max = logits.max(axis=1, keepdims=True)
    exp_shift = np.exp(logits - row_max)
    denom = exp_shift.sum(axis=1, keepdims=True)
    log_softmax = logits - row_max - np.log(denom)
    p = exp_shift / denom  # softmax over A(i), zero on the diagonal

    value = 0.0
    grad_s = np.zeros((m, m))  # dL/d sims
    for i in range(m):
        mates = [v for v in group_of[i] if v != i]
        for v in mates:
            value -= log_softmax[i, v]
            grad_s[i, v] -= 1.0 / tau
        grad_s[i] += (len(mates) / tau) * p[i]

    g_u = (grad_s + grad_s.T) @ u
    inner = (g_u * u).sum(axis=1, keepdims=True)
    grad = (g_u - inner * u) / norms[:, None]
    return LossResult(value=float(value), grad=grad)


def mse_proto(features: np.ndarray, prototypes: np.ndarray) -> LossResult:
    """Mean squared distance between features and their matched prototypes; grad wrt features."""
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if features.shape != prototypes.shape:
        raise ValueError("feature/prototype shapes differ")
    n = features.shape[0]
    if n < 1:
        raise ValueError("empty feature batch")
    diff = features - prototypes
    value = float((diff * diff).sum() / n)
    return LossResult(value=value, grad=(2.0 / n) * diff)


def im_loss(logits: np.ndarray) -> LossResult:
    """Information maximization: mean per-sample entropy minus marginal entropy.

    Minimizing sharpens individual predictions while spreading the batch
    marginal across classes. Grad wrt the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    b = logits.shape[0]
    if b < 2:
        raise ValueError("information maximization needs a batch of at least 2")
    p = softmax(logits)
    log_p = _clamped_log(p)
    h_rows = -(p * log_p).sum(axis=1)
    q_bar = p.mean(axis=0)
    log_q = _clamped_log(q_bar)
    h_marginal = float(-(q_bar * log_q).sum())
    value = float(h_rows.mean()) - h_marginal

    grad_mean_h = -p * (log_p + h_rows[:, None]) / b
    proj = (p * log_q[None, :]).sum(axis=1, keepdims=True)
    grad_marginal = p * (log_q[None, :] - proj) / b  # d(-H(q_bar))/dlogits
    return LossResult(value=value, grad=grad_mean_h + grad_marginal)


@dataclass
class T2Objective:
    value: float
    grad_embeddings: np.ndarray | None
    grad_features: np.ndarray | None
    grad_logits: np.ndarray | None


def t2_objective(
    cl: LossResult | None,
    mse: LossResult | None,
    im: LossResult | None,
    lambda_cl: float,
    lambda_mse: float,
    lambda_im: float,
) -> T2Objective:
    """Weighted sum of the slow-teacher losses with per-argument routed gradients."""
    for lam in (lambda_cl, lambda_mse, lambda_im):
        if lam < 0:
            raise ValueError("loss weights must be >= 0")
    value = 0.0
    g_emb = g_feat = g_log = None
    if cl is not None:
        value += lambda_cl * cl.value
        g_emb = lambda_cl * cl.grad
    if mse is not None:
        value += lambda_mse * mse.value
        g_feat = lambda_mse * mse.grad
    if im is not None:
        value += lambda_im * im.value
        g_log = lambda_im * im.grad
    return T2Objective(value=value, grad_embeddings=g_emb, grad_features=g_feat, grad_logits=g_log)
