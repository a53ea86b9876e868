"""Sample-reliability scoring: entropy, augmentation sensitivity, and gates.

Augmentations are vector-space analogues of patch shuffling and center
occlusion: they preserve shape and are deterministic under a fixed RNG
stream, which the caller owns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import row_entropies

SEGMENT_SHUFFLE = "segment_shuffle"
CENTER_OCCLUSION = "center_occlusion"
ADDITIVE_JITTER = "additive_jitter"

DEFAULT_SEGMENTS = 4
DEFAULT_OCCLUDED_FRACTION = 0.25
DEFAULT_JITTER_SCALE = 0.05


@dataclass(frozen=True)
class Augmentation:
    kind: str
    param: float = 0.0

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d = x.shape[1]
        if self.kind == SEGMENT_SHUFFLE:
            k = int(self.param)
            if k < 1:
                raise ValueError("segment count must be >= 1")
            bounds = np.linspace(0, d, k + 1).astype(int)
            order = rng.permutation(k)
            parts = [x[:, bounds[j]:bounds[j + 1]] for j in order]
            return np.concatenate(parts, axis=1)
        if self.kind == CENTER_OCCLUSION:
            frac = float(self.param)
            if not 0.0 <= frac <= 1.0:
                raise ValueError("occluded fraction must lie in [0, 1]")
            n = int(round(frac * d))
            out = x.copy()
            start = (d - n) // 2
            out[:, start:start + n] = 0.0
            return out
        if self.kind == ADDITIVE_JITTER:
            return x + rng.normal(0.0, float(self.param), size=x.shape)
        raise ValueError(f"unknown augmentation kind {self.kind!r}")


def default_plpd_augmentations() -> list[Augmentation]:
    return [
        Augmentation(SEGMENT_SHUFFLE, DEFAULT_SEGMENTS),
        Augmentation(CENTER_OCCLUSION, DEFAULT_OCCLUDED_FRACTION),
    ]


@dataclass
class ReliabilityScores:
    entropy: np.ndarray  # per sample
    plpd: np.ndarray  # per sample
    pseudo_label: np.ndarray  # class index per sample


def pseudo_labels(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels and their probabilities; ties go to the lowest class index."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = probs.argmax(axis=1)
    return labels, probs[np.arange(probs.shape[0]), labels]


def sample_entropies(probs: np.ndarray) -> np.ndarray:
    return row_entropies(probs)


def plpd(
    model_fwd: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
    augmentations: list[Augmentation],
    rng: np.random.Generator,
) -> np.ndarray:
    """Pseudo-label probability drop under augmentation, one draw per kind.

    model_fwd maps a batch to probabilities and must not carry side effects;
    the same callable scores the clean and the augmented inputs.
    """
    if not augmentations:
        raise ValueError("at least one augmentation is required")
    x = np.asarray(x, dtype=np.float64)
    idx = np.arange(x.shape[0])
    clean = model_fwd(x)[idx, labels]
    aug_mean = np.zeros_like(clean)
    for aug in augmentations:
        x_aug = aug.apply(x, rng)
        if x_aug.shape != x.shape:
            raise ValueError("augmentation changed the batch shape")
        aug_mean += model_fwd(x_aug)[idx, labels]
    aug_mean /= len(augmentations)
    return clean - aug_mean


def dual_criterion(entropy: float, plpd_value: float, sigma: float, delta: float) -> bool:
    """Admission gate: confident (entropy <= sigma) and stable (plpd >= delta)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return entropy <= sigma and plpd_value >= delta


def select_disagreement(probs_t1: np.ndarray, probs_t2: np.ndarray, sigma: float) -> np.ndarray:
    """Indicator of samples where the fast teacher is confident and the slow one is not."""
    probs_t1 = np.asarray(probs_t1, dtype=np.float64)
    probs_t2 = np.asarray(probs_t2, dtype=np.float64)
    if probs_t1.shape != probs_t2.shape:
        raise ValueError("batch shapes differ")
    h1 = row_entropies(probs_t1)
    h2 = row_entropies(probs_t2)
    return ((h1 <= sigma) & (h2 > sigma)).astype(np.int64)
