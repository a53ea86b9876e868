"""Student, fast teacher, slow teacher, frozen source, and the projector.

All four network parameter sets share one spec and start as copies of the
source snapshot, which nothing in the system may mutate afterwards. The
projector is a small two-layer head used only for contrastive alignment.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .numnet import (
    IDENTITY,
    RELU,
    LayerSpec,
    NetworkParams,
    NetworkSpec,
    clone_params,
    init_params,
    trainable_leaves,
)

BN_ONLY = "bn_only"
FULL = "full"


@dataclass
class TrainableMask:
    mode: str
    selected_paths: frozenset[str]

    def selected(self, path: str) -> bool:
        return path in self.selected_paths


def trainable_mask(spec: NetworkSpec, params: NetworkParams, mode: str) -> tuple[TrainableMask, float]:
    """Build the per-leaf mask for a mode and report the selected fraction of scalars."""
    if mode not in (BN_ONLY, FULL):
        raise ValueError(f"unknown mask mode {mode!r}")
    selected = set()
    total = 0
    chosen = 0
    for path, leaf in trainable_leaves(params):
        total += leaf.size
        is_bn = path.endswith(".gamma") or path.endswith(".beta")
        if mode == FULL or is_bn:
            selected.add(path)
            chosen += leaf.size
    if mode == BN_ONLY and chosen == 0:
        warnings.warn("bn_only mask selects nothing: network has no batch norm layers")
    fraction = chosen / total if total else 0.0
    return TrainableMask(mode=mode, selected_paths=frozenset(selected)), fraction


def projector_spec(feature_dim: int) -> NetworkSpec:
    """Two-layer ReLU head mapping features to half their width, no batch norm."""
    out_dim = max(1, feature_dim // 2)
    return NetworkSpec(
        layers=(
            LayerSpec(feature_dim, feature_dim, has_bn=False, activation=RELU),
            LayerSpec(feature_dim, out_dim, has_bn=False, activation=IDENTITY),
        ),
        feature_layer_index=0,
        num_classes=out_dim,
    )


@dataclass
class ModelTrio:
    spec: NetworkSpec
    student: NetworkParams
    t1: NetworkParams
    t2: NetworkParams
    source: NetworkParams  # frozen snapshot, never mutated
    projector_spec: NetworkSpec
    projector: NetworkParams

    @classmethod
    def from_source(cls, spec: NetworkSpec, source: NetworkParams, rng: np.random.Generator) -> "ModelTrio":
        pspec = projector_spec(spec.feature_dim)
        return cls(
            spec=spec,
            student=clone_params(source),
            t1=clone_params(source),
            t2=clone_params(source),
            source=clone_params(source),
            projector_spec=pspec,
            projector=init_params(pspec, rng),
        )

    def snapshot(self) -> "ModelTrio":
        """Deep copy for side-effect-free evaluation probes."""
        return ModelTrio(
            spec=self.spec,
            student=clone_params(self.student),
            t1=clone_params(self.t1),
            t2=clone_params(self.t2),
            source=clone_params(self.source),
            projector_spec=self.projector_spec,
            projector=clone_params(self.projector),
        )


def ema_update(t1: NetworkParams, student: NetworkParams, alpha: float) -> NetworkParams:
    """theta_t1 <- alpha * theta_t1 + (1 - alpha) * theta_student, every leaf
    including the running statistics. Mutates and returns t1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    for lt, ls in zip(t1.layers, student.layers):
        for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
            a = getattr(lt, name)
            b = getattr(ls, name)
            if (a is None) != (b is None):
                raise ValueError("parameter trees differ")
            if a is not None:
                a *= alpha
                a += (1.0 - alpha) * b
    return t1


def stochastic_restore(
    t2: NetworkParams, source: NetworkParams, restore_prob: float, rng: np.random.Generator
) -> NetworkParams:
    """Per trainable scalar, with probability restore_prob copy the source value
    back. Running statistics are never restored. Mutates and returns t2."""
    if not 0.0 <= restore_prob <= 1.0:
        raise ValueError("restore_prob must lie in [0, 1]")
    if restore_prob == 0.0:
        return t2
    for (path, leaf), (spath, src) in zip(trainable_leaves(t2), trainable_leaves(source)):
        if path != spath or leaf.shape != src.shape:
            raise ValueError("parameter trees differ")
        mask = rng.random(leaf.shape) < restore_prob
        leaf[mask] = src[mask]
    return t2


def params_checksum(params: NetworkParams) -> str:
    """Stable digest over every leaf, used to assert the source stays frozen."""
    h = hashlib.sha256()
    for lp in params.layers:
        for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
            arr = getattr(lp, name)
            h.update(name.encode())
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr(params.bn_momentum).encode())
    return h.hexdigest()


def save_params(params: NetworkParams, path) -> None:
    """Exact binary checkpoint (npz); round-trips bit-for-bit."""
    arrays = {"bn_momentum": np.array(params.bn_momentum), "n_layers": np.array(len(params.layers))}
    for i, lp in enumerate(params.layers):
        for name in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
            arr = getattr(lp, name)
            if arr is not None:
                arrays[f"layer{i}.{name}"] = arr
    np.savez(path, **arrays)


def load_params(path) -> NetworkParams:
    from .numnet import LayerParams

    with np.load(path) as data:
        n_layers = int(data["n_layers"])
        layers = []
        for i in range(n_layers):
            def get(name):
                key = f"layer{i}.{name}"
                return data[key].copy() if key in data else None

            layers.append(
                LayerParams(
                    weight=get("weight"),
                    bias=get("bias"),
                    gamma=get("gamma"),
                    beta=get("beta"),
                    running_mean=get("running_mean"),
                    running_var=get("running_var"),
                )
            )
        return NetworkParams(layers=layers, bn_momentum=float(data["bn_momentum"]))
