"""Dense numerics: a small BN-MLP with exact hand-derived gradients.

Everything is float64. Layers are linear -> (optional) batch norm ->
activation; the last layer is always a plain linear classifier head.
The forward pass records enough state to backpropagate exactly,
including through batch statistics when they are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

BN_EPS = 1e-5
BATCH_STATS = "batch"
RUNNING_STATS = "running"

RELU = "relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    has_bn: bool = False
    activation: str = RELU

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in (RELU, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    feature_layer_index: int
    num_classes: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        last = self.layers[-1]
        if last.out_dim != self.num_classes:
            raise ValueError("last layer width must equal num_classes")
        if last.activation != IDENTITY or last.has_bn:
            raise ValueError("final layer must be identity-activated with no batch norm")
        if not 0 <= self.feature_layer_index < len(self.layers) - 1 and len(self.layers) > 1:
            raise ValueError("feature_layer_index must come before the final layer")
        if len(self.layers) == 1 and self.feature_layer_index != 0:
            raise ValueError("single-layer network must use feature_layer_index 0")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_dim != cur.in_dim:
                raise ValueError("consecutive layer dims do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[self.feature_layer_index].out_dim


def mlp_spec(in_dim: int, hidden: list[int] | tuple[int, ...], num_classes: int) -> NetworkSpec:
    """BN+ReLU hidden layers and a plain linear head; features are the last hidden output."""
    dims = [in_dim, *hidden]
    layers = [LayerSpec(dims[i], dims[i + 1], has_bn=True, activation=RELU) for i in range(len(hidden))]
    layers.append(LayerSpec(dims[-1], num_classes, has_bn=False, activation=IDENTITY))
    return NetworkSpec(tuple(layers), feature_layer_index=max(0, len(layers) - 2), num_classes=num_classes)


@dataclass
class LayerParams:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None


@dataclass
class NetworkParams:
    layers: list[LayerParams]
    bn_momentum: float = 0.1


@dataclass
class LayerGrads:
    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None


@dataclass
class ParamGrads:
    layers: list[LayerGrads]


@dataclass
class _LayerCache:
    x_in: np.ndarray  # layer input
    pre: np.ndarray  # pre-BN pre-activation
    post: np.ndarray  # post-activation output
    act_in: np.ndarray  # input to the activation (post-BN affine)
    x_hat: np.ndarray | None = None  # normalized pre-activations
    inv_std: np.ndarray | None = None


@dataclass
class ForwardCache:
    mode: str
    layers: list[_LayerCache] = field(default_factory=list)


def init_params(spec: NetworkSpec, rng: np.random.Generator, bn_momentum: float = 0.1) -> NetworkParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, identity BN affine."""
    layers = []
    for ls in spec.layers:
        bound = np.sqrt(6.0 / (ls.in_dim + ls.out_dim))
        lp = LayerParams(
            weight=rng.uniform(-bound, bound, size=(ls.in_dim, ls.out_dim)),
            bias=np.zeros(ls.out_dim),
        )
        if ls.has_bn:
            lp.gamma = np.ones(ls.out_dim)
            lp.beta = np.zeros(ls.out_dim)
            lp.running_mean = np.zeros(ls.out_dim)
            lp.running_var = np.ones(ls.out_dim)
        layers.append(lp)
    return NetworkParams(layers=layers, bn_momentum=bn_momentum)


def clone_params(params: NetworkParams) -> NetworkParams:
    layers = []
    for lp in params.layers:
        layers.append(
            LayerParams(
                weight=lp.weight.copy(),
                bias=lp.bias.copy(),
                gamma=None if lp.gamma is None else lp.gamma.copy(),
                beta=None if lp.beta is None else lp.beta.copy(),
                running_mean=None if lp.running_mean is None else lp.running_mean.copy(),
                running_var=None if lp.running_var is None else lp.running_var.copy(),
            )
        )
    return NetworkParams(layers=layers, bn_momentum=params.bn_momentum)


TRAINABLE_LEAF_NAMES = ("weight", "bias", "gamma", "beta")


def trainable_leaves(params: NetworkParams):
    """Yield (path, array) for every trainable leaf, in a fixed order."""
    for i, lp in enumerate(params.layers):
        for name in TRAINABLE_LEAF_NAMES:
            arr = getattr(lp, name)
            if arr is not None:
                yield f"layer{i}.{name}", arr


def grad_leaves(grads: ParamGrads):
    for i, lg in enumerate(grads.layers):
        for name in TRAINABLE_LEAF_NAMES:
            arr = getattr(lg, name)
            if arr is not None:
                yield f"layer{i}.{name}", arr


def zero_grads(params: NetworkParams) -> ParamGrads:
    layers = []
    for lp in params.layers:
        layers.append(
            LayerGrads(
                weight=np.zeros_like(lp.weight),
                bias=np.zeros_like(lp.bias),
                gamma=None if lp.gamma is None else np.zeros_like(lp.gamma),
                beta=None if lp.beta is None else np.zeros_like(lp.beta),
            )
        )
    return ParamGrads(layers=layers)


def add_grads(a: ParamGrads, b: ParamGrads) -> ParamGrads:
    out = ParamGrads(layers=[])
    for la, lb in zip(a.layers, b.layers):
        out.layers.append(
            LayerGrads(
                weight=la.weight + lb.weight,
                bias=la.bias + lb.bias,
                gamma=None if la.gamma is None else la.gamma + lb.gamma,
                beta=None if la.beta is None else la.beta + lb.beta,
            )
        )
    return out


def _check_input(spec: NetworkSpec, x: np.ndarray, stats_mode: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input must be 2-D, got shape {x.shape}")
    if x.shape[1] != spec.in_dim:
        raise ValueError(f"input width {x.shape[1]} does not match network input dim {spec.in_dim}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    if stats_mode == BATCH_STATS and x.shape[0] < 2:
        raise ValueError("batch-statistics mode needs a batch of at least 2")
    if stats_mode not in (BATCH_STATS, RUNNING_STATS):
        raise ValueError(f"unknown stats mode {stats_mode!r}")
    return x


def forward(
    spec: NetworkSpec,
    params: NetworkParams,
    x: np.ndarray,
    stats_mode: str = BATCH_STATS,
    update_running: bool = True,
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the network, returning (features, logits, cache).

    In batch-statistics mode BN normalizes by the current batch and, unless
    update_running is False, folds the batch statistics into the running
    buffers with the configured momentum. Running-statistics mode never
    touches the buffers.
    """
    x = _check_input(spec, x, stats_mode)
    cache = ForwardCache(mode=stats_mode)
    h = x
    features = None
    for i, (ls, lp) in enumerate(zip(spec.layers, params.layers)):
        if h.shape[1] != ls.in_dim:
            raise ValueError(f"layer {i}: input width {h.shape[1]} != {ls.in_dim}")
        pre = h @ lp.weight + lp.bias
        if ls.has_bn:
            if stats_mode == BATCH_STATS:
                mu = pre.mean(axis=0)
                var = pre.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                x_hat = (pre - mu) * inv_std
                if update_running:
                    m = params.bn_momentum
                    lp.running_mean = (1.0 - m) * lp.running_mean + m * mu
                    lp.running_var = (1.0 - m) * lp.running_var + m * var
            else:
                inv_std = 1.0 / np.sqrt(lp.running_var + BN_EPS)
                x_hat = (pre - lp.running_mean) * inv_std
            act_in = lp.gamma * x_hat + lp.beta
        else:
            x_hat = None
            inv_std = None
            act_in = pre
        post = np.maximum(act_in, 0.0) if ls.activation == RELU else act_in
        cache.layers.append(_LayerCache(x_in=h, pre=pre, post=post, act_in=act_in, x_hat=x_hat, inv_std=inv_std))
        if i == spec.feature_layer_index:
            features = post
        h = post
    return features, h, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under row-max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def backward(
    spec: NetworkSpec,
    params: NetworkParams,
    cache: ForwardCache,
    grad_logits: np.ndarray,
    grad_features: np.ndarray | None = None,
    with_input_grad: bool = False,
) -> ParamGrads | tuple[ParamGrads, np.ndarray]:
    """Exact gradients for the loss whose upstream gradients are given.

    grad_features, when present, is injected at the feature layer's
    post-activation output. BN gradients account for the batch mean and
    variance when the cached forward ran in batch-statistics mode. With
    with_input_grad the gradient wrt the network input is returned too.
    """
    if len(cache.layers) != len(spec.layers):
        raise ValueError("cache does not match network spec")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != cache.layers[-1].post.shape:
        raise ValueError("grad_logits shape mismatch")
    grads = zero_grads(params)
    g = grad_logits
    for i in range(len(spec.layers) - 1, -1, -1):
        ls, lp, lc = spec.layers[i], params.layers[i], cache.layers[i]
        if grad_features is not None and i == spec.feature_layer_index:
            if grad_features.shape != lc.post.shape:
                raise ValueError("grad_features shape mismatch")
            g = g + grad_features
        if ls.activation == RELU:
            g = g * (lc.act_in > 0.0)
        if ls.has_bn:
            grads.layers[i].gamma = (g * lc.x_hat).sum(axis=0)
            grads.layers[i].beta = g.sum(axis=0)
            g_hat = g * lp.gamma
            if cache.mode == BATCH_STATS:
                n = lc.pre.shape[0]
                s1 = g_hat.sum(axis=0)
                s2 = (g_hat * lc.x_hat).sum(axis=0)
                g = (lc.inv_std / n) * (n * g_hat - s1 - lc.x_hat * s2)
            else:
                g = g_hat * lc.inv_std
        grads.layers[i].weight = lc.x_in.T @ g
        grads.layers[i].bias = g.sum(axis=0)
        g = g @ lp.weight.T
    return (grads, g) if with_input_grad else grads


def sgd_step(params: NetworkParams, grads: ParamGrads, lr: float, mask) -> NetworkParams:
    """In-place masked SGD update; running statistics are never touched."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for (path, leaf), (gpath, grad) in zip(trainable_leaves(params), grad_leaves(grads)):
        if path != gpath:
            raise ValueError(f"gradient tree mismatch at {path} vs {gpath}")
        if leaf.shape != grad.shape:
            raise ValueError(f"shape mismatch at {path}")
        if mask.selected(path):
            leaf -= lr * grad
    return params


def finite_diff_check(
    spec: NetworkSpec,
    params: NetworkParams,
    scalar_loss: Callable[[NetworkParams], tuple[float, ParamGrads]],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    scalar_loss maps params to (value, analytic ParamGrads); only the value
    is used for the numeric side. Returns the worst case over every
    trainable scalar.
    """
    if not 0 < eps < 1e-2:
        raise ValueError("eps must lie in (0, 1e-2)")
    base_value, analytic = scalar_loss(params)
    if not np.isfinite(base_value):
        raise ValueError("non-finite loss")
    analytic_by_path = dict(grad_leaves(analytic))
    worst = 0.0
    for path, leaf in trainable_leaves(params):
        a = analytic_by_path[path]
        flat = leaf.reshape(-1)
        a_flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up, _ = scalar_loss(params)
            flat[j] = orig - eps
            down, _ = scalar_loss(params)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("non-finite loss during perturbation")
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(a_flat[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[j] - numeric) / denom)
    return worst


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    g_flat = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = f(x)
        flat[j] = orig - eps
        down = f(x)
        flat[j] = orig
        g_flat[j] = (up - down) / (2.0 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def snapshot_running_stats(params: NetworkParams) -> list[tuple[np.ndarray, np.ndarray] | None]:
    out = []
    for lp in params.layers:
        if lp.running_mean is None:
            out.append(None)
        else:
            out.append((lp.running_mean.copy(), lp.running_var.copy()))
    return out


def restore_running_stats(params: NetworkParams, snap) -> None:
    for lp, entry in zip(params.layers, snap):
        if entry is not None:
            lp.running_mean, lp.running_var = entry[0].copy(), entry[1].copy()
