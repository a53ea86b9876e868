"""Synthetic classification tasks, corruption families, and stream schedules.

A task draws gaussian class clusters on a seeded unit sphere. Five vector
corruption families at five severity levels stand in for image corruption
groups; each (family, severity, variant-seed) triple is a domain with a
fixed corrupted evaluation set, and streams batch those sets in the order
a given arrival setting prescribes. True labels ride along for metric
computation only.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numnet import (
    BATCH_STATS,
    RUNNING_STATS,
    NetworkParams,
    NetworkSpec,
    backward,
    forward,
    init_params,
    sgd_step,
    softmax,
)
from .trio import FULL, trainable_mask

ADDITIVE_NOISE = "additive_noise"
SMOOTH = "smooth"
CONTRAST_SCALE = "contrast_scale"
OCCLUSION = "occlusion"
ROTATION = "rotation"
FAMILIES = (ADDITIVE_NOISE, SMOOTH, CONTRAST_SCALE, OCCLUSION, ROTATION)

SETTINGS = (
    "continual",
    "mixed",
    "gradual",
    "episodic",
    "cyclic",
    "cross_group",
    "easy2hard",
    "hard2easy",
    "mixed_after_continual",
    "continual_after_mixed",
)

GRADUAL_RAMP = (1, 2, 3, 4, 5, 4, 3, 2, 1)


class SourceTrainingError(RuntimeError):
    """The source model failed to reach the required clean accuracy."""


@dataclass(frozen=True)
class Corruption:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown corruption family {self.family!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError("severity must lie in 0..5 (0 is the identity)")


@dataclass(frozen=True)
class Domain:
    name: str
    corruption: Corruption
    group: str


def make_domain(family: str, severity: int = 5, variant: int = 0) -> Domain:
    return Domain(
        name=f"{family}-v{variant}-s{severity}",
        corruption=Corruption(family, severity, seed=variant),
        group=family,
    )


def default_domains(severity: int = 5) -> list[Domain]:
    """One domain per corruption family, the default continual lineup."""
    return [make_domain(fam, severity, variant=0) for fam in FAMILIES]


def default_groups(severity: int = 5, variants: int = 2) -> list[list[Domain]]:
    """One group per family with seed variants, for cyclic and cross-group runs."""
    return [[make_domain(fam, severity, variant=v) for v in range(variants)] for fam in FAMILIES]


def corrupt(batch: np.ndarray, corruption: Corruption, rng: np.random.Generator) -> np.ndarray:
    """Apply a corruption; shape-preserving, identity at severity 0.

    Stochastic families draw from rng; structural ones (rotation planes)
    derive from the corruption's own seed so a domain stays one fixed
    transformation across batches.
    """
    x = np.asarray(batch, dtype=np.float64)
    s = corruption.severity
    if s == 0:
        return x.copy()
    d = x.shape[1]
    if corruption.family == ADDITIVE_NOISE:
        return x + rng.normal(0.0, 0.1 * s, size=x.shape)
    if corruption.family == CONTRAST_SCALE:
        return x * (1.0 - 0.15 * s)
    if corruption.family == OCCLUSION:
        n = int(round(0.1 * s * d))
        out = x.copy()
        start = (d - n) // 2
        out[:, start:start + n] = 0.0
        return out
    if corruption.family == SMOOTH:
        half = s
        padded = np.cumsum(x, axis=1)
        padded = np.concatenate([np.zeros((x.shape[0], 1)), padded], axis=1)
        lo = np.maximum(np.arange(d) - half, 0)
        hi = np.minimum(np.arange(d) + half + 1, d)
        return (padded[:, hi] - padded[:, lo]) / (hi - lo)
    if corruption.family == ROTATION:
        plane_rng = np.random.default_rng(np.random.SeedSequence((9001, corruption.seed)))
        order = plane_rng.permutation(d)
        angle = 0.25 * s
        out = x.copy()
        c, sn = np.cos(angle), np.sin(angle)
        for k in range(min(s, d // 2)):
            i, j = order[2 * k], order[2 * k + 1]
            xi, xj = out[:, i].copy(), out[:, j].copy()
            out[:, i] = c * xi - sn * xj
            out[:, j] = sn * xi + c * xj
        return out
    raise ValueError(f"unknown corruption family {corruption.family!r}")


def _stable_hash(name: str) -> int:
    return zlib.crc32(name.encode())


@dataclass
class SyntheticTask:
    num_classes: int
    input_dim: int
    base_noise: float
    seed: int
    class_means: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    clean_eval_x: np.ndarray
    clean_eval_y: np.ndarray
    _domain_cache: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def n_eval(self) -> int:
        return self.clean_eval_x.shape[0]

    def domain_eval(self, domain: Domain) -> tuple[np.ndarray, np.ndarray]:
        """The domain's fixed corrupted evaluation set (cached)."""
        if domain.name not in self._domain_cache:
            rng = np.random.default_rng(
                np.random.SeedSequence((self.seed, domain.corruption.seed, domain.corruption.severity,
                                        _stable_hash(domain.corruption.family)))
            )
            x = corrupt(self.clean_eval_x, domain.corruption, rng)
            self._domain_cache[domain.name] = (x, self.clean_eval_y.copy())
        return self._domain_cache[domain.name]


def _balanced_draw(means: np.ndarray, n: int, base_noise: float, rng: np.random.Generator):
    num_classes = means.shape[0]
    y = rng.permutation(np.arange(n) % num_classes)
    x = means[y] + base_noise * rng.normal(size=(n, means.shape[1]))
    return x, y


def make_task(
    seed: int,
    num_classes: int = 10,
    input_dim: int = 32,
    n_train: int = 2048,
    n_eval: int = 640,
    base_noise: float = 0.2,
) -> SyntheticTask:
    if num_classes < 2 or input_dim < 4:
        raise ValueError("task needs num_classes >= 2 and input_dim >= 4")
    ss = np.random.SeedSequence(seed)
    means_rng, train_rng, eval_rng = (np.random.default_rng(c) for c in ss.spawn(3))
    means = means_rng.normal(size=(num_classes, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    train_x, train_y = _balanced_draw(means, n_train, base_noise, train_rng)
    eval_x, eval_y = _balanced_draw(means, n_eval, base_noise, eval_rng)
    return SyntheticTask(
        num_classes=num_classes,
        input_dim=input_dim,
        base_noise=base_noise,
        seed=seed,
        class_means=means,
        train_x=train_x,
        train_y=train_y,
        clean_eval_x=eval_x,
        clean_eval_y=eval_y,
    )


def running_stats_error(spec: NetworkSpec, params: NetworkParams, x: np.ndarray, y: np.ndarray) -> float:
    """Plain classification error with running statistics; no side effects."""
    _, logits, _ = forward(spec, params, x, stats_mode=RUNNING_STATS)
    return float(np.mean(logits.argmax(axis=1) != y))


def train_source(
    task: SyntheticTask,
    spec: NetworkSpec,
    epochs: int = 20,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 64,
    target_accuracy: float = 0.95,
) -> NetworkParams:
    """Pre-train the source model on the clean training set.

    Fails loudly if the clean evaluation accuracy (running statistics)
    misses the target after the epoch budget.
    """
    rng = np.random.default_rng(np.random.SeedSequence((task.seed, seed, _stable_hash("source-training"))))
    params = init_params(spec, rng)
    mask, _ = trainable_mask(spec, params, FULL)
    n = task.train_x.shape[0]
    onehot = np.eye(task.num_classes)[task.train_y]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            xb, tb = task.train_x[idx], onehot[idx]
            _, logits, cache = forward(spec, params, xb, stats_mode=BATCH_STATS, update_running=True)
            probs = softmax(logits)
            grad_logits = (probs - tb) / idx.size
            grads = backward(spec, params, cache, grad_logits)
            sgd_step(params, grads, lr, mask)
    acc = 1.0 - running_stats_error(spec, params, task.clean_eval_x, task.clean_eval_y)
    if acc < target_accuracy:
        raise SourceTrainingError(
            f"source model reached {acc:.3f} clean accuracy, below the {target_accuracy:.2f} target"
        )
    return params


def cyclic_index(t: int, num_groups: int, repetition_rate: int) -> int:
    """Group index (1-based) of step t under the cyclic arrival rule."""
    if t < 1 or num_groups < 1 or repetition_rate < 1:
        raise ValueError("t, num_groups and repetition_rate must be >= 1")
    return ((t - 1) % (num_groups * repetition_rate)) % num_groups + 1


def rank_by_source_error(
    task: SyntheticTask, spec: NetworkSpec, source_params: NetworkParams, domains: list[Domain]
) -> list[tuple[Domain, float]]:
    """Domains sorted from low to high frozen-source error (stable)."""
    scored = []
    for dom in domains:
        x, y = task.domain_eval(dom)
        scored.append((dom, running_stats_error(spec, source_params, x, y)))
    return sorted(scored, key=lambda pair: pair[1])


@dataclass
class StreamEvent:
    x: np.ndarray
    y: np.ndarray
    domain_id: int
    domain_name: str
    severity: int
    reset: bool = False


@dataclass
class StreamPlan:
    setting: str
    domains: list[Domain]
    groups: list[list[Domain]] | None = None
    batch_size: int = 64
    seed: int = 0
    cycles: int = 2
    cyclic_mode: str = "protocol"  # "protocol" (groups repeated whole) or "dwell"
    dwell: int = 1  # batches per group visit in dwell mode
    gradual_batches_per_severity: int = 2

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.cycles < 1 or self.dwell < 1:
            raise ValueError("cycles and dwell must be >= 1")
        if self.cyclic_mode not in ("protocol", "dwell"):
            raise ValueError(f"unknown cyclic mode {self.cyclic_mode!r}")


@dataclass
class ScheduleInfo:
    setting: str
    domain_names: list[str]
    event_domains: list[str]
    event_severities: list[int]
    seed: int
    batch_size: int
    cycle_bounds: list[tuple[int, int]] | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "domain_names": self.domain_names,
            "event_domains": self.event_domains,
            "event_severities": self.event_severities,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "cycle_bounds": self.cycle_bounds,
            "extras": self.extras,
        }


class _BatchBank:
    """Per-domain batch lists cut from the fixed domain eval sets.

    The sample order is permuted by a stream keyed on (schedule seed,
    domain name) only, so a domain's batches are identical in every
    setting that includes it.
    """

    def __init__(self, task: SyntheticTask, batch_size: int, seed: int):
        self.task = task
        self.batch_size = batch_size
        self.seed = seed
        self._cache: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}

    def batches(self, domain: Domain) -> list[tuple[np.ndarray, np.ndarray]]:
        if domain.name not in self._cache:
            x, y = self.task.domain_eval(domain)
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, _stable_hash(domain.name))))
            order = rng.permutation(x.shape[0])
            batches = []
            for start in range(0, x.shape[0], self.batch_size):
                idx = order[start:start + self.batch_size]
                if idx.size == 1:
                    raise ValueError(
                        "domain eval size leaves a trailing single-sample batch; adjust n_eval or batch_size"
                    )
                batches.append((x[idx], y[idx]))
            self._cache[domain.name] = batches
        return self._cache[domain.name]


def _domain_visit(bank, domain, domain_id, reset_first=False, limit=None):
    batches = bank.batches(domain)
    if limit is not None:
        batches = batches[:limit]
    for j, (x, y) in enumerate(batches):
        yield StreamEvent(
            x=x,
            y=y,
            domain_id=domain_id,
            domain_name=domain.name,
            severity=domain.corruption.severity,
            reset=reset_first and j == 0,
        )


def _severity_sibling(domain: Domain, severity: int) -> Domain:
    return Domain(
        name=f"{domain.group}-v{domain.corruption.seed}-s{severity}",
        corruption=Corruption(domain.group, severity, seed=domain.corruption.seed),
        group=domain.group,
    )


def build_schedule(
    plan: StreamPlan,
    task: SyntheticTask,
    spec: NetworkSpec | None = None,
    source_params: NetworkParams | None = None,
) -> tuple[Iterator[StreamEvent], ScheduleInfo]:
    """Realize one arrival setting as (event iterator, serializable description)."""
    bank = _BatchBank(task, plan.batch_size, plan.seed)
    domains = list(plan.domains)
    dom_index = {d.name: i for i, d in enumerate(domains)}
    groups = plan.groups
    if groups is None:
        by_group: dict[str, list[Domain]] = {}
        for d in domains:
            by_group.setdefault(d.group, []).append(d)
        groups = list(by_group.values())

    events: list[StreamEvent] = []
    cycle_bounds = None
    extras: dict = {}

    def continual_events(ordered, reset=False):
        out = []
        for dom in ordered:
            out.extend(_domain_visit(bank, dom, dom_index[dom.name], reset_first=reset))
        return out

    setting = plan.setting
    if setting == "continual":
        events = continual_events(domains)
    elif setting == "episodic":
        events = continual_events(domains, reset=True)
    elif setting == "mixed":
        base = continual_events(domains)
        rng = np.random.default_rng(np.random.SeedSequence((plan.seed, _stable_hash("mixed"))))
        events = [base[i] for i in rng.permutation(len(base))]
    elif setting == "gradual":
        for dom in domains:
            for sev in GRADUAL_RAMP:
                sibling = _severity_sibling(dom, sev)
                events.extend(
                    _domain_visit(bank, sibling, dom_index[dom.name], limit=plan.gradual_batches_per_severity)
                )
    elif setting in ("easy2hard", "hard2easy"):
        if spec is None or source_params is None:
            raise ValueError(f"{setting} needs the source model to rank domains")
        ranked = [dom for dom, _ in rank_by_source_error(task, spec, source_params, domains)]
        if setting == "hard2easy":
            ranked = ranked[::-1]
        events = continual_events(ranked)
        extras["ranked_order"] = [d.name for d in ranked]
    elif setting == "cross_group":
        width = max(len(g) for g in groups)
        order = [g[v] for v in range(width) for g in groups if v < len(g)]
        events = continual_events(order)
    elif setting == "cyclic":
        extras = {"cycles": plan.cycles, "mode": plan.cyclic_mode, "dwell": plan.dwell}
        if plan.cyclic_mode == "protocol":
            one_cycle = []
            for g in groups:
                for dom in g:
                    one_cycle.extend(_domain_visit(bank, dom, dom_index[dom.name]))
            cycle_bounds = []
            for c in range(plan.cycles):
                cycle_bounds.append((len(events), len(events) + len(one_cycle)))
                events.extend(one_cycle)
        else:  # dwell: r consecutive batches per group visit, literal index rule
            k = len(groups)
            visits = [0] * k
            cursor = [0] * k
            total_steps = plan.cycles * k * plan.dwell
            per_cycle = k * plan.dwell
            cycle_bounds = [(c * per_cycle, (c + 1) * per_cycle) for c in range(plan.cycles)]
            for t in range(1, total_steps + 1):
                g = cyclic_index((t - 1) // plan.dwell + 1, k, plan.dwell) - 1
                group = groups[g]
                dom = group[visits[g] % len(group)]
                batches = bank.batches(dom)
                x, y = batches[cursor[g] % len(batches)]
                cursor[g] += 1
                if cursor[g] % plan.dwell == 0:
                    visits[g] += 1
                events.append(
                    StreamEvent(
                        x=x, y=y, domain_id=dom_index[dom.name], domain_name=dom.name,
                        severity=dom.corruption.severity,
                    )
                )
    elif setting == "mixed_after_continual":
        phase1 = continual_events(domains)
        rng = np.random.default_rng(np.random.SeedSequence((plan.seed, _stable_hash("mixed-phase"))))
        phase2 = [phase1[i] for i in rng.permutation(len(phase1))]
        events = phase1 + phase2
        extras["phase_bounds"] = [(0, len(phase1)), (len(phase1), len(events))]
    elif setting == "continual_after_mixed":
        phase2 = continual_events(domains)
        rng = np.random.default_rng(np.random.SeedSequence((plan.seed, _stable_hash("mixed-phase"))))
        phase1 = [phase2[i] for i in rng.permutation(len(phase2))]
        events = phase1 + phase2
        extras["phase_bounds"] = [(0, len(phase1)), (len(phase1), len(events))]
    else:  # pragma: no cover - guarded by StreamPlan validation
        raise ValueError(f"unknown setting {setting!r}")

    info = ScheduleInfo(
        setting=setting,
        domain_names=[d.name for d in domains],
        event_domains=[e.domain_name for e in events],
        event_severities=[e.severity for e in events],
        seed=plan.seed,
        batch_size=plan.batch_size,
        cycle_bounds=cycle_bounds,
        extras=extras,
    )
    return iter(events), info
