"""Online evaluation metrics: error aggregation, adaptation-rate scores,
and the initial-domain forgetting probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ensemble
from .numnet import RUNNING_STATS, forward, softmax
from .trio import ModelTrio


def moving_average(trace, k: int) -> np.ndarray:
    """Trailing mean over a window of k, using the available prefix early on."""
    if k < 1:
        raise ValueError("window must be >= 1")
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        raise ValueError("empty trace")
    csum = np.concatenate([[0.0], np.cumsum(trace)])
    idx = np.arange(trace.size)
    lo = np.maximum(idx - k + 1, 0)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def ttp(trace, k: int) -> int:
    """Time to plateau: first 1-based step whose moving average reaches 80%
    of the segment's maximum moving average."""
    ma = moving_average(trace, k)
    threshold = 0.8 * ma.max()
    return int(np.argmax(ma >= threshold)) + 1


def aps(trace, k: int) -> float:
    """Mean of the positive consecutive moving-average increments (0 if none)."""
    ma = moving_average(trace, k)
    if ma.size < 2:
        return 0.0
    diffs = np.diff(ma)
    pos = diffs[diffs > 0]
    return float(pos.mean()) if pos.size else 0.0


def stability_std(trace, k: int) -> float:
    """Population standard deviation of the moving average."""
    ma = moving_average(trace, k)
    return float(ma.std())


def adaptation_rate(trace, k: int, lambda_stab: float = 1.0) -> float:
    """Composite recovery score: APS / TTP - lambda * STD."""
    return aps(trace, k) / ttp(trace, k) - lambda_stab * stability_std(trace, k)


@dataclass
class SegmentScore:
    domain_name: str
    start: int  # first event index of the segment
    length: int
    ttp: int
    aps: float
    std: float
    rate: float

    def to_dict(self) -> dict:
        return {
            "domain": self.domain_name,
            "start": self.start,
            "length": self.length,
            "ttp": self.ttp,
            "aps": self.aps,
            "std": self.std,
            "rate": self.rate,
        }


def segment_scores(accuracies, event_domains, k: int, lambda_stab: float) -> list[SegmentScore]:
    """Adaptation-rate scores per maximal run of consecutive same-domain events."""
    accuracies = np.asarray(accuracies, dtype=np.float64)
    scores = []
    start = 0
    for i in range(1, len(event_domains) + 1):
        if i == len(event_domains) or event_domains[i] != event_domains[start]:
            seg = accuracies[start:i]
            scores.append(
                SegmentScore(
                    domain_name=event_domains[start],
                    start=start,
                    length=i - start,
                    ttp=ttp(seg, k),
                    aps=aps(seg, k),
                    std=stability_std(seg, k),
                    rate=adaptation_rate(seg, k, lambda_stab),
                )
            )
            start = i
    return scores


def forgetting_probe(
    trio_snapshot: ModelTrio, eval_x: np.ndarray, eval_y: np.ndarray
) -> dict[str, float]:
    """Accuracies of student, both teachers, and their ensemble on a fixed
    evaluation set, in running-statistics mode. Operates on a deep copy."""
    spec = trio_snapshot.spec
    out = {}
    probs = {}
    for name, params in (("student", trio_snapshot.student), ("t1", trio_snapshot.t1), ("t2", trio_snapshot.t2)):
        _, logits, _ = forward(spec, params, eval_x, stats_mode=RUNNING_STATS)
        probs[name] = softmax(logits)
        out[f"{name}_acc"] = float(np.mean(logits.argmax(axis=1) == eval_y))
    ens = ensemble(probs["student"], probs["t2"])
    out["ensemble_acc"] = float(np.mean(ens.argmax(axis=1) == eval_y))
    return out


@dataclass
class RunReport:
    overall_error: float
    per_domain: dict[str, dict]  # name -> {"error": float, "samples": int}
    per_cycle: list[dict] | None
    segments: list[SegmentScore]
    stream_rate: dict
    forgetting: list[dict] | None = None
    per_batch_errors: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall_error": self.overall_error,
            "per_domain": self.per_domain,
            "per_cycle": self.per_cycle,
            "adaptation_rate": {
                "segments": [s.to_dict() for s in self.segments],
                "stream": self.stream_rate,
            },
            "forgetting": self.forgetting,
        }


def build_report(
    batch_errors,
    batch_sizes,
    event_domains,
    cycle_bounds,
    k: int,
    lambda_stab: float,
    forgetting: list[dict] | None = None,
) -> RunReport:
    """Aggregate per-batch errors into the run-level report.

    Per-domain errors are sample-weighted so they recombine exactly into
    the overall error.
    """
    batch_errors = np.asarray(batch_errors, dtype=np.float64)
    batch_sizes = np.asarray(batch_sizes, dtype=np.int64)
    wrong = batch_errors * batch_sizes
    overall = float(wrong.sum() / batch_sizes.sum())

    per_domain: dict[str, dict] = {}
    for name in dict.fromkeys(event_domains):
        idx = [i for i, d in enumerate(event_domains) if d == name]
        samples = int(batch_sizes[idx].sum())
        per_domain[name] = {"error": float(wrong[idx].sum() / samples), "samples": samples}

    per_cycle = None
    if cycle_bounds:
        per_cycle = []
        for c, (lo, hi) in enumerate(cycle_bounds):
            n = int(batch_sizes[lo:hi].sum())
            per_cycle.append({"cycle": c + 1, "error": float(wrong[lo:hi].sum() / n), "samples": n})

    accuracies = 1.0 - batch_errors
    segments = segment_scores(accuracies, event_domains, k, lambda_stab)
    stream_rate = {
        "ttp": ttp(accuracies, k),
        "aps": aps(accuracies, k),
        "std": stability_std(accuracies, k),
        "rate": adaptation_rate(accuracies, k, lambda_stab),
    }
    return RunReport(
        overall_error=overall,
        per_domain=per_domain,
        per_cycle=per_cycle,
        segments=segments,
        stream_rate=stream_rate,
        forgetting=forgetting,
        per_batch_errors=[float(e) for e in batch_errors],
    )
