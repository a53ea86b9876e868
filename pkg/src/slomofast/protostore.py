"""Per-class bounded entropy queues and the derived class prototypes.

Admission runs the dual criterion; a full queue only accepts a feature
that beats its worst (highest-entropy) resident. Every evict_interval
steps the most confident (lowest-entropy) entry of each non-empty queue
is dropped to keep the queues from freezing on early features.

Entries are kept sorted by (entropy, insertion sequence), so the minimum
and maximum entropy entries sit at the ends; among equal entropies the
oldest entry is the one to go.
"""

from __future__ import annotations

import bisect
import enum
import json
from dataclasses import dataclass, field

import numpy as np

ENTROPY_FLOOR = 1e-6


class InsertOutcome(enum.Enum):
    INSERTED = "inserted"
    REPLACED_MAX_ENTROPY = "replaced_max_entropy"
    REJECTED_CRITERIA = "rejected_criteria"
    REJECTED_FULL_HIGHER_ENTROPY = "rejected_full_higher_entropy"


@dataclass
class QueueEntry:
    feature: np.ndarray
    entropy: float  # floored at ENTROPY_FLOOR
    seq: int  # global insertion order, breaks entropy ties (oldest loses)

    def sort_key(self) -> tuple[float, int]:
        return (self.entropy, self.seq)


@dataclass
class ClassQueue:
    capacity: int
    entries: list[QueueEntry] = field(default_factory=list)  # sorted by (entropy, seq)

    def __len__(self) -> int:
        return len(self.entries)

    def insert_sorted(self, entry: QueueEntry) -> None:
        pos = bisect.bisect_left([e.sort_key() for e in self.entries], entry.sort_key())
        self.entries.insert(pos, entry)

    def max_entropy_entry(self) -> QueueEntry:
        # entries with the max entropy cluster at the tail; oldest of them loses
        top = self.entries[-1].entropy
        i = len(self.entries) - 1
        while i > 0 and self.entries[i - 1].entropy == top:
            i -= 1
        return self.entries[i]

    def pop_min_entropy(self) -> QueueEntry:
        # sorted ascending by (entropy, seq): head is the oldest minimum
        return self.entries.pop(0)


class PrototypeStore:
    """One bounded queue per class plus lazily cached prototypes."""

    def __init__(
        self,
        num_classes: int,
        feature_dim: int,
        capacity: int = 10,
        evict_interval: int = 50,
        sigma: float = 0.5,
        delta: float = 0.2,
    ):
        if num_classes < 1 or feature_dim < 1:
            raise ValueError("num_classes and feature_dim must be >= 1")
        if capacity < 1 or evict_interval < 1:
            raise ValueError("capacity and evict_interval must be >= 1")
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.capacity = capacity
        self.evict_interval = evict_interval
        self.sigma = sigma
        self.delta = delta
        self.step_counter = 0
        self._next_seq = 0
        self.queues = [ClassQueue(capacity) for _ in range(num_classes)]
        self._proto_cache: dict[int, np.ndarray | None] = {}

    def _check_class(self, label: int) -> None:
        if not 0 <= label < self.num_classes:
            raise ValueError(f"class index {label} out of range")

    def try_insert(self, label: int, feature: np.ndarray, entropy: float, plpd_value: float) -> InsertOutcome:
        self._check_class(label)
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.feature_dim,):
            raise ValueError("feature dimension does not match the store")
        if not (entropy <= self.sigma and plpd_value >= self.delta):
            return InsertOutcome.REJECTED_CRITERIA
        q = self.queues[label]
        entry = QueueEntry(feature=feature.copy(), entropy=max(entropy, ENTROPY_FLOOR), seq=self._next_seq)
        if len(q) < q.capacity:
            q.insert_sorted(entry)
            self._next_seq += 1
            self._proto_cache.pop(label, None)
            return InsertOutcome.INSERTED
        worst = q.max_entropy_entry()
        if entry.entropy < worst.entropy:
            q.entries.remove(worst)
            q.insert_sorted(entry)
            self._next_seq += 1
            self._proto_cache.pop(label, None)
            return InsertOutcome.REPLACED_MAX_ENTROPY
        return InsertOutcome.REJECTED_FULL_HIGHER_ENTROPY

    def tick(self) -> dict[int, bool]:
        """Advance the step counter; on multiples of evict_interval drop each
        non-empty queue's lowest-entropy entry. Returns class -> evicted."""
        self.step_counter += 1
        evicted = {c: False for c in range(self.num_classes)}
        if self.step_counter % self.evict_interval == 0:
            for c, q in enumerate(self.queues):
                if q.entries:
                    q.pop_min_entropy()
                    evicted[c] = True
                    self._proto_cache.pop(c, None)
        return evicted

    def prototype(self, label: int) -> np.ndarray | None:
        """Entropy-inverse-weighted mean of the class queue; None when empty."""
        self._check_class(label)
        if label in self._proto_cache:
            cached = self._proto_cache[label]
            return None if cached is None else cached.copy()
        q = self.queues[label]
        if not q.entries:
            self._proto_cache[label] = None
            return None
        weights = np.array([1.0 / e.entropy for e in q.entries])
        feats = np.stack([e.feature for e in q.entries])
        proto = (weights[:, None] * feats).sum(axis=0) / weights.sum()
        self._proto_cache[label] = proto
        return proto.copy()

    def nearest_prototype(self, feature: np.ndarray) -> tuple[int, float] | None:
        """Highest-cosine class prototype; ties go to the lowest class index."""
        feature = np.asarray(feature, dtype=np.float64)
        norm = np.linalg.norm(feature)
        if norm == 0.0:
            raise ValueError("zero-norm feature")
        best: tuple[int, float] | None = None
        for c in range(self.num_classes):
            proto = self.prototype(c)
            if proto is None:
                continue
            p_norm = np.linalg.norm(proto)
            if p_norm == 0.0:
                continue
            sim = float(feature @ proto / (norm * p_norm))
            if best is None or sim > best[1]:
                best = (c, sim)
        return best

    def queue_sizes(self) -> list[int]:
        return [len(q) for q in self.queues]

    def total_entries(self) -> int:
        return sum(len(q) for q in self.queues)

    # --- snapshot format: documented JSON for debugging and fixtures ---

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "capacity": self.capacity,
            "evict_interval": self.evict_interval,
            "sigma": self.sigma,
            "delta": self.delta,
            "step_counter": self.step_counter,
            "next_seq": self._next_seq,
            "queues": {
                str(c): [
                    {"feature": e.feature.tolist(), "entropy": e.entropy, "seq": e.seq}
                    for e in q.entries
                ]
                for c, q in enumerate(self.queues)
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PrototypeStore":
        store = cls(
            num_classes=data["num_classes"],
            feature_dim=data["feature_dim"],
            capacity=data["capacity"],
            evict_interval=data["evict_interval"],
            sigma=data["sigma"],
            delta=data["delta"],
        )
        store.step_counter = data["step_counter"]
        store._next_seq = data["next_seq"]
        for c_str, entries in data["queues"].items():
            q = store.queues[int(c_str)]
            for e in entries:
                q.entries.append(
                    QueueEntry(feature=np.array(e["feature"], dtype=np.float64), entropy=e["entropy"], seq=e["seq"])
                )
            q.entries.sort(key=QueueEntry.sort_key)
        return store

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @classmethod
    def load_json(cls, path) -> "PrototypeStore":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))
