"""Admission and eviction policies for the materialized-cache store.

Policies decide only *when* a chunk's cache lives on disk, never what the
model computes: a cold chunk is always recomputable through the lazy path,
so swapping policies changes latency breakdowns and nothing else.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import ConfigurationError, PreconditionError


class AdmissionKind(enum.Enum):
    EAGER_ALL = "eager-all"
    LAZY_ON_FIRST_ACCESS = "lazy-on-first-access"
    BREAK_EVEN_THRESHOLD = "break-even-threshold"


class EvictionKind(enum.Enum):
    NONE = "none"
    LRU = "lru"
    LFU = "lfu"


class IngestDecision(enum.Enum):
    MATERIALIZE_NOW = "materialize-now"
    DEFER = "defer"


class AccessDecision(enum.Enum):
    MATERIALIZE = "materialize"
    SKIP = "skip"


@dataclass(frozen=True)
class AdmissionPolicy:
    kind: AdmissionKind = AdmissionKind.EAGER_ALL
    # Mean inter-access interval at or below which BREAK_EVEN_THRESHOLD
    # admits a chunk; callers typically default this to the break-even
    # interval from the cost model.
    threshold_interval_s: float | None = None

    def __post_init__(self):
        if self.kind is AdmissionKind.BREAK_EVEN_THRESHOLD:
            if self.threshold_interval_s is None or self.threshold_interval_s <= 0:
                raise ConfigurationError(
                    "break-even-threshold admission requires a positive "
                    "threshold_interval_s"
                )


@dataclass(frozen=True)
class EvictionPolicy:
    kind: EvictionKind = EvictionKind.NONE
    capacity_bytes: int | None = None

    def __post_init__(self):
        if self.kind is not EvictionKind.NONE:
            if self.capacity_bytes is None or self.capacity_bytes <= 0:
                raise ConfigurationError(
                    f"{self.kind.value} eviction requires a positive capacity_bytes"
                )


@dataclass
class ChunkAccess:
    access_count: int = 0
    first_access_s: float = 0.0
    last_access_s: float = 0.0


class AccessStats:
    """Per-chunk access counters feeding both admission and eviction."""

    def __init__(self):
        self._by_chunk: dict[str, ChunkAccess] = {}

    def get(self, chunk_id: str) -> ChunkAccess | None:
        return self._by_chunk.get(chunk_id)

    def items(self):
        return self._by_chunk.items()

    def record(self, chunk_id: str, now_s: float) -> ChunkAccess:
        entry = self._by_chunk.get(chunk_id)
        if entry is None:
            entry = ChunkAccess(access_count=1, first_access_s=now_s, last_access_s=now_s)
            self._by_chunk[chunk_id] = entry
            return entry
        if now_s < entry.last_access_s:
            raise PreconditionError(
                f"access time went backwards for {chunk_id!r}: "
                f"{now_s} < {entry.last_access_s}"
            )
        entry.access_count += 1
        entry.last_access_s = now_s
        return entry

    def to_json_dict(self) -> dict:
        return {
            chunk_id: {
                "access_count": entry.access_count,
                "first_access_s": entry.first_access_s,
                "last_access_s": entry.last_access_s,
            }
            for chunk_id, entry in sorted(self._by_chunk.items())
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AccessStats":
        stats = cls()
        for chunk_id, entry in data.items():
            stats._by_chunk[chunk_id] = ChunkAccess(
                access_count=int(entry["access_count"]),
                first_access_s=float(entry["first_access_s"]),
                last_access_s=float(entry["last_access_s"]),
            )
        return stats


def on_ingest(policy: AdmissionPolicy, chunk_id: str) -> IngestDecision:
    """Eager admission materializes at ingest; everything else defers."""
    if policy.kind is AdmissionKind.EAGER_ALL:
        return IngestDecision.MATERIALIZE_NOW
    return IngestDecision.DEFER


def on_access(
    policy: AdmissionPolicy,
    stats: AccessStats,
    chunk_id: str,
    now_s: float,
) -> AccessDecision:
    """Record an access and decide whether a cold chunk should materialize.

    Lazy (and eager, e.g. after an eviction) policies re-materialize on any
    miss. The threshold policy waits for at least two observed accesses and
    admits only while the mean inter-access interval stays at or under the
    threshold.
    """
    entry = stats.record(chunk_id, now_s)
    if policy.kind is AdmissionKind.BREAK_EVEN_THRESHOLD:
        if entry.access_count < 2:
            return AccessDecision.SKIP
        mean_interval = (now_s - entry.first_access_s) / max(entry.access_count - 1, 1)
        if mean_interval <= policy.threshold_interval_s:
            return AccessDecision.MATERIALIZE
        return AccessDecision.SKIP
    return AccessDecision.MATERIALIZE


def maybe_evict(policy: EvictionPolicy, stats: AccessStats, store, index=None) -> list[str]:
    """Delete materialized caches until the store fits the capacity budget.

    LRU evicts the stalest ``last_access_s``, LFU the smallest
    ``access_count``; chunks with no recorded accesses rank first either way,
    and remaining ties break by ascending id. Evicted chunks stay in the
    index (flipped to cold) and re-materialize through the lazy path.
    """
    if policy.kind is EvictionKind.NONE:
        return []
    current = store.stats()
    total = current.bytes
    if total <= policy.capacity_bytes:
        return []

    def rank(chunk_id: str):
        entry = stats.get(chunk_id)
        if policy.kind is EvictionKind.LRU:
            key = entry.last_access_s if entry else float("-inf")
        else:
            key = entry.access_count if entry else 0
        return (key, chunk_id)

    candidates = sorted(current.per_chunk_bytes, key=rank)
    evicted = []
    for chunk_id in candidates:
        if total <= policy.capacity_bytes:
            break
        store.delete_kv(chunk_id)
        total -= current.per_chunk_bytes[chunk_id]
        evicted.append(chunk_id)
        if index is not None:
            record = index.get(chunk_id)
            if record is not None:
                record.materialized = False
    return evicted
