"""Object cache with FIFO, LRU, LFU and popularity-based replacement.

Eviction picks the minimum of a per-policy ordering key; frequency and
popularity ties fall back to least-recently-used, and remaining ties to
insertion sequence, so eviction order is fully deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .identity import Metadata, Oid


class Policy(str, Enum):
    FIFO = "FIFO"
    LRU = "LRU"
    LFU = "LFU"
    POPULARITY = "Popularity"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        for policy in cls:
            if policy.value.lower() == name.strip().lower():
                return policy
        raise ValueError(f"unknown cache policy {name!r}")


DEFAULT_POPULARITY_THRESHOLD = 3


@dataclass(frozen=True)
class CacheConfig:
    capacity_bytes: int
    policy: Policy
    popularity_threshold: int = DEFAULT_POPULARITY_THRESHOLD

    def __post_init__(self):
        if self.capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        if self.popularity_threshold <= 0:
            raise ValueError("popularity_threshold must be positive")


@dataclass
class CacheEntry:
    oid: Oid
    payload: bytes
    metadata: Metadata
    inserted_at: float
    last_access: float
    access_count: int = 0
    seq: int = 0


class PopularityTable:
    """Per-gateway interest counts, monotone within a run."""

    def __init__(self):
        self._counts: dict[bytes, int] = {}

    def observe(self, oid: Oid) -> None:
        self._counts[oid.digest] = self._counts.get(oid.digest, 0) + 1

    def count(self, oid: Oid) -> int:
        return self._counts.get(oid.digest, 0)


class ObjectCache:
    """Bounded object store; total cached bytes never exceed capacity."""

    def __init__(self, config: CacheConfig, popularity: PopularityTable | None = None):
        if config.policy is Policy.POPULARITY and popularity is None:
            raise ValueError("popularity policy needs a PopularityTable")
        self.config = config
        self.popularity = popularity
        self._entries: dict[bytes, CacheEntry] = {}
        self._bytes = 0
        self._seq = 0
        self.hits = 0
        self.misses = 0
        self.insertions = 0
        self.evictions = 0

    def __contains__(self, oid: Oid) -> bool:
        return oid.digest in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def used_bytes(self) -> int:
        return self._bytes

    def get(self, oid: Oid, now: float) -> CacheEntry | None:
        entry = self._entries.get(oid.digest)
        if entry is None:
            self.misses += 1
            return None
        entry.last_access = now
        entry.access_count += 1
        self.hits += 1
        return entry

    def _eviction_key(self, entry: CacheEntry) -> tuple:
        policy = self.config.policy
        if policy is Policy.FIFO:
            return (entry.seq,)
        if policy is Policy.LRU:
            return (entry.last_access, entry.seq)
        if policy is Policy.LFU:
            return (entry.access_count, entry.last_access, entry.seq)
        return (self.popularity.count(entry.oid), entry.last_access, entry.seq)

    def insert(self, oid: Oid, payload: bytes, metadata: Metadata, now: float) -> tuple[bool, list[Oid]]:
        """Store an object; returns (admitted, evicted oids).

        Objects larger than the whole cache are never admitted. The newcomer
        itself competes under the policy, so it may be evicted immediately.
        """
        if oid.digest in self._entries:
            return True, []
        size = len(payload)
        if size > self.config.capacity_bytes:
            return False, []
        self._seq += 1
        entry = CacheEntry(oid, payload, metadata, now, now, 0, self._seq)
        self._entries[oid.digest] = entry
        self._bytes += size
        self.insertions += 1
        evicted: list[Oid] = []
        while self._bytes > self.config.capacity_bytes:
            victim = min(self._entries.values(), key=self._eviction_key)
            del self._entries[victim.oid.digest]
            self._bytes -= len(victim.payload)
            self.evictions += 1
            evicted.append(victim.oid)
        return True, evicted

    def oids(self) -> list[bytes]:
        return list(self._entries)

    def stats(self) -> dict[str, int]:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "insertions": self.insertions,
            "evictions": self.evictions,
            "bytes": self._bytes,
        }


def on_path_observe(cache: ObjectCache, oid: Oid, payload: bytes, metadata: Metadata, now: float) -> bool:
    """Preemptive caching hook for intermediate gateways on a response path.

    Only the popularity policy caches in transit, and only once the object has
    been seen often enough locally; all other policies cache solely at the
    requesting gateway.
    """
    if cache.config.policy is not Policy.POPULARITY:
        return False
    if cache.popularity.count(oid) < cache.config.popularity_threshold:
        return False
    admitted, _ = cache.insert(oid, payload, metadata, now)
    return admitted
