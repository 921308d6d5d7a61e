"""Cache cleaner: miss-cost tiered eviction on top of LRU, plus a plain LRU baseline.

Tiers describe what it would cost to get a layer back after evicting it:

1. another node in this LAN still holds it (cheap),
2. only nodes in other LANs hold it (more external replicas is cheaper),
3. this is the only known copy (evicted last).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidArgumentError

REPLICA_REFRESH_S = 30.0


@dataclass
class CacheEntry:
    content: str
    size_bytes: int
    last_access: float
    local_replicas: int = 0
    external_replicas: int = 0
    pinned: bool = False
    refreshed_at: float | None = None

    def __post_init__(self) -> None:
        if self.size_bytes <= 0:
            raise InvalidArgumentError("cache entries must have a positive size")
        if self.local_replicas < 0 or self.external_replicas < 0:
            raise InvalidArgumentError("replica counts cannot be negative")


@dataclass(frozen=True)
class CapacityPolicy:
    total_bytes: int
    free_threshold_fraction: float = 0.10
    target_free_fraction: float = 0.20

    def __post_init__(self) -> None:
        if self.total_bytes <= 0:
            raise InvalidArgumentError("capacity must be positive")
        if not 0 < self.free_threshold_fraction <= self.target_free_fraction < 1:
            raise InvalidArgumentError("need 0 < free threshold <= target free fraction < 1")


@dataclass
class EvictionPlan:
    victims: list[CacheEntry] = field(default_factory=list)
    reclaimed_bytes: int = 0
    shortfall: bool = False


def needs_cleaning(policy: CapacityPolicy, used_bytes: int) -> bool:
    if used_bytes > policy.total_bytes:
        return True
    return (policy.total_bytes - used_bytes) / policy.total_bytes < policy.free_threshold_fraction


def eviction_tier(entry: CacheEntry, now: float | None = None, refresh_interval: float = REPLICA_REFRESH_S) -> int:
    if now is not None and entry.refreshed_at is not None and now - entry.refreshed_at > refresh_interval:
        return 3
    if entry.local_replicas > 0:
        return 1
    if entry.external_replicas > 0:
        return 2
    return 3


def _tiered_key(entry: CacheEntry, now: float | None):
    tier = eviction_tier(entry, now)
    if tier == 1:
        return (1, entry.last_access, -entry.size_bytes, entry.content)
    if tier == 2:
        return (2, -entry.external_replicas, entry.last_access, entry.content)
    return (3, entry.last_access, 0, entry.content)


def _take_until_target(ordered: Sequence[CacheEntry], policy: CapacityPolicy, used_bytes: int) -> EvictionPlan:
    target_used = policy.total_bytes * (1 - policy.target_free_fraction)
    plan = EvictionPlan()
    used = used_bytes
    for entry in ordered:
        if used <= target_used:
            break
        plan.victims.append(entry)
        plan.reclaimed_bytes += entry.size_bytes
        used -= entry.size_bytes
    plan.shortfall = used > target_used
    return plan


def _used(entries: Sequence[CacheEntry], used_bytes: int | None) -> int:
    return sum(e.size_bytes for e in entries) if used_bytes is None else used_bytes


def plan_eviction(
    entries: Iterable[CacheEntry], policy: CapacityPolicy, now: float | None = None, used_bytes: int | None = None
) -> EvictionPlan:
    """Victims in tier order until the projected free space reaches the target.

    ``used_bytes`` defaults to the sum of entry sizes.
    """
    entries = list(entries)
    ordered = sorted((e for e in entries if not e.pinned), key=lambda e: _tiered_key(e, now))
    return _take_until_target(ordered, policy, _used(entries, used_bytes))


def plan_eviction_lru(
    entries: Iterable[CacheEntry], policy: CapacityPolicy, now: float | None = None, used_bytes: int | None = None
) -> EvictionPlan:
    entries = list(entries)
    ordered = sorted((e for e in entries if not e.pinned), key=lambda e: (e.last_access, e.content))
    return _take_until_target(ordered, policy, _used(entries, used_bytes))


class EvictionLog:
    """CSV rows of (time, digest, size, tier, reason)."""

    def __init__(self) -> None:
        self.rows: list[tuple[float, str, int, int, str]] = []

    def record(self, now: float, entry: CacheEntry, reason: str) -> None:
        self.rows.append((now, entry.content, entry.size_bytes, eviction_tier(entry), reason))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time", "digest", "size", "tier", "reason"])
        for now, digest, size, tier, reason in self.rows:
            writer.writerow([f"{now:.6f}", digest, size, tier, reason])
        return buf.getvalue()


class LayerCache:
    """One node's layer store with capacity accounting and pluggable eviction.

    ``replicas`` is called with (digest) and returns (local, external) copy
    counts elsewhere in the swarm; it is consulted before each plan.
    """

    def __init__(self, policy: CapacityPolicy, strategy: str = "tiered", replicas=None):
        if strategy not in ("tiered", "lru"):
            raise InvalidArgumentError(f"unknown eviction strategy {strategy!r}")
        self.policy = policy
        self.strategy = strategy
        self.replicas = replicas
        self.entries: dict[str, CacheEntry] = {}
        self.log = EvictionLog()
        # per clean: (victim tiers, tiers of unpinned entries left behind)
        self.history: list[tuple[list[int], list[int]]] = []

    @property
    def used_bytes(self) -> int:
        return sum(e.size_bytes for e in self.entries.values())

    def __contains__(self, content: str) -> bool:
        return content in self.entries

    def touch(self, content: str, now: float) -> None:
        self.entries[content].last_access = now

    def pin(self, content: str, pinned: bool = True) -> None:
        if content in self.entries:
            self.entries[content].pinned = pinned

    def insert(self, content: str, size_bytes: int, now: float, pinned: bool = False) -> list[CacheEntry]:
        """Add an entry, then clean if the free-space threshold is crossed. Returns evicted entries."""
        if content in self.entries:
            self.entries[content].last_access = now
        else:
            self.entries[content] = CacheEntry(content, size_bytes, now, pinned=pinned)
        return self.clean(now)

    def refresh(self, now: float) -> None:
        if self.replicas is None:
            return
        for entry in self.entries.values():
            entry.local_replicas, entry.external_replicas = self.replicas(entry.content)
            entry.refreshed_at = now

    def plan(self, now: float) -> EvictionPlan:
        self.refresh(now)
        planner = plan_eviction if self.strategy == "tiered" else plan_eviction_lru
        return planner(self.entries.values(), self.policy, now)

    def clean(self, now: float) -> list[CacheEntry]:
        if not needs_cleaning(self.policy, self.used_bytes):
            return []
        plan = self.plan(now)
        for victim in plan.victims:
            self.log.record(now, victim, self.strategy)
            self.entries.pop(victim.content, None)
        self.history.append(
            (
                [eviction_tier(v, now) for v in plan.victims],
                [eviction_tier(e, now) for e in self.entries.values() if not e.pinned],
            )
        )
        return plan.victims
