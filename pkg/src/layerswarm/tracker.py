"""Embedded tracker: content registry, loss detection and FloodMax election.

Trackers map layer digests to the peers holding them. When a node stops
hearing from its tracker it starts a synchronous FloodMax election over its
neighbour graph; nodes forward the best stability metric they have seen, and
with pruning enabled a node stays silent in rounds where its best value did
not improve.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping

from .errors import InvalidArgumentError, LayerswarmError

HEARTBEAT_INTERVAL_S = 1.0
MISS_THRESHOLD = 3
ROUND_INTERVAL_S = 0.5
ANNOUNCE_TTL_S = 60.0
DEFAULT_DIAMETER_BOUND = 10


@dataclass(frozen=True, order=True)
class StabilityMetric:
    """Ordered by uptime, then node id as the tiebreaker."""

    uptime: float
    node_id: str


class Role(str, enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    TRACKER = "tracker"


@dataclass
class TrackerState:
    node_id: str
    metric: StabilityMetric
    role: Role = Role.FOLLOWER
    known_tracker: str | None = None
    round: int = 0
    best_seen: StabilityMetric | None = None
    diameter_bound: int = DEFAULT_DIAMETER_BOUND
    last_sent: StabilityMetric | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.best_seen is None:
            self.best_seen = self.metric

    def become_tracker(self) -> None:
        self.role = Role.TRACKER
        self.known_tracker = self.node_id

    def follow(self, tracker: str) -> None:
        self.role = Role.FOLLOWER
        self.known_tracker = tracker


@dataclass(frozen=True)
class ElectionMessage:
    candidate: StabilityMetric
    origin_round: int

    def __post_init__(self) -> None:
        if self.origin_round < 1:
            raise InvalidArgumentError("election rounds start at 1")


@dataclass
class HeartbeatLog:
    """Heartbeat arrival times from the known tracker."""

    interval: float = HEARTBEAT_INTERVAL_S
    miss_threshold: int = MISS_THRESHOLD
    last_heartbeat: float | None = None

    def beat(self, now: float) -> None:
        self.last_heartbeat = now

    def missed(self, now: float) -> int:
        if self.last_heartbeat is None:
            return self.miss_threshold
        return int((now - self.last_heartbeat) // self.interval)


def detect_tracker_loss(state: TrackerState, log: HeartbeatLog, now: float) -> bool:
    if state.role is Role.TRACKER:
        return False
    if state.known_tracker is None:
        return True
    return log.missed(now) >= log.miss_threshold


@dataclass
class ElectionResult:
    leaders: dict[str, str]
    states: dict[str, TrackerState]
    messages: int
    rounds_run: int
    stabilized_round: int

    def trackers(self) -> set[str]:
        return {n for n, s in self.states.items() if s.role is Role.TRACKER}


def run_election(
    metrics: Mapping[str, StabilityMetric],
    neighbors: Mapping[str, Iterable[str]],
    diameter_bound: int = DEFAULT_DIAMETER_BOUND,
    prune: bool = True,
) -> ElectionResult:
    """Synchronous FloodMax over ``neighbors`` for ``diameter_bound`` rounds.

    Every node sends in round 1. After that an unpruned node re-sends its best
    value every round, while a pruned node sends only when its best value
    improved since its last send. Each connected component ends with exactly
    one tracker: the node whose own metric is the component maximum.
    """
    if diameter_bound < 1:
        raise InvalidArgumentError("diameter bound must be at least 1")
    adj = {n: sorted(set(neighbors.get(n, ())) & metrics.keys() - {n}) for n in metrics}
    states = {n: TrackerState(n, m, role=Role.CANDIDATE, diameter_bound=diameter_bound) for n, m in metrics.items()}
    messages = 0
    stabilized = 0
    for rnd in range(1, diameter_bound + 1):
        outbox: list[tuple[str, ElectionMessage]] = []
        for node in sorted(states):
            st = states[node]
            st.round = rnd
            if prune and st.last_sent is not None and st.best_seen == st.last_sent:
                continue
            st.last_sent = st.best_seen
            msg = ElectionMessage(st.best_seen, rnd)
            outbox.extend((peer, msg) for peer in adj[node])
        if not outbox:
            break
        messages += len(outbox)
        changed = False
        for dest, msg in outbox:
            st = states[dest]
            if msg.candidate > st.best_seen:
                st.best_seen = msg.candidate
                changed = True
        if changed:
            stabilized = rnd
    leaders = {}
    for node, st in states.items():
        if st.best_seen == st.metric:
            st.become_tracker()
        else:
            st.follow(st.best_seen.node_id)
        leaders[node] = st.known_tracker
    return ElectionResult(leaders, states, messages, rnd, stabilized)


@dataclass
class AnnounceEntry:
    content: str
    holders: dict[Hashable, float] = field(default_factory=dict)

    def live(self, now: float, ttl: float) -> set:
        return {h for h, stamp in self.holders.items() if now - stamp < ttl}


class Tracker:
    """Digest -> holders registry with per-holder TTL."""

    def __init__(self, ttl: float = ANNOUNCE_TTL_S):
        self.ttl = ttl
        self.entries: dict[str, AnnounceEntry] = {}

    def announce(self, content: str, holder: Hashable, now: float) -> None:
        entry = self.entries.get(content)
        if entry is None or not entry.live(now, self.ttl):
            entry = self.entries[content] = AnnounceEntry(content)
        entry.holders[holder] = now

    def withdraw(self, content: str, holder: Hashable) -> None:
        entry = self.entries.get(content)
        if entry is not None:
            entry.holders.pop(holder, None)

    def query(self, content: str, now: float) -> set:
        entry = self.entries.get(content)
        if entry is None:
            return set()
        return entry.live(now, self.ttl)

    def expire(self, now: float) -> None:
        for key in [k for k, e in self.entries.items() if not e.live(now, self.ttl)]:
            del self.entries[key]


class Redirect(LayerswarmError):
    def __init__(self, tracker: str | None):
        self.tracker = tracker
        super().__init__(f"not the tracker; ask {tracker}")


class TrackerNode:
    """A swarm member that may hold the tracker role."""

    def __init__(self, state: TrackerState, ttl: float = ANNOUNCE_TTL_S):
        self.state = state
        self.registry = Tracker(ttl)

    def announce(self, content: str, holder: Hashable, now: float) -> None:
        if self.state.role is not Role.TRACKER:
            raise Redirect(self.state.known_tracker)
        self.registry.announce(content, holder, now)

    def query(self, content: str, now: float) -> set:
        if self.state.role is not Role.TRACKER:
            raise Redirect(self.state.known_tracker)
        return self.registry.query(content, now)


def route_query(nodes: Mapping[str, TrackerNode], start: str, content: str, now: float, max_hops: int = 4) -> set:
    """Query starting at ``start``, following redirects to the tracker."""
    node = start
    for _ in range(max_hops):
        try:
            return nodes[node].query(content, now)
        except Redirect as redirect:
            if redirect.tracker is None or redirect.tracker not in nodes:
                return set()
            node = redirect.tracker
    return set()


# Wire frames: 4-byte big-endian length, then a 1-byte type tag, then fields.


class FrameType(enum.IntEnum):
    ELECTION = 1
    HEARTBEAT = 2
    ANNOUNCE = 3
    QUERY = 4
    HOLDERS = 5
    NEW_TRACKER = 6
    REDIRECT = 7


def _pack_str(text: str) -> bytes:
    raw = text.encode()
    return struct.pack("!H", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("!H", buf, off)
    off += 2
    return buf[off : off + n].decode(), off + n


def encode_frame(kind: FrameType, **fields) -> bytes:
    if kind is FrameType.ELECTION:
        metric: StabilityMetric = fields["candidate"]
        body = struct.pack("!dI", metric.uptime, fields["origin_round"]) + _pack_str(metric.node_id)
    elif kind in (FrameType.HEARTBEAT, FrameType.NEW_TRACKER, FrameType.REDIRECT):
        body = _pack_str(fields["node_id"])
    elif kind is FrameType.ANNOUNCE:
        body = bytes.fromhex(fields["digest"]) + _pack_str(fields["holder"])
    elif kind is FrameType.QUERY:
        body = bytes.fromhex(fields["digest"])
    elif kind is FrameType.HOLDERS:
        holders = sorted(fields["holders"])
        body = bytes.fromhex(fields["digest"]) + struct.pack("!H", len(holders)) + b"".join(map(_pack_str, holders))
    else:  # pragma: no cover
        raise InvalidArgumentError(f"unknown frame type {kind}")
    payload = struct.pack("!B", kind) + body
    return struct.pack("!I", len(payload)) + payload


def decode_frame(frame: bytes) -> tuple[FrameType, dict]:
    if len(frame) < 5:
        raise InvalidArgumentError("frame too short")
    (length,) = struct.unpack_from("!I", frame)
    if length != len(frame) - 4:
        raise InvalidArgumentError("frame length prefix mismatch")
    kind = FrameType(frame[4])
    off = 5
    if kind is FrameType.ELECTION:
        uptime, rnd = struct.unpack_from("!dI", frame, off)
        node_id, _ = _unpack_str(frame, off + 12)
        return kind, {"candidate": StabilityMetric(uptime, node_id), "origin_round": rnd}
    if kind in (FrameType.HEARTBEAT, FrameType.NEW_TRACKER, FrameType.REDIRECT):
        node_id, _ = _unpack_str(frame, off)
        return kind, {"node_id": node_id}
    digest = frame[off : off + 32].hex()
    off += 32
    if kind is FrameType.ANNOUNCE:
        holder, _ = _unpack_str(frame, off)
        return kind, {"digest": digest, "holder": holder}
    if kind is FrameType.QUERY:
        return kind, {"digest": digest}
    (count,) = struct.unpack_from("!H", frame, off)
    off += 2
    holders = []
    for _ in range(count):
        holder, off = _unpack_str(frame, off)
        holders.append(holder)
    return kind, {"digest": digest, "holders": holders}
