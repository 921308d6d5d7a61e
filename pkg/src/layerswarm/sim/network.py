"""Flow-level network model: links, paths and max-min fair bandwidth sharing.

Each node has an access uplink and downlink inside its LAN; each LAN has a
router with an uplink and downlink to the transit network. A flow within a
LAN crosses the sender's uplink and the receiver's downlink; a flow between
LANs also crosses both routers. Packet loss is not simulated per packet:
every flow is capped at the loss-limited TCP throughput for its path
(``MSS * C / (RTT * sqrt(p))``) or by its receive window over the RTT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

MSS_BYTES = 1460
MATHIS_C = math.sqrt(1.5)
RECEIVE_WINDOW_BYTES = 4 << 20
_EPS = 1e-9


@dataclass(eq=False)
class Link:
    id: str
    capacity: float  # bytes per second
    latency: float  # seconds, one way
    loss: float = 0.0
    cross: bool = False
    flows: set = field(default_factory=set, repr=False)

    def set_profile(self, bandwidth_bps: float, latency: float, loss: float) -> None:
        self.capacity = bandwidth_bps / 8.0
        self.latency = latency
        self.loss = loss


@dataclass(eq=False)
class Flow:
    src: str
    dst: str
    size: float
    path: list[Link]
    on_done: Callable[["Flow"], None] | None = None
    on_abort: Callable[["Flow"], None] | None = None
    tag: object = None
    remaining: float = 0.0
    rate: float = 0.0
    cap: float = math.inf
    started_at: float = 0.0
    active: bool = False
    seq: int = 0

    def __post_init__(self) -> None:
        self.remaining = float(self.size)

    @property
    def crosses_lan(self) -> bool:
        return any(link.cross for link in self.path)


def path_rtt(path: Iterable[Link]) -> float:
    return 2.0 * sum(link.latency for link in path)


def path_loss(path: Iterable[Link]) -> float:
    keep = 1.0
    for link in path:
        keep *= 1.0 - link.loss
    return 1.0 - keep


def flow_cap(path: list[Link]) -> float:
    """Per-flow throughput ceiling in bytes/s from RTT and loss on the path."""
    rtt = path_rtt(path)
    if rtt <= 0:
        return math.inf
    cap = RECEIVE_WINDOW_BYTES / rtt
    loss = path_loss(path)
    if loss > 0:
        cap = min(cap, MSS_BYTES * MATHIS_C / (rtt * math.sqrt(loss)))
    return cap


def max_min_rates(flows: list[Flow]) -> dict[Flow, float]:
    """Progressive filling with per-flow caps.

    All unfrozen flows grow together until a link saturates or a flow hits
    its cap; those flows freeze and filling continues for the rest.
    """
    rates = {f: 0.0 for f in flows}
    active = [f for f in flows]
    residual: dict[Link, float] = {}
    count: dict[Link, int] = {}
    for f in active:
        for link in f.path:
            residual[link] = link.capacity
            count[link] = count.get(link, 0) + 1
    while active:
        inc = math.inf
        for link, n in count.items():
            if n > 0:
                inc = min(inc, residual[link] / n)
        for f in active:
            inc = min(inc, f.cap - rates[f])
        if inc == math.inf:
            raise ValueError("unbounded flow: no link and no cap constrains it")
        inc = max(inc, 0.0)
        for f in active:
            rates[f] += inc
        saturated = set()
        for link, n in count.items():
            if n > 0:
                residual[link] -= inc * n
                if residual[link] <= _EPS * max(1.0, link.capacity):
                    saturated.add(link)
        still = []
        for f in active:
            if f.cap - rates[f] <= _EPS * max(1.0, f.cap if f.cap < math.inf else 1.0) or any(
                link in saturated for link in f.path
            ):
                for link in f.path:
                    count[link] -= 1
            else:
                still.append(f)
        if len(still) == len(active):  # pragma: no cover - numerical guard
            break
        active = still
    return rates


class Network:
    """Links plus the set of active flows; integrates transferred bytes over time."""

    def __init__(self, bucket_s: float = 1.0):
        self.links: dict[str, Link] = {}
        self.lan_of: dict[str, str] = {}
        self.flows: list[Flow] = []
        self.now = 0.0
        self.bucket_s = bucket_s
        self.cross_buckets: dict[int, float] = {}
        self.cross_bytes = 0.0
        self.total_bytes = 0.0
        self._dirty = False
        self._seq = 0
        self.max_link_utilisation = 0.0

    def add_link(self, link: Link) -> Link:
        self.links[link.id] = link
        return link

    def add_node(self, node: str, lan: str, bandwidth_bps: float, latency: float, loss: float = 0.0) -> None:
        self.lan_of[node] = lan
        self.add_link(Link(f"up:{node}", bandwidth_bps / 8.0, latency, loss))
        self.add_link(Link(f"down:{node}", bandwidth_bps / 8.0, latency, loss))

    def add_router(self, lan: str, bandwidth_bps: float, latency: float, loss: float = 0.0) -> None:
        self.add_link(Link(f"rup:{lan}", bandwidth_bps / 8.0, latency, loss, cross=True))
        self.add_link(Link(f"rdown:{lan}", bandwidth_bps / 8.0, latency, loss, cross=True))

    def path(self, src: str, dst: str) -> list[Link]:
        a, b = self.lan_of[src], self.lan_of[dst]
        if a == b:
            return [self.links[f"up:{src}"], self.links[f"down:{dst}"]]
        return [self.links[f"up:{src}"], self.links[f"rup:{a}"], self.links[f"rdown:{b}"], self.links[f"down:{dst}"]]

    def rtt(self, src: str, dst: str) -> float:
        return path_rtt(self.path(src, dst))

    def start(self, flow: Flow) -> Flow:
        flow.cap = flow_cap(flow.path)
        flow.started_at = self.now
        flow.active = True
        self._seq += 1
        flow.seq = self._seq
        for link in flow.path:
            link.flows.add(flow)
        self.flows.append(flow)
        self._dirty = True
        return flow

    def _detach(self, flow: Flow) -> None:
        flow.active = False
        for link in flow.path:
            link.flows.discard(flow)
        self.flows.remove(flow)
        self._dirty = True

    def abort(self, flow: Flow) -> None:
        if flow.active:
            self._detach(flow)
            if flow.on_abort:
                flow.on_abort(flow)

    def abort_node(self, node: str) -> None:
        for flow in [f for f in self.flows if f.src == node or f.dst == node]:
            self.abort(flow)

    def refresh_caps(self) -> None:
        for flow in self.flows:
            flow.cap = flow_cap(flow.path)
        self._dirty = True

    def reallocate(self) -> None:
        if not self._dirty:
            return
        rates = max_min_rates(self.flows)
        for flow in self.flows:
            flow.rate = rates[flow]
        load: dict[str, float] = {}
        for flow in self.flows:
            for link in flow.path:
                load[link.id] = load.get(link.id, 0.0) + flow.rate
        for lid, total in load.items():
            cap = self.links[lid].capacity
            if cap > 0:
                self.max_link_utilisation = max(self.max_link_utilisation, total / cap)
        self._dirty = False

    def next_completion(self) -> float:
        self.reallocate()
        best = math.inf
        for flow in self.flows:
            if flow.rate > 0:
                best = min(best, self.now + flow.remaining / flow.rate)
        return best

    def advance(self, t: float) -> list[Flow]:
        """Move the clock to ``t``; returns flows that finished by then (not yet detached)."""
        self.reallocate()
        dt = t - self.now
        if dt < 0:
            raise ValueError("time cannot go backwards")
        cross_rate = 0.0
        done = []
        for flow in self.flows:
            moved = min(flow.remaining, flow.rate * dt)
            flow.remaining -= moved
            self.total_bytes += moved
            if flow.crosses_lan:
                cross_rate += flow.rate
                self.cross_bytes += moved
            # sub-nanosecond leftovers cannot move the float clock forward
            if flow.remaining <= max(1e-3, flow.rate * 1e-9):
                done.append(flow)
        if cross_rate > 0 and dt > 0:
            self._bucket(self.now, t, cross_rate)
        self.now = t
        return done

    def _bucket(self, t0: float, t1: float, rate: float) -> None:
        b = int(t0 // self.bucket_s)
        while t0 < t1:
            edge = min(t1, (b + 1) * self.bucket_s)
            self.cross_buckets[b] = self.cross_buckets.get(b, 0.0) + rate * (edge - t0)
            t0 = edge
            b += 1

    def finish(self, flows: list[Flow]) -> None:
        for flow in sorted(flows, key=lambda f: f.seq):
            if flow.active:
                flow.remaining = 0.0
                self._detach(flow)
                if flow.on_done:
                    flow.on_done(flow)
