"""Discrete-event simulation of image pulls across LANs.

Three policies share one event loop and network model:

``baseline``
    every layer is one registry download, at most ``max_concurrent_layers``
    per request.
``naive_p2p``
    holders come from the tracker only; each block goes to a holder that has
    it or to the registry, picked uniformly at random.
``scored``
    strategy choice, multicast plus tracker discovery, scored softmax peer
    selection and deferral to in-flight partial holders, all through
    :class:`~layerswarm.engine.DownloadSession`.

Block payloads are small deterministic stand-ins for the real bytes: every
layer has a block table built from the hashes of those stand-ins, with the
real layer and block sizes, so verification and assembly run for real while
timing and byte accounting use the real block lengths.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..cache import CapacityPolicy, LayerCache
from ..content import BlockStatus, BlockTable, Digest, LayerDescriptor, block_count, compute_block_size, table_from_hashes
from ..engine import (
    REGISTRY,
    DiscoveryUnavailable,
    DownloadRequest,
    DownloadSession,
    EngineConfig,
    Strategy,
    StrategyKind,
    TransferRecord,
    choose_strategy,
)
from ..errors import InvalidArgumentError
from ..scoring import ContentIndex, PeerId, ScoringState, ScoringWeights
from ..tracker import StabilityMetric, Tracker, run_election
from .metrics import MetricsReport, RequestRecord
from .network import Flow, Network
from .scenario import POLICIES, TRACKER_ALIAS, LinkProfile, Scenario
from .workload import generate_arrivals

REGISTRY_NODE = "registry"


@dataclass
class SimLayer:
    name: str
    size: int
    table: BlockTable
    proxies: list[bytes]

    @property
    def descriptor(self) -> LayerDescriptor:
        return LayerDescriptor(self.table.layer_digest, self.size)

    def origin_bytes(self) -> bytes:
        return b"".join(self.proxies)


def make_layer(name: str, size: int) -> SimLayer:
    bs = compute_block_size(size)
    n = block_count(size, bs)
    proxies = [hashlib.sha256(f"{name}/{i}".encode()).digest()[:16] for i in range(n)]
    digest = Digest.of(b"".join(proxies))
    table = table_from_hashes(digest, size, bs, [Digest.of(p) for p in proxies])
    return SimLayer(name, size, table, proxies)


@dataclass(eq=False)
class SimNode:
    id: str
    lan: str
    index: int
    scoring: ScoringState
    rng: np.random.Generator
    alive: bool = True
    joined_at: float = 0.0
    uptime_offset: float = 0.0
    blocks: dict[str, set[int]] = field(default_factory=dict)
    complete: set[str] = field(default_factory=set)
    images: set[str] = field(default_factory=set)
    jobs: dict[str, "LayerJob"] = field(default_factory=dict)
    pulling: set[str] = field(default_factory=set)
    cache: LayerCache | None = None

    @property
    def peer(self) -> PeerId:
        return PeerId(self.id, self.lan)


@dataclass(eq=False)
class ActiveRequest:
    record: RequestRecord
    node: SimNode
    layers: list[str]
    queue: list[str]
    active: set[str] = field(default_factory=set)
    done: set[str] = field(default_factory=set)

    @property
    def running(self) -> bool:
        return self.record.status == "running"


@dataclass(eq=False)
class LayerJob:
    node: SimNode
    layer: SimLayer
    owner: ActiveRequest
    waiters: list[ActiveRequest]
    started: float
    session: DownloadSession | None = None
    flows: set = field(default_factory=set)
    queues: dict[PeerId, list[int]] = field(default_factory=dict)
    inflight: dict[PeerId, int] = field(default_factory=dict)
    outstanding: int = 0
    deferred_since: dict[int, float] = field(default_factory=dict)
    cancelled: bool = False
    registry_bytes: int = 0


class _SimDiscovery:
    """Discovery answers computed from simulation state; records how long the lookup took."""

    def __init__(self, sim: "Simulation", node: SimNode, layer: SimLayer, use_multicast: bool):
        self.sim = sim
        self.node = node
        self.layer = layer
        self.use_multicast = use_multicast
        self.elapsed = 0.0

    def local_holders(self, digest: Digest, deadline: float) -> set[PeerId]:
        self.elapsed = max(self.elapsed, min(deadline, self.sim.scenario.engine.multicast_window))
        return self.sim.local_holders(self.node, self.layer.name)

    def all_holders(self, digest: Digest, deadline: float) -> set[PeerId]:
        local = self.local_holders(digest, deadline) if self.use_multicast else set()
        remote = self.sim.tracker_lookup(self.node, self.layer.name, deadline)
        if remote is None:
            self.elapsed = max(self.elapsed, deadline)
            if not local:
                raise DiscoveryUnavailable("tracker unreachable")
            return local
        self.elapsed = max(self.elapsed, self.sim.tracker_latency(self.node))
        return local | remote


class Simulation:
    def __init__(self, scenario: Scenario, policy: str, seed: int, A: float | None = None):
        if policy not in POLICIES:
            raise InvalidArgumentError(f"unknown policy {policy!r}")
        if A is not None:
            scenario = scenario.with_overrides(**{"workload.A": A})
        self.scenario = scenario
        self.policy = policy
        self.seed = seed
        self.now = 0.0
        self.net = Network(scenario.bucket)
        self._heap: list = []
        self._seq = itertools.count()
        self.index = ContentIndex()
        self.layers: dict[str, SimLayer] = {}
        self.image_layers: dict[str, list[str]] = {}
        self.nodes: dict[str, SimNode] = {}
        self.requests: list[ActiveRequest] = []
        self.outstanding = 0
        self.tracker: Tracker | None = None
        self.tracker_node: str | None = None
        self.election_pending = False
        self._departed_tracker: str | None = None
        self.elections = 0
        self.integrity_failures = 0
        self.layers_verified = 0
        self.config = self._engine_config()
        self._choice_rng = np.random.default_rng([seed, 1])
        self._fault_rng = np.random.default_rng([seed, 2])
        self._build()

    # setup

    def _engine_config(self) -> EngineConfig:
        e = self.scenario.engine
        return EngineConfig(
            batch_size=e.batch_size,
            k=e.k,
            per_peer_inflight=e.per_peer_inflight,
            registry_inflight=e.registry_inflight,
            retry_limit=e.retry_limit,
            deadline=e.deadline,
            defer_limit=e.defer_limit,
            poll_interval=e.poll_interval,
        )

    def _build(self) -> None:
        sc = self.scenario
        topo = sc.topology
        s = sc.scoring
        weights = ScoringWeights(s.alpha, s.beta, s.gamma, s.lam, s.window, s.tau0)
        offsets = np.random.default_rng([self.seed, 4]).uniform(0, 1e5, size=sc.node_count())
        for image in sc.workload.catalog:
            names = []
            for spec in image.layers:
                if spec.name not in self.layers:
                    self.layers[spec.name] = make_layer(spec.name, spec.size)
                names.append(spec.name)
            self.image_layers[image.name] = names
            self.index.add_image(image.name, names)
        i = 0
        for lan in topo.lans:
            intra = topo.intra_for(lan)
            router = topo.router_for(lan)
            self.net.add_router(lan.id, router.bandwidth, router.latency, router.loss)
            self._schedule_profile(router, lambda st, lan=lan.id: self._apply_router(lan, st))
            for n in range(1, lan.nodes + 1):
                nid = f"{lan.id}-{n}"
                self.net.add_node(nid, lan.id, intra.bandwidth, intra.latency, intra.loss)
                scoring = ScoringState(weights, self._uptime_score if s.custom_scorer else None)
                scoring.index = self.index
                node = SimNode(nid, lan.id, i, scoring, np.random.default_rng([self.seed, 3, i]))
                node.uptime_offset = float(offsets[i])
                if sc.cache.capacity and (sc.cache.lans is None or lan.id in sc.cache.lans):
                    policy = CapacityPolicy(sc.cache.capacity, sc.cache.threshold, sc.cache.target)
                    node.cache = LayerCache(policy, sc.cache.strategy, replicas=lambda c, node=node: self.replicas(node, c))
                self.nodes[nid] = node
                i += 1
            self._schedule_profile(intra, lambda st, lan=lan.id: self._apply_intra(lan, st))
        reg = topo.registry_link or topo.intra_for(next(l for l in topo.lans if l.id == topo.registry_lan))
        self.net.add_node(REGISTRY_NODE, topo.registry_lan, reg.bandwidth, reg.latency, reg.loss)
        self._schedule_profile(reg, lambda st: self._apply_links([f"up:{REGISTRY_NODE}", f"down:{REGISTRY_NODE}"], st))
        for holding in sc.seeds:
            node = self.nodes[holding.node]
            for image in holding.images:
                for name in self.image_layers[image]:
                    self._store_layer(node, name, pinned=False)
                node.images.add(image)
                self.index.set_holding(node.peer, image)
        for event in topo.churn:
            self.at(event.time, self._churn, event.node, event.action)
        self._elect(immediate=True)
        self._arrivals()
        self.at(sc.tracker.announce_interval, self._reannounce_tick)

    def _uptime_score(self, peer: PeerId) -> float:
        """Custom score favouring long-lived peers: 50 at one hour of uptime."""
        node = self.nodes[peer.id]
        uptime = self.now - node.joined_at + node.uptime_offset
        return 100.0 * uptime / (uptime + 3600.0)

    def _schedule_profile(self, profile: LinkProfile, apply: Callable) -> None:
        for step in profile.schedule:
            self.at(step.at, apply, step)

    def _apply_links(self, ids: list[str], step) -> None:
        for lid in ids:
            link = self.net.links[lid]
            link.set_profile(
                step.bandwidth if step.bandwidth is not None else link.capacity * 8,
                step.latency if step.latency is not None else link.latency,
                step.loss if step.loss is not None else link.loss,
            )
        self.net.refresh_caps()

    def _apply_router(self, lan: str, step) -> None:
        self._apply_links([f"rup:{lan}", f"rdown:{lan}"], step)

    def _apply_intra(self, lan: str, step) -> None:
        ids = []
        for node in self.nodes.values():
            if node.lan == lan:
                ids += [f"up:{node.id}", f"down:{node.id}"]
        self._apply_links(ids, step)

    def _arrivals(self) -> None:
        wl = self.scenario.workload
        if wl.trace is not None:
            for entry in sorted(wl.trace, key=lambda e: (e.time, e.node, e.image)):
                self.outstanding += 1
                self.at(entry.time, self._arrive, entry.image, entry.node)
            return
        rng = np.random.default_rng([self.seed, 0])
        events = []
        for image in wl.catalog:
            events += [(t, image.name) for t in generate_arrivals(wl, image, rng)]
        for t, name in sorted(events):
            self.outstanding += 1
            self.at(t, self._arrive, name, None)

    # event loop

    def at(self, t: float, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def run(self) -> MetricsReport:
        while self.outstanding > 0:
            t_event = self._heap[0][0] if self._heap else math.inf
            t_flow = self.net.next_completion()
            t = min(t_event, t_flow)
            if t == math.inf:
                raise RuntimeError("simulation stalled with requests outstanding")
            t = max(t, self.now)
            done = self.net.advance(t)
            self.now = t
            if done:
                self.net.finish(done)
            elif t_event <= t:
                _, _, fn, args = heapq.heappop(self._heap)
                fn(*args)
        return self.report()

    def report(self) -> MetricsReport:
        sc = self.scenario
        rep = MetricsReport(
            scenario=sc.name,
            policy=self.policy,
            seed=self.seed,
            A=sc.workload.A,
            requests=[r.record for r in self.requests],
            cross_buckets=dict(self.net.cross_buckets),
            bucket_s=sc.bucket,
            observation_window=sc.observation_window,
            integrity_failures=self.integrity_failures,
            layers_verified=self.layers_verified,
            max_link_utilisation=self.net.max_link_utilisation,
            cross_lan_bytes=self.net.cross_bytes,
            network_bytes=self.net.total_bytes,
            evictions=[row for node in self.nodes.values() if node.cache for row in node.cache.log.rows],
            cache_history=[h for node in self.nodes.values() if node.cache for h in node.cache.history],
        )
        return rep

    # discovery and tracker

    def local_holders(self, node: SimNode, layer: str) -> set[PeerId]:
        return {
            other.peer
            for other in self.nodes.values()
            if other is not node and other.alive and other.lan == node.lan and other.blocks.get(layer)
        }

    def tracker_latency(self, node: SimNode) -> float:
        if self.tracker_node is None:
            return math.inf
        return self.net.rtt(node.id, self.tracker_node) + self.scenario.tracker.query_overhead

    def tracker_lookup(self, node: SimNode, layer: str, deadline: float) -> set[PeerId] | None:
        if self.tracker is None or self.tracker_latency(node) > deadline:
            return None
        return {p for p in self.tracker.query(layer, self.now) if p != node.peer}

    def announce(self, node: SimNode, layer: str) -> None:
        if self.tracker is not None and node.alive:
            self.tracker.announce(layer, node.peer, self.now)

    def _reannounce_tick(self) -> None:
        for node in self.nodes.values():
            if node.alive:
                for layer in sorted(node.blocks):
                    if node.blocks[layer]:
                        self.announce(node, layer)
        if self.tracker is not None:
            self.tracker.expire(self.now)
        self.at(self.now + self.scenario.tracker.announce_interval, self._reannounce_tick)

    def _election_graph(self, live: list[SimNode]) -> dict[str, list[str]]:
        adj: dict[str, set[str]] = {n.id: set() for n in live}
        gateways = []
        for lan in sorted({n.lan for n in live}):
            members = sorted(n.id for n in live if n.lan == lan)
            for a in members:
                adj[a].update(m for m in members if m != a)
            gateways.append(members[0])
        for g in gateways:
            adj[g].update(x for x in gateways if x != g)
        return {k: sorted(v) for k, v in adj.items()}

    def _elect(self, immediate: bool = False) -> None:
        live = [n for n in self.nodes.values() if n.alive]
        self.election_pending = False
        if not live:
            return
        metrics = {n.id: StabilityMetric(self.now - n.joined_at + n.uptime_offset, n.id) for n in live}
        tr = self.scenario.tracker
        result = run_election(metrics, self._election_graph(live), tr.diameter_bound)
        self.elections += 1
        winner = max(result.trackers(), key=lambda nid: metrics[nid])
        rounds = max(result.stabilized_round, 1)
        if immediate:
            self._install_tracker(winner)
        else:
            self.election_pending = True
            self.at(self.now + rounds * tr.round_interval, self._install_tracker, winner)

    def _install_tracker(self, winner: str) -> None:
        self.election_pending = False
        if not self.nodes[winner].alive:
            self._start_election()
            return
        self.tracker = Tracker(self.scenario.tracker.ttl)
        self.tracker_node = winner
        for node in self.nodes.values():
            if node.alive:
                for layer in sorted(node.blocks):
                    if node.blocks[layer]:
                        self.announce(node, layer)

    def _start_election(self) -> None:
        if self.election_pending:
            return
        self.election_pending = True
        tr = self.scenario.tracker
        self.at(self.now + tr.heartbeat_interval * tr.miss_threshold, self._elect)

    # churn

    def _churn(self, nid: str, action: str) -> None:
        if nid == TRACKER_ALIAS:
            nid = self.tracker_node if action == "leave" else self._departed_tracker
            if nid is None:
                return
        node = self.nodes[nid]
        if action == "leave" and node.alive:
            node.alive = False
            for job in list(node.jobs.values()):
                self._cancel_job(job)
            for req in self.requests:
                if req.node is node and req.running:
                    self._close(req, "aborted")
            self.net.abort_node(nid)
            if self.tracker_node == nid:
                self._departed_tracker = nid
                self.tracker = None
                self.tracker_node = None
                self._start_election()
        elif action == "join" and not node.alive:
            node.alive = True
            node.joined_at = self.now
            node.uptime_offset = 0.0
            for layer in sorted(node.blocks):
                if node.blocks[layer]:
                    self.announce(node, layer)
            if self.tracker is None:
                self._start_election()

    # requests

    def _arrive(self, image: str, nid: str | None) -> None:
        wl = self.scenario.workload
        if nid is None:
            lans = set(wl.requesters) if wl.requesters else None
            eligible = [
                n
                for n in self.nodes.values()
                if n.alive and (lans is None or n.lan in lans) and image not in n.images and image not in n.pulling
            ]
            if not eligible:
                self.outstanding -= 1
                return
            node = eligible[int(self._choice_rng.integers(len(eligible)))]
        else:
            node = self.nodes[nid]
            if not node.alive:
                self.outstanding -= 1
                return
        rec = RequestRecord(len(self.requests) + 1, self.now, node.id, node.lan, image)
        layers = list(self.image_layers[image])
        req = ActiveRequest(rec, node, layers, [l for l in layers if l not in node.complete])
        self.requests.append(req)
        node.pulling.add(image)
        for name in layers:
            if name in node.complete:
                req.done.add(name)
                if node.cache and name in node.cache:
                    node.cache.touch(name, self.now)
                    node.cache.pin(name, True)
        self.at(self.now + self.scenario.time_limit, self._timeout, req)
        self._advance_request(req)

    def _advance_request(self, req: ActiveRequest) -> None:
        if not req.running:
            return
        node = req.node
        limit = self.scenario.engine.max_concurrent_layers
        while req.queue and len(req.active) < limit:
            name = req.queue.pop(0)
            if name in node.complete:
                req.done.add(name)
                continue
            req.active.add(name)
            job = node.jobs.get(name)
            if job is not None:
                job.waiters.append(req)
            else:
                self._start_job(node, name, req)
        if len(req.done) == len(req.layers):
            self._close(req, "completed")

    def _timeout(self, req: ActiveRequest) -> None:
        if req.running:
            self._close(req, "timeout")

    def _close(self, req: ActiveRequest, status: str) -> None:
        rec = req.record
        rec.status = status
        rec.distribution_time = min(self.now - rec.arrival, self.scenario.time_limit)
        node = req.node
        node.pulling.discard(rec.image)
        self.outstanding -= 1
        if status == "completed":
            node.images.add(rec.image)
            self.index.set_holding(node.peer, rec.image)
        for name in list(req.active):
            job = node.jobs.get(name)
            if job is not None and not any(w.running for w in job.waiters):
                self._cancel_job(job)
        if node.cache:
            in_use = {l for r in self.requests if r.running and r.node is node for l in r.layers}
            for name in req.layers:
                if name not in in_use:
                    node.cache.pin(name, False)

    # layer jobs

    def _start_job(self, node: SimNode, name: str, req: ActiveRequest) -> None:
        layer = self.layers[name]
        job = LayerJob(node, layer, req, [req], self.now)
        node.jobs[name] = job
        if self.policy == "baseline":
            job.queues[REGISTRY] = []
            self.at(self.now, self._baseline_flow, job)
            return
        request = DownloadRequest(layer.descriptor, node.peer, self.config.deadline, self.now)
        if self.policy == "naive_p2p":
            remote = self.tracker_lookup(node, name, self.config.deadline)
            delay = self.tracker_latency(node) if remote is not None else self.config.deadline
            strategy = Strategy(StrategyKind.FULL_P2P, frozenset(remote or ()))
            session = DownloadSession(request, layer.table, node.scoring, self.config, node.rng, strategy, "uniform")
            session.stats.strategy = "naive"
        else:
            discovery = _SimDiscovery(self, node, layer, use_multicast=True)
            strategy = choose_strategy(request, discovery, self.config.partial_threshold)
            delay = discovery.elapsed
            session = DownloadSession(request, layer.table, node.scoring, self.config, node.rng, strategy)
        job.session = session
        for i in sorted(node.blocks.get(name, ())):
            st = session.states[i]
            st.advance(BlockStatus.PENDING)
            st.advance(BlockStatus.DOWNLOADING)
            st.advance(BlockStatus.VERIFIED)
            session.blocks[i] = layer.proxies[i]
        self.at(self.now + delay, self._cycle, job)

    def _baseline_flow(self, job: LayerJob) -> None:
        if job.cancelled:
            return
        node = job.node
        rtt = self.net.rtt(REGISTRY_NODE, node.id)

        def begin() -> None:
            if job.cancelled:
                return
            flow = Flow(REGISTRY_NODE, node.id, job.layer.size, self.net.path(REGISTRY_NODE, node.id))
            flow.on_done = lambda f: self._baseline_done(job, f)
            flow.on_abort = lambda f: job.flows.discard(f)
            job.flows.add(flow)
            self.net.start(flow)

        self.at(self.now + rtt, begin)

    def _baseline_done(self, job: LayerJob, flow: Flow) -> None:
        job.flows.discard(flow)
        if job.cancelled:
            return
        job.registry_bytes = job.layer.size
        self._finish_job(job, job.layer.origin_bytes(), "registry")

    def _candidates(self, job: LayerJob) -> list[PeerId]:
        session = job.session
        kind = session.strategy.kind
        node = job.node
        if kind is StrategyKind.REGISTRY_DIRECT:
            return []
        found = set(session.strategy.holders)
        if self.policy == "naive_p2p":
            found |= self.tracker_lookup(node, job.layer.name, math.inf) or set()
        elif kind is StrategyKind.PARTIAL_P2P:
            found |= self.local_holders(node, job.layer.name)
        else:
            found |= self.local_holders(node, job.layer.name)
            found |= self.tracker_lookup(node, job.layer.name, math.inf) or set()
        return sorted(p for p in found if p not in session.excluded and p != node.peer)

    def _available(self, peer: PeerId, index: int, layer: str) -> bool:
        # the bitfield from the handshake; liveness is only learned by trying
        return index in self.nodes[peer.id].blocks.get(layer, ())

    def _defer(self, job: LayerJob, index: int) -> bool:
        """True while a live same-LAN peer has this block in flight, up to the defer limit."""
        if self.policy != "scored":
            return False
        since = job.deferred_since.setdefault(index, self.now)
        if self.now - since > self.config.defer_limit:
            return False
        for other in self.nodes.values():
            if other is job.node or other.lan != job.node.lan or not other.alive:
                continue
            ojob = other.jobs.get(job.layer.name)
            if ojob is not None and ojob.session is not None:
                if ojob.session.states[index].status is BlockStatus.DOWNLOADING:
                    return True
        return False

    def _cycle(self, job: LayerJob) -> None:
        if job.cancelled:
            return
        session = job.session
        if session.complete:
            self._finish_job(job, session.assemble(), session.stats.strategy)
            return
        batch = session.next_batch()
        if not batch:
            return
        peers = self._candidates(job)
        name = job.layer.name
        assignment = session.plan(
            batch,
            peers,
            available=lambda p, i: self._available(p, i, name),
            defer=lambda i: self._defer(job, i),
        )
        if not assignment:
            self.at(self.now + self.config.poll_interval, self._cycle, job)
            return
        for index in assignment:
            job.deferred_since.pop(index, None)
        job.outstanding = len(assignment)
        for index, peer in sorted(assignment.items()):
            job.queues.setdefault(peer, []).append(index)
        self._dispatch(job)

    def _dispatch(self, job: LayerJob) -> None:
        for peer in sorted(job.queues):
            cap = self.config.registry_inflight if peer == REGISTRY else self.config.per_peer_inflight
            queue = job.queues[peer]
            while queue and job.inflight.get(peer, 0) < cap:
                index = queue.pop(0)
                job.inflight[peer] = job.inflight.get(peer, 0) + 1
                self._transfer(job, peer, index)

    def _transfer(self, job: LayerJob, peer: PeerId, index: int) -> None:
        src = REGISTRY_NODE if peer == REGISTRY else peer.id
        dst = job.node.id
        rtt = self.net.rtt(src, dst)
        t0 = self.now

        def begin() -> None:
            if job.cancelled:
                self._resolve(job, peer, index, t0, None)
                return
            if src != REGISTRY_NODE and not self.nodes[src].alive:
                # connection attempt times out
                self.at(self.now + rtt, self._resolve, job, peer, index, t0, None)
                return
            flow = Flow(src, dst, job.layer.table.block_length(index), self.net.path(src, dst))
            flow.on_done = lambda f: self._flow_done(job, peer, index, t0, f)
            flow.on_abort = lambda f: self._flow_aborted(job, peer, index, t0, f)
            job.flows.add(flow)
            self.net.start(flow)

        self.at(self.now + rtt, begin)

    def _flow_done(self, job: LayerJob, peer: PeerId, index: int, t0: float, flow: Flow) -> None:
        job.flows.discard(flow)
        payload = job.layer.proxies[index]
        if peer != REGISTRY and peer.id in self.scenario.faults.corrupt_nodes:
            if self._fault_rng.random() < self.scenario.faults.corrupt_probability:
                payload = bytes([payload[0] ^ 0xFF]) + payload[1:]
        self._resolve(job, peer, index, t0, payload)

    def _flow_aborted(self, job: LayerJob, peer: PeerId, index: int, t0: float, flow: Flow) -> None:
        job.flows.discard(flow)
        self._resolve(job, peer, index, t0, None)

    def _resolve(self, job: LayerJob, peer: PeerId, index: int, t0: float, payload: bytes | None) -> None:
        job.inflight[peer] -= 1
        if job.cancelled:
            return
        session = job.session
        length = job.layer.table.block_length(index)
        if payload is None:
            record = TransferRecord(peer, index, 0, self.now - t0, "failed")
        else:
            record = TransferRecord(peer, index, length, max(self.now - t0, 1e-9), "verified", payload)
        if session.handle_block(record, payload):
            session.observe(record)
            held = job.node.blocks.setdefault(job.layer.name, set())
            first = not held
            held.add(index)
            if first:
                self.announce(job.node, job.layer.name)
        job.outstanding -= 1
        self._dispatch(job)
        if job.outstanding == 0:
            self._cycle(job)

    def _cancel_job(self, job: LayerJob) -> None:
        if job.cancelled:
            return
        job.cancelled = True
        job.node.jobs.pop(job.layer.name, None)
        for flow in list(job.flows):
            self.net.abort(flow)

    def _finish_job(self, job: LayerJob, data: bytes, strategy: str) -> None:
        node = job.node
        layer = job.layer
        node.jobs.pop(layer.name, None)
        if Digest.of(data) != layer.table.layer_digest:
            self.integrity_failures += 1
        else:
            self.layers_verified += 1
        rec = job.owner.record
        rec.fetched_bytes += layer.size
        rec.strategies.append(strategy)
        if job.session is not None:
            stats = job.session.stats
            rec.local_bytes += stats.local_bytes
            rec.cross_bytes += stats.cross_bytes
            rec.registry_bytes += stats.registry_bytes
            # blocks already on disk before this job started
            rec.local_bytes += layer.size - stats.local_bytes - stats.cross_bytes - stats.registry_bytes
        else:
            rec.registry_bytes += job.registry_bytes
        in_use = any(w.running for w in job.waiters)
        self._store_layer(node, layer.name, pinned=in_use)
        for req in job.waiters:
            req.active.discard(layer.name)
            req.done.add(layer.name)
            self._advance_request(req)

    def _store_layer(self, node: SimNode, name: str, pinned: bool) -> None:
        layer = self.layers[name]
        node.blocks[name] = set(range(layer.table.block_count))
        node.complete.add(name)
        self.announce(node, name)
        if node.cache is not None:
            for victim in node.cache.insert(name, layer.size, self.now, pinned=pinned):
                self._evict(node, victim.content)

    def _evict(self, node: SimNode, name: str) -> None:
        node.blocks.pop(name, None)
        node.complete.discard(name)
        if self.tracker is not None:
            self.tracker.withdraw(name, node.peer)
        for image, layers in self.image_layers.items():
            if name in layers and image in node.images:
                node.images.discard(image)
                self.index.images_of.get(node.peer, set()).discard(image)

    def replicas(self, node: SimNode, name: str) -> tuple[int, int]:
        local = external = 0
        for other in self.nodes.values():
            if other is node or not other.alive or name not in other.complete:
                continue
            if other.lan == node.lan:
                local += 1
            else:
                external += 1
        return local, external


def run(scenario: Scenario, policy: str = "scored", seed: int = 1, A: float | None = None) -> MetricsReport:
    """Simulate one (scenario, policy, seed) and return its metrics."""
    return Simulation(scenario, policy, seed, A).run()
