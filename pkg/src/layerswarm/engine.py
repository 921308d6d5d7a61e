"""Request dispatcher and block-level P2P download loop.

A download picks a strategy (registry, full P2P, or local-only partial P2P
for small layers), then cycles through batches: pick the lowest missing
blocks, softmax-sample a few candidate peers per block and take the best of
them, fetch, verify against the block table, requeue anything that failed.

:class:`DownloadSession` holds the per-layer state and exposes each step so
the simulator can drive it from its own event loop; :func:`download_layer`
drives the same session synchronously over a real or in-memory transport.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .content import BlockState, BlockStatus, BlockTable, Digest, LayerDescriptor, MiB, verify_block
from .errors import InvalidArgumentError, LayerUnavailableError, LayerswarmError, NoCandidatesError, TransferError
from .scoring import PeerId, ScoringState, record_round, sample_subset, temperature

log = logging.getLogger(__name__)

REGISTRY = PeerId("registry", "")
PARTIAL_P2P_THRESHOLD = 16 * MiB


class StrategyKind(str, enum.Enum):
    REGISTRY_DIRECT = "registry_direct"
    FULL_P2P = "full_p2p"
    PARTIAL_P2P = "partial_p2p"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    holders: frozenset = frozenset()


@dataclass(frozen=True)
class DownloadRequest:
    layer: LayerDescriptor
    requester: PeerId
    deadline: float = 2.0
    arrival_time: float = 0.0

    def __post_init__(self) -> None:
        if self.deadline <= 0:
            raise InvalidArgumentError("peer aggregation deadline must be positive")


@dataclass(frozen=True)
class EngineConfig:
    batch_size: int = 16
    k: int = 3
    per_peer_inflight: int = 4
    registry_inflight: int = 4
    parallelism: int = 16
    retry_limit: int = 5
    corruption_strikes: int = 2
    partial_threshold: int = PARTIAL_P2P_THRESHOLD
    deadline: float = 2.0
    defer_limit: float = 30.0
    poll_interval: float = 0.5

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.k < 1 or self.per_peer_inflight < 1 or self.parallelism < 1:
            raise InvalidArgumentError("batch size, k, in-flight cap and parallelism must be positive")


class DiscoveryUnavailable(LayerswarmError):
    pass


class Discovery(Protocol):
    """Peer lookup. Both calls return only holders confirmed within ``deadline``."""

    def local_holders(self, digest: Digest, deadline: float) -> set[PeerId]: ...

    def all_holders(self, digest: Digest, deadline: float) -> set[PeerId]: ...


class Transport(Protocol):
    def fetch_block(self, peer: PeerId, table: BlockTable, index: int) -> bytes: ...


def choose_strategy(request: DownloadRequest, discovery: Discovery | None, threshold: int = PARTIAL_P2P_THRESHOLD) -> Strategy:
    digest = request.layer.digest
    small = request.layer.size_bytes < threshold
    try:
        if discovery is None:
            raise DiscoveryUnavailable("no discovery configured")
        if small:
            holders = discovery.local_holders(digest, request.deadline)
        else:
            holders = discovery.all_holders(digest, request.deadline)
    except DiscoveryUnavailable as exc:
        log.info("discovery unavailable for %s, going to the registry: %s", digest, exc)
        return Strategy(StrategyKind.REGISTRY_DIRECT)
    holders = {h for h in holders if h != request.requester}
    if not holders:
        return Strategy(StrategyKind.REGISTRY_DIRECT)
    kind = StrategyKind.PARTIAL_P2P if small else StrategyKind.FULL_P2P
    return Strategy(kind, frozenset(holders))


@dataclass
class Batch:
    block_indices: list[int]
    size: int

    def __bool__(self) -> bool:
        return bool(self.block_indices)


def schedule_batch(table: BlockTable, states: Sequence[BlockState], batch_size: int) -> Batch:
    """Lowest-index blocks that are neither verified nor in flight."""
    idle = (BlockStatus.MISSING, BlockStatus.PENDING)
    picked = [s.index for s in states if s.status in idle][:batch_size]
    return Batch(picked, batch_size)


def assign_peers(
    batch: Batch,
    candidates: Mapping[PeerId, float],
    scoring: ScoringState,
    k: int,
    rng: np.random.Generator,
    available: Callable[[int], Iterable[PeerId]] | None = None,
) -> dict[int, PeerId]:
    """Per block: softmax-sample ``min(k, n)`` candidates, keep the highest utility.

    ``candidates`` maps peer to utility. ``available(index)``, when given,
    restricts each block to peers that actually have it; blocks with nobody
    available are left out of the result.
    """
    if not candidates:
        raise NoCandidatesError("no peers to assign blocks to")
    result = {}
    for index in batch.block_indices:
        allowed = candidates.keys() if available is None else set(available(index)) & candidates.keys()
        pool = sorted(((p, candidates[p]) for p in allowed), key=lambda pu: pu[0])
        if not pool:
            continue
        t = scoring.next_round()
        subset = sample_subset(pool, min(k, len(pool)), temperature(t, scoring.weights.tau0), rng)
        # ties go to the earliest drawn, so names carry no preference
        peer, u = max(subset, key=lambda pu: pu[1])
        record_round(scoring.ledger, u, max(v for _, v in pool))
        result[index] = peer
    return result


@dataclass
class TransferRecord:
    peer: PeerId
    block_index: int
    bytes: int
    elapsed: float
    outcome: str
    payload: bytes | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.outcome not in ("verified", "failed"):
            raise InvalidArgumentError(f"unknown outcome {self.outcome!r}")
        if self.outcome == "verified" and self.bytes <= 0:
            raise InvalidArgumentError("a delivered block carries bytes")


@dataclass
class DownloadStats:
    strategy: str = ""
    local_bytes: int = 0
    cross_bytes: int = 0
    registry_bytes: int = 0
    transfers: int = 0
    failures: int = 0
    corruptions: int = 0
    batches: int = 0
    per_peer: Counter = field(default_factory=Counter)
    total_s: float = 0.0

    def csv_row(self, layer: str) -> list:
        return [layer, self.strategy, f"{self.total_s:.6f}", self.local_bytes, self.cross_bytes, self.registry_bytes]


STATS_HEADER = ["layer", "strategy", "total_s", "local_bytes", "cross_bytes", "registry_bytes"]


def handle_block(
    record: TransferRecord,
    data: bytes | None,
    table: BlockTable,
    states: Sequence[BlockState],
    strikes: Counter | None = None,
    excluded: set | None = None,
    max_strikes: int = 2,
) -> bool:
    """Apply one transfer outcome. Returns True if the block was accepted.

    A block that fails verification from the same peer ``max_strikes`` times
    gets that peer excluded for this layer.
    """
    state = states[record.block_index]
    if state.status is not BlockStatus.DOWNLOADING:
        raise InvalidArgumentError(f"block {record.block_index} is not downloading")
    if record.outcome == "verified" and data is not None and verify_block(data, record.block_index, table):
        state.advance(BlockStatus.VERIFIED)
        return True
    state.advance(BlockStatus.PENDING)
    state.retries += 1
    if record.outcome == "verified" and strikes is not None:
        # bytes arrived but did not verify
        record.outcome = "failed"
        strikes[(record.peer, record.block_index)] += 1
        if strikes[(record.peer, record.block_index)] >= max_strikes and excluded is not None and record.peer != REGISTRY:
            excluded.add(record.peer)
    return False


class DownloadSession:
    """State for downloading one layer: block states, exclusions, statistics."""

    def __init__(
        self,
        request: DownloadRequest,
        table: BlockTable,
        scoring: ScoringState,
        config: EngineConfig | None = None,
        rng: np.random.Generator | None = None,
        strategy: Strategy | None = None,
        selection: str = "scored",
    ):
        if selection not in ("scored", "uniform"):
            raise InvalidArgumentError(f"unknown selection mode {selection!r}")
        if table.layer_digest != request.layer.digest:
            raise InvalidArgumentError("block table belongs to a different layer")
        self.request = request
        self.table = table
        self.scoring = scoring
        self.config = config or EngineConfig()
        self.rng = rng or np.random.default_rng(0)
        self.strategy = strategy or Strategy(StrategyKind.REGISTRY_DIRECT)
        self.selection = selection
        self.states = [BlockState(i) for i in range(table.block_count)]
        self.blocks: dict[int, bytes] = {}
        self.excluded: set[PeerId] = set()
        self.strikes: Counter = Counter()
        self.stats = DownloadStats(strategy=self.strategy.kind.value)
        self.registry_failures = 0

    @property
    def complete(self) -> bool:
        return all(s.status is BlockStatus.VERIFIED for s in self.states)

    def verified(self) -> set[int]:
        return {s.index for s in self.states if s.status is BlockStatus.VERIFIED}

    def next_batch(self) -> Batch:
        self.scoring.next_slot()
        batch = schedule_batch(self.table, self.states, self.config.batch_size)
        if batch:
            self.stats.batches += 1
        return batch

    def plan(
        self,
        batch: Batch,
        holders: Iterable[PeerId],
        available: Callable[[PeerId, int], bool] | None = None,
        defer: Callable[[int], bool] | None = None,
        registry_ok: bool = True,
    ) -> dict[int, PeerId]:
        """Assign every block of ``batch`` to a peer or to the registry.

        A block that no same-LAN peer can serve yet is held back while
        ``defer(index)`` says a same-LAN partial holder has it in flight, so
        the LAN pulls it across the transit link once. Held-back blocks stay
        pending and are not in the returned mapping. Blocks nobody can serve
        go to the registry. Assigned blocks move to downloading. In
        ``uniform`` mode every block picks uniformly among the peers holding
        it and the registry, with no scoring.
        """
        peers = [
            p
            for p in holders
            if p not in self.excluded and p != self.request.requester
        ]
        lan = self.request.requester.lan_id
        assignment: dict[int, PeerId] = {}
        forced_registry = [i for i in batch.block_indices if self.states[i].retries >= self.config.retry_limit]
        pending = [i for i in batch.block_indices if i not in forced_registry]
        if defer is not None:
            def local_source(i: int) -> bool:
                return any(p.lan_id == lan and (available is None or available(p, i)) for p in peers)

            held = {i for i in pending if not local_source(i) and defer(i)}
            pending = [i for i in pending if i not in held]
        else:
            held = set()
        if self.selection == "uniform":
            for index in pending:
                pool = [p for p in sorted(peers) if available is None or available(p, index)] + [REGISTRY]
                assignment[index] = pool[int(self.rng.integers(len(pool)))]
        elif self.strategy.kind is not StrategyKind.REGISTRY_DIRECT and peers and pending:
            scores = self.scoring.score(peers, lan)
            utilities = {p: s.utility for p, s in scores.items()}
            avail = None if available is None else (lambda i: [p for p in peers if available(p, i)])
            assignment = assign_peers(Batch(pending, batch.size), utilities, self.scoring, self.config.k, self.rng, avail)
        for index in batch.block_indices:
            if index in assignment or index in held:
                continue
            if not registry_ok:
                continue
            assignment[index] = REGISTRY
        for index in assignment:
            state = self.states[index]
            if state.status is BlockStatus.MISSING:
                state.advance(BlockStatus.PENDING)
            state.advance(BlockStatus.DOWNLOADING)
        return assignment

    def observe(self, record: TransferRecord) -> None:
        """Feed a successful fetch into the requester's speed windows."""
        if record.outcome == "verified" and record.peer != REGISTRY and record.elapsed > 0:
            self.scoring.record_speed(record.peer, record.bytes / record.elapsed, self.scoring.slot)

    def handle_block(self, record: TransferRecord, data: bytes | None) -> bool:
        self.stats.transfers += 1
        was_delivery = record.outcome == "verified"
        ok = handle_block(
            record, data, self.table, self.states, self.strikes, self.excluded, self.config.corruption_strikes
        )
        if ok:
            self.blocks[record.block_index] = data
            self._account(record.peer, self.table.block_length(record.block_index))
            return True
        self.stats.failures += 1
        if was_delivery:
            self.stats.corruptions += 1
        elif record.peer == REGISTRY:
            self.registry_failures += 1
        else:
            # transport failure: peer is gone or unreachable for this layer
            self.excluded.add(record.peer)
        if self.registry_failures > self.config.retry_limit * self.table.block_count:
            raise LayerUnavailableError(f"registry keeps failing for {self.request.layer.digest}")
        return False

    def _account(self, peer: PeerId, nbytes: int) -> None:
        self.stats.per_peer[peer.id] += nbytes
        if peer == REGISTRY:
            self.stats.registry_bytes += nbytes
        elif peer.lan_id == self.request.requester.lan_id:
            self.stats.local_bytes += nbytes
        else:
            self.stats.cross_bytes += nbytes

    def assemble(self) -> bytes:
        if not self.complete:
            raise InvalidArgumentError("layer is not complete")
        return b"".join(self.blocks[i] for i in range(self.table.block_count))


def execute_transfer(
    assignment: Mapping[int, PeerId],
    transport: Transport,
    table: BlockTable,
    config: EngineConfig | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> list[TransferRecord]:
    """Fetch the assigned blocks concurrently, at most ``per_peer_inflight`` per peer."""
    config = config or EngineConfig()
    limits: dict[PeerId, threading.Semaphore] = defaultdict(
        lambda: threading.Semaphore(config.per_peer_inflight)
    )
    for peer in set(assignment.values()):
        cap = config.registry_inflight if peer == REGISTRY else config.per_peer_inflight
        limits[peer] = threading.Semaphore(cap)

    def fetch(index: int, peer: PeerId) -> TransferRecord:
        with limits[peer]:
            start = clock()
            try:
                data = transport.fetch_block(peer, table, index)
            except TransferError as exc:
                log.info("block %d from %s failed: %s", index, peer, exc)
                return TransferRecord(peer, index, 0, clock() - start, "failed")
            elapsed = max(clock() - start, 1e-9)
            return TransferRecord(peer, index, len(data), elapsed, "verified" if data else "failed", data)

    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        futures = [pool.submit(fetch, i, p) for i, p in sorted(assignment.items())]
        return [f.result() for f in futures]


@dataclass
class EngineDeps:
    """What :func:`download_layer` needs from its surroundings.

    ``table_for(digest, holders)`` returns the block table (e.g. from a peer
    handshake) or None if none is available; ``registry_fetch(descriptor)``
    returns the whole layer from the upstream registry.
    """

    transport: Transport
    scoring: ScoringState
    discovery: Discovery | None = None
    table_for: Callable[[Digest, frozenset], BlockTable | None] | None = None
    registry_fetch: Callable[[LayerDescriptor], bytes] | None = None
    cached: Callable[[Digest], bytes | None] | None = None
    config: EngineConfig = field(default_factory=EngineConfig)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


@dataclass
class DownloadResult:
    data: bytes
    stats: DownloadStats


def _from_registry(request: DownloadRequest, deps: EngineDeps, stats: DownloadStats) -> DownloadResult:
    if deps.registry_fetch is None:
        raise LayerUnavailableError(f"no peers and no registry for {request.layer.digest}")
    last: Exception | None = None
    for _ in range(deps.config.retry_limit + 1):
        try:
            data = deps.registry_fetch(request.layer)
        except LayerswarmError as exc:
            last = exc
            continue
        if Digest.of(data) == request.layer.digest:
            stats.registry_bytes += len(data)
            return DownloadResult(data, stats)
        last = LayerUnavailableError("registry returned bytes with the wrong digest")
    raise LayerUnavailableError(f"registry could not supply {request.layer.digest}: {last}")


def download_layer(request: DownloadRequest, deps: EngineDeps) -> DownloadResult:
    """Download one layer end to end and return its digest-checked bytes."""
    started = time.perf_counter()
    if deps.cached is not None and (hit := deps.cached(request.layer.digest)) is not None:
        return DownloadResult(hit, DownloadStats(strategy="cache"))
    strategy = choose_strategy(request, deps.discovery, deps.config.partial_threshold)
    table = None
    if strategy.kind is not StrategyKind.REGISTRY_DIRECT and deps.table_for is not None:
        table = deps.table_for(request.layer.digest, strategy.holders)
    if table is None:
        stats = DownloadStats(strategy=StrategyKind.REGISTRY_DIRECT.value)
        result = _from_registry(request, deps, stats)
        stats.total_s = time.perf_counter() - started
        return result

    session = DownloadSession(request, table, deps.scoring, deps.config, deps.rng, strategy)
    registry_ok = deps.registry_fetch is not None
    transport = _RegistryAwareTransport(deps.transport, deps.registry_fetch)
    bound = deps.config.retry_limit * table.block_count + table.block_count
    rounds = 0
    while not session.complete:
        rounds += 1
        if rounds > bound:
            raise LayerUnavailableError(f"retry budget exhausted for {request.layer.digest}")
        batch = session.next_batch()
        live = [p for p in strategy.holders if p not in session.excluded]
        if not live and not registry_ok:
            raise LayerUnavailableError(f"all peers exhausted for {request.layer.digest}")
        assignment = session.plan(batch, live, registry_ok=registry_ok)
        if not assignment:
            raise LayerUnavailableError(f"no source can serve {request.layer.digest}")
        for record in execute_transfer(assignment, transport, table, deps.config):
            session.observe(record)
            session.handle_block(record, record.payload)
    data = session.assemble()
    if Digest.of(data) != request.layer.digest:
        log.warning("assembled layer %s has the wrong digest; refetching from registry", request.layer.digest)
        return _from_registry(request, deps, session.stats)
    session.stats.total_s = time.perf_counter() - started
    return DownloadResult(data, session.stats)


class _RegistryAwareTransport:
    """Serves REGISTRY blocks by slicing one whole-layer registry download."""

    def __init__(self, inner: Transport, registry_fetch):
        self.inner = inner
        self.registry_fetch = registry_fetch
        self._layer: bytes | None = None
        self._lock = threading.Lock()

    def fetch_block(self, peer: PeerId, table: BlockTable, index: int) -> bytes:
        if peer != REGISTRY:
            return self.inner.fetch_block(peer, table, index)
        if self.registry_fetch is None:
            raise TransferError("no registry configured")
        with self._lock:
            if self._layer is None:
                try:
                    self._layer = self.registry_fetch_descriptor(table)
                except LayerswarmError as exc:
                    raise TransferError(str(exc)) from exc
        start, end = table.block_range(index)
        return self._layer[start:end]

    def registry_fetch_descriptor(self, table: BlockTable) -> bytes:
        return self.registry_fetch(LayerDescriptor(table.layer_digest, table.layer_size_bytes))
