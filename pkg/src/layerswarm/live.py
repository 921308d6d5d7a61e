"""Live-mode plumbing: a node's layer store, an HTTP peer transport and static discovery."""

from __future__ import annotations

import threading
import time
from typing import Callable, Sequence

import httpx
import numpy as np

from .content import BlockTable, Digest, LayerDescriptor, build_block_table, table_from_hashes
from .engine import DownloadRequest, EngineConfig, EngineDeps, download_layer
from .errors import InvalidArgumentError, LayerswarmError, NotFoundError, TransferError
from .gateway import Upstream
from .schemas import Handshake
from .scoring import PeerId, ScoringState


class LayerStore:
    """Complete layers held by this node, each with its block table."""

    def __init__(self) -> None:
        self._data: dict[Digest, bytes] = {}
        self._tables: dict[Digest, BlockTable] = {}
        self._lock = threading.Lock()

    def put(self, data: bytes) -> BlockTable:
        table = build_block_table(data)
        with self._lock:
            self._data[table.layer_digest] = data
            self._tables[table.layer_digest] = table
        return table

    def __contains__(self, digest: Digest) -> bool:
        return digest in self._data

    def get(self, digest: Digest) -> bytes | None:
        return self._data.get(digest)

    def table(self, digest: Digest) -> BlockTable:
        table = self._tables.get(digest)
        if table is None:
            raise NotFoundError(f"layer {digest} not held")
        return table

    def block(self, digest: Digest, index: int) -> bytes:
        table = self.table(digest)
        start, end = table.block_range(index)
        return self._data[digest][start:end]

    def handshake(self, digest: Digest) -> Handshake:
        table = self.table(digest)
        root, block_size, count = table.handshake()
        return Handshake(
            layer_digest=str(digest),
            merkle_root=str(root),
            block_size=block_size,
            block_count=count,
            layer_size=table.layer_size_bytes,
            have=list(range(count)),
        )


class HttpPeerTransport:
    """Talks to other nodes' peer endpoints; a peer's id is its base URL."""

    def __init__(self, client: httpx.Client | None = None, timeout: float = 10.0):
        self.client = client or httpx.Client(timeout=timeout)

    def handshake(self, peer: PeerId, digest: Digest) -> Handshake | None:
        try:
            resp = self.client.get(f"{peer.id}/peer/layers/{digest}")
        except httpx.HTTPError:
            return None
        if resp.status_code != 200:
            return None
        return Handshake.model_validate(resp.json())

    def table(self, peer: PeerId, digest: Digest, root: str) -> BlockTable | None:
        """Fetch a peer's block hashes; rejected unless they rebuild the handshake root."""
        try:
            resp = self.client.get(f"{peer.id}/peer/layers/{digest}/table")
            if resp.status_code != 200:
                return None
            doc = resp.json()
            table = table_from_hashes(
                digest, int(doc["layer_size"]), int(doc["block_size"]), [Digest(h) for h in doc["block_hashes"]]
            )
        except (httpx.HTTPError, LayerswarmError, KeyError, ValueError):
            return None
        return table if str(table.merkle_root) == root else None

    def fetch_block(self, peer: PeerId, table: BlockTable, index: int) -> bytes:
        try:
            resp = self.client.get(f"{peer.id}/peer/layers/{table.layer_digest}/blocks/{index}")
        except httpx.HTTPError as exc:
            raise TransferError(f"{peer}: {exc}") from exc
        if resp.status_code != 200:
            raise TransferError(f"{peer}: HTTP {resp.status_code}")
        return resp.content


class StaticDiscovery:
    """A fixed peer list; a peer counts as a holder once its handshake answers in time."""

    def __init__(self, peers: Sequence[PeerId], transport: HttpPeerTransport, lan_id: str, clock: Callable[[], float] = time.monotonic):
        self.peers = list(peers)
        self.transport = transport
        self.lan_id = lan_id
        self.clock = clock
        self.handshakes: dict[tuple[PeerId, Digest], Handshake] = {}

    def _confirm(self, digest: Digest, deadline: float, pool: Sequence[PeerId]) -> set[PeerId]:
        stop = self.clock() + deadline
        found = set()
        for peer in pool:
            if self.clock() > stop:
                break
            hs = self.transport.handshake(peer, digest)
            if hs is not None:
                self.handshakes[(peer, digest)] = hs
                found.add(peer)
        return found

    def local_holders(self, digest: Digest, deadline: float) -> set[PeerId]:
        return self._confirm(digest, deadline, [p for p in self.peers if p.lan_id == self.lan_id])

    def all_holders(self, digest: Digest, deadline: float) -> set[PeerId]:
        return self._confirm(digest, deadline, self.peers)

    def table_for(self, digest: Digest, holders: frozenset) -> BlockTable | None:
        for peer in sorted(holders):
            hs = self.handshakes.get((peer, digest))
            if hs is None:
                continue
            table = self.transport.table(peer, digest, hs.merkle_root)
            if table is not None:
                return table
        return None


def live_downloader(
    store: LayerStore,
    me: PeerId,
    transport: HttpPeerTransport,
    discovery: StaticDiscovery,
    upstream: Upstream | None,
    config: EngineConfig | None = None,
    scoring: ScoringState | None = None,
    seed: int = 0,
) -> Callable[[str, LayerDescriptor], bytes]:
    """A gateway downloader running the block engine against live peers, storing results."""
    scoring = scoring or ScoringState()
    config = config or EngineConfig()
    rng = np.random.default_rng(seed)

    def download(name: str, layer: LayerDescriptor) -> bytes:
        if layer.size_bytes <= 0:
            raise InvalidArgumentError("layer size unknown")
        deps = EngineDeps(
            transport=transport,
            scoring=scoring,
            discovery=discovery,
            table_for=discovery.table_for,
            registry_fetch=(lambda d: upstream.fetch_blob(name, d.digest)) if upstream is not None else None,
            cached=store.get,
            config=config,
            rng=rng,
        )
        request = DownloadRequest(layer, me, config.deadline)
        data = download_layer(request, deps).data
        store.put(data)
        return data

    return download
