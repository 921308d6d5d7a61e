"""Registry-facing side of a node: manifest cache and blob delivery.

The gateway answers the subset of the OCI distribution API that a container
engine needs to pull an image. Manifests are kept in memory with a TTL and
revalidated against the upstream registry; blobs come from the local layer
store or from the download engine, and concurrent requests for the same blob
share one download.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Callable, Protocol

import httpx

from .content import OCI_MANIFEST_MEDIA_TYPE, Digest, ImageManifest, LayerDescriptor
from .errors import (
    InvalidArgumentError,
    LayerUnavailableError,
    LayerswarmError,
    NotFoundError,
    UpstreamUnavailableError,
)

log = logging.getLogger(__name__)

MANIFEST_TTL_S = 60.0


@dataclass(frozen=True)
class UpstreamConfig:
    base_url: str
    request_timeout: float = 30.0
    retry_limit: int = 2

    def __post_init__(self) -> None:
        if self.retry_limit < 0:
            raise InvalidArgumentError("retry limit cannot be negative")


class Upstream(Protocol):
    def fetch_manifest(self, name: str, ref: str) -> bytes: ...

    def fetch_blob(self, name: str, digest: Digest) -> bytes: ...


class HttpUpstream:
    """Plain HTTP client for an OCI registry (no auth)."""

    def __init__(self, config: UpstreamConfig, client: httpx.Client | None = None):
        self.config = config
        self.client = client or httpx.Client(base_url=config.base_url, timeout=config.request_timeout)

    def _get(self, path: str, headers: dict | None = None) -> bytes:
        last: Exception | None = None
        url = self.config.base_url.rstrip("/") + path
        for _ in range(self.config.retry_limit + 1):
            try:
                resp = self.client.get(url, headers=headers, follow_redirects=True)
            except httpx.HTTPError as exc:
                last = exc
                continue
            if resp.status_code == 404:
                raise NotFoundError(path)
            if resp.status_code >= 500:
                last = UpstreamUnavailableError(f"{path}: HTTP {resp.status_code}")
                continue
            resp.raise_for_status()
            return resp.content
        raise UpstreamUnavailableError(f"upstream unreachable for {path}: {last}")

    def fetch_manifest(self, name: str, ref: str) -> bytes:
        return self._get(f"/v2/{name}/manifests/{ref}", {"Accept": OCI_MANIFEST_MEDIA_TYPE})

    def fetch_blob(self, name: str, digest: Digest) -> bytes:
        return self._get(f"/v2/{name}/blobs/{digest}")


@dataclass
class ManifestCacheEntry:
    key: tuple[str, str]
    manifest: ImageManifest
    fetched_at: float
    ttl: float

    def fresh(self, now: float) -> bool:
        return now - self.fetched_at < self.ttl


@dataclass(frozen=True)
class ManifestResult:
    manifest: ImageManifest
    stale: bool = False


class ManifestCache:
    def __init__(self, ttl: float = MANIFEST_TTL_S):
        self.ttl = ttl
        self._entries: dict[tuple[str, str], ManifestCacheEntry] = {}
        self._lock = threading.Lock()

    def get(self, key: tuple[str, str]) -> ManifestCacheEntry | None:
        return self._entries.get(key)

    def put(self, key: tuple[str, str], raw: bytes, now: float) -> ImageManifest:
        manifest = ImageManifest.parse(raw)
        with self._lock:
            self._entries[key] = ManifestCacheEntry(key, manifest, now, self.ttl)
            self._entries[(key[0], str(manifest.digest))] = ManifestCacheEntry(
                (key[0], str(manifest.digest)), manifest, now, float("inf")
            )
        return manifest

    def find_layer(self, name: str, digest: Digest) -> LayerDescriptor | None:
        for (entry_name, _), entry in list(self._entries.items()):
            if entry_name != name:
                continue
            for layer in entry.manifest.layers:
                if layer.digest == digest:
                    return layer
        return None


# (repository name, layer) -> digest-checked layer bytes
Downloader = Callable[[str, LayerDescriptor], bytes]


class RegistryGateway:
    """get_manifest / get_blob over a manifest cache, a layer store and a downloader.

    ``downloader`` is typically a closure around
    :func:`layerswarm.engine.download_layer`; without one, blobs are pulled
    straight from the upstream.
    """

    def __init__(
        self,
        upstream: Upstream | None = None,
        downloader: Downloader | None = None,
        manifest_ttl: float = MANIFEST_TTL_S,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.upstream = upstream
        self.downloader = downloader
        self.manifests = ManifestCache(manifest_ttl)
        self.blobs: dict[Digest, bytes] = {}
        self.clock = clock
        self.upstream_calls = 0
        self.engine_calls = 0
        self._inflight: dict[Digest, Future] = {}
        self._lock = threading.Lock()

    def get_manifest(self, name: str, ref: str) -> ManifestResult:
        key = (name, ref)
        now = self.clock()
        entry = self.manifests.get(key)
        if entry is not None and entry.fresh(now):
            return ManifestResult(entry.manifest)
        if self.upstream is None:
            if entry is not None:
                return ManifestResult(entry.manifest, stale=True)
            raise NotFoundError(f"manifest {name}:{ref}")
        try:
            self.upstream_calls += 1
            raw = self.upstream.fetch_manifest(name, ref)
        except NotFoundError:
            raise
        except LayerswarmError as exc:
            if entry is not None:
                log.warning("serving stale manifest %s:%s: %s", name, ref, exc)
                return ManifestResult(entry.manifest, stale=True)
            raise NotFoundError(f"manifest {name}:{ref} (upstream unreachable)") from exc
        return ManifestResult(self.manifests.put(key, raw, now))

    def add_manifest(self, name: str, ref: str, raw: bytes) -> ImageManifest:
        return self.manifests.put((name, ref), raw, self.clock())

    def has_blob(self, digest: Digest) -> bool:
        return digest in self.blobs

    def get_blob(self, name: str, digest: Digest) -> bytes:
        if (hit := self.blobs.get(digest)) is not None:
            return hit
        layer = self.manifests.find_layer(name, digest)
        if layer is None:
            if self.upstream is None:
                raise NotFoundError(f"blob {digest}")
            # not in any cached manifest; size unknown, pull straight from upstream
            layer = LayerDescriptor(digest, 0)
        with self._lock:
            if (hit := self.blobs.get(digest)) is not None:
                return hit
            future = self._inflight.get(digest)
            owner = future is None
            if owner:
                future = self._inflight[digest] = Future()
        if not owner:
            return future.result()
        try:
            data = self._fetch(name, layer)
            if Digest.of(data) != digest:
                raise UpstreamUnavailableError(f"fetched bytes do not match {digest}")
            self.blobs[digest] = data
            future.set_result(data)
            return data
        except BaseException as exc:
            future.set_exception(exc)
            raise
        finally:
            with self._lock:
                self._inflight.pop(digest, None)

    def _fetch(self, name: str, layer: LayerDescriptor) -> bytes:
        if self.downloader is not None and layer.size_bytes > 0:
            self.engine_calls += 1
            try:
                return self.downloader(name, layer)
            except LayerUnavailableError as exc:
                raise UpstreamUnavailableError(str(exc)) from exc
        if self.upstream is None:
            raise NotFoundError(f"blob {layer.digest}")
        self.upstream_calls += 1
        return self.upstream.fetch_blob(name, layer.digest)

    def engine_version(self) -> dict:
        """Stand-in for the container engine version probe."""
        return {"engine": "unavailable", "api_version": None}
