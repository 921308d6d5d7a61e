"""HTTP service: OCI pull endpoints, peer block endpoints and the simulation API."""

from __future__ import annotations

from dataclasses import dataclass, field

import httpx

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import service
from .content import OCI_MANIFEST_MEDIA_TYPE, Digest
from .errors import InvalidArgumentError, NotFoundError, ScenarioError, UpstreamUnavailableError
from .gateway import HttpUpstream, RegistryGateway, UpstreamConfig
from .live import HttpPeerTransport, LayerStore, StaticDiscovery, live_downloader
from .schemas import CompareRequest, CompareResponse, ErrorBody, ErrorDetail, Handshake, RunRequest, RunResponse, SweepRequest
from .scoring import PeerId
from .sim.scenario import shipped_scenarios

API_VERSION_HEADER = {"Docker-Distribution-API-Version": "registry/2.0"}


@dataclass
class NodeService:
    gateway: RegistryGateway = field(default_factory=RegistryGateway)
    store: LayerStore = field(default_factory=LayerStore)


def live_node(
    self_url: str,
    lan: str,
    peers: list[tuple[str, str]],
    upstream_url: str | None = None,
    seed: int = 0,
    client: httpx.Client | None = None,
) -> NodeService:
    """A node that pulls blobs through the block engine from ``peers`` (url, lan) and the upstream."""
    store = LayerStore()
    transport = HttpPeerTransport(client)
    me = PeerId(self_url, lan)
    discovery = StaticDiscovery([PeerId(u, l) for u, l in peers if u != self_url], transport, lan)
    upstream = HttpUpstream(UpstreamConfig(upstream_url), client) if upstream_url else None
    download = live_downloader(store, me, transport, discovery, upstream, seed=seed)
    return NodeService(RegistryGateway(upstream, download), store)


def _error(status: int, code: str, message: str, detail=None) -> JSONResponse:
    body = ErrorBody(errors=[ErrorDetail(code=code, message=message, detail=detail)])
    return JSONResponse(body.model_dump(), status_code=status, headers=API_VERSION_HEADER)


def _digest(text: str) -> Digest:
    try:
        return Digest.parse(text)
    except (InvalidArgumentError, ValueError) as exc:
        raise InvalidArgumentError(f"bad digest {text!r}") from exc


def create_app(node: NodeService | None = None) -> FastAPI:
    node = node or NodeService()
    app = FastAPI(title="layerswarm", version="0.1.0")
    app.state.node = node

    @app.exception_handler(ScenarioError)
    async def scenario_error(request: Request, exc: ScenarioError):
        return _error(422, "SCENARIO_INVALID", str(exc), {"line": exc.line})

    @app.exception_handler(InvalidArgumentError)
    async def bad_argument(request: Request, exc: InvalidArgumentError):
        return _error(400, "INVALID_ARGUMENT", str(exc))

    @app.exception_handler(UpstreamUnavailableError)
    async def upstream_down(request: Request, exc: UpstreamUnavailableError):
        return _error(502, "UPSTREAM_UNAVAILABLE", str(exc))

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "engine": node.gateway.engine_version()}

    # OCI distribution subset

    @app.get("/v2/")
    def api_version() -> Response:
        return JSONResponse({}, headers=API_VERSION_HEADER)

    @app.api_route("/v2/{name:path}/manifests/{ref}", methods=["GET", "HEAD"])
    def manifest(name: str, ref: str, request: Request) -> Response:
        try:
            result = node.gateway.get_manifest(name, ref)
        except NotFoundError as exc:
            return _error(404, "MANIFEST_UNKNOWN", str(exc))
        m = result.manifest
        headers = {
            **API_VERSION_HEADER,
            "Docker-Content-Digest": str(m.digest),
            "Content-Length": str(len(m.raw_bytes)),
        }
        if result.stale:
            headers["Warning"] = '110 layerswarm "stale manifest"'
        body = b"" if request.method == "HEAD" else m.raw_bytes
        return Response(body, media_type=OCI_MANIFEST_MEDIA_TYPE, headers=headers)

    @app.api_route("/v2/{name:path}/blobs/{digest}", methods=["GET", "HEAD"])
    def blob(name: str, digest: str, request: Request) -> Response:
        d = _digest(digest)
        data = node.store.get(d)
        if data is None:
            try:
                data = node.gateway.get_blob(name, d)
            except NotFoundError as exc:
                return _error(404, "BLOB_UNKNOWN", str(exc))
            if d not in node.store:
                node.store.put(data)
        headers = {**API_VERSION_HEADER, "Docker-Content-Digest": str(d), "Content-Length": str(len(data))}
        body = b"" if request.method == "HEAD" else data
        return Response(body, media_type="application/octet-stream", headers=headers)

    # peer protocol

    @app.get("/peer/layers/{digest}", response_model=Handshake)
    def handshake(digest: str):
        try:
            return node.store.handshake(_digest(digest))
        except NotFoundError as exc:
            return _error(404, "BLOB_UNKNOWN", str(exc))

    @app.get("/peer/layers/{digest}/table")
    def table(digest: str):
        try:
            return node.store.table(_digest(digest)).to_json()
        except NotFoundError as exc:
            return _error(404, "BLOB_UNKNOWN", str(exc))

    @app.get("/peer/layers/{digest}/blocks/{index}")
    def block(digest: str, index: int) -> Response:
        try:
            data = node.store.block(_digest(digest), index)
        except NotFoundError as exc:
            return _error(404, "BLOB_UNKNOWN", str(exc))
        return Response(data, media_type="application/octet-stream")

    @app.post("/peer/layers", response_model=Handshake)
    async def add_layer(request: Request):
        """Seed this node with a layer (raw bytes in the body)."""
        table = node.store.put(await request.body())
        return node.store.handshake(table.layer_digest)

    # simulation

    @app.get("/sim/scenarios")
    def scenarios() -> dict:
        return {"scenarios": sorted(shipped_scenarios())}

    @app.post("/sim/run", response_model=RunResponse)
    def sim_run(req: RunRequest):
        return service.run_scenario(req)

    @app.post("/sim/compare", response_model=CompareResponse)
    def sim_compare(req: CompareRequest):
        return service.compare_scenario(req)

    @app.post("/sim/sweep", response_model=CompareResponse)
    def sim_sweep(req: SweepRequest):
        return service.sweep_scenario(req)

    return app
