"""Scenario files: a YAML description of topology, workload and policies.

Quantities accept units: bandwidths like ``100Mbps``/``1Gbps`` (bits per
second), sizes like ``437.57MB``/``1.5GiB`` (bytes), durations like ``20ms``
(seconds). Bare numbers are taken in the base unit. Validation errors carry
the line of the offending YAML node.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import Annotated

from ..errors import ScenarioError

POLICIES = ("baseline", "naive_p2p", "scored")
# churn target resolved when the event fires: the current tracker, or on
# join the last tracker that left
TRACKER_ALIAS = "@tracker"

_BW = {"bps": 1, "kbps": 1e3, "mbps": 1e6, "gbps": 1e9}
_SIZE = {"b": 1, "kb": 1e3, "mb": 1e6, "gb": 1e9, "kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30}
_DUR = {"us": 1e-6, "ms": 1e-3, "s": 1.0, "min": 60.0}
_QTY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)\s*$")


def _quantity(value: Any, units: dict[str, float], what: str) -> float:
    if isinstance(value, bool):
        raise ValueError(f"{what} must be a number")
    if isinstance(value, (int, float)):
        return float(value)
    m = _QTY.match(str(value))
    if not m:
        raise ValueError(f"cannot read {what} {value!r}")
    number, unit = m.groups()
    unit = unit.lower() or next(iter(units))
    if unit not in units:
        raise ValueError(f"unknown {what} unit {unit!r} (expected one of {sorted(units)})")
    return float(number) * units[unit]


def parse_bandwidth(value: Any) -> float:
    return _quantity(value, _BW, "bandwidth")


def parse_size(value: Any) -> int:
    return int(round(_quantity(value, _SIZE, "size")))


def parse_duration(value: Any) -> float:
    return _quantity(value, _DUR, "duration")


Bandwidth = Annotated[float, BeforeValidator(parse_bandwidth)]
Size = Annotated[int, BeforeValidator(parse_size)]
Duration = Annotated[float, BeforeValidator(parse_duration)]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleStep(_Model):
    at: Duration
    bandwidth: Optional[Bandwidth] = None
    latency: Optional[Duration] = None
    loss: Optional[float] = None

    @model_validator(mode="after")
    def check(self):
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.loss is not None and not 0 <= self.loss <= 1:
            raise ValueError("loss must be within [0, 1]")
        return self


class LinkProfile(_Model):
    bandwidth: Bandwidth
    latency: Duration = 0.0
    loss: float = 0.0
    schedule: list[ScheduleStep] = Field(default_factory=list)

    @field_validator("bandwidth")
    @classmethod
    def positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("bandwidth must be positive")
        return v

    @field_validator("latency")
    @classmethod
    def nonnegative_latency(cls, v: float) -> float:
        if v < 0:
            raise ValueError("latency cannot be negative")
        return v

    @field_validator("loss")
    @classmethod
    def loss_range(cls, v: float) -> float:
        if not 0 <= v <= 1:
            raise ValueError("loss must be within [0, 1]")
        return v


class LanSpec(_Model):
    id: str
    nodes: int = Field(ge=1)
    intra: Optional[LinkProfile] = None
    router: Optional[LinkProfile] = None


class ChurnEvent(_Model):
    time: Duration
    node: str
    action: Literal["leave", "join"]


class Topology(_Model):
    lans: list[LanSpec] = Field(min_length=1)
    intra: LinkProfile = LinkProfile(bandwidth=1e9, latency=0.0002)
    router: LinkProfile = LinkProfile(bandwidth=1e9, latency=0.005)
    registry_lan: Optional[str] = None
    registry_link: Optional[LinkProfile] = None
    churn: list[ChurnEvent] = Field(default_factory=list)

    @model_validator(mode="after")
    def check(self):
        ids = [lan.id for lan in self.lans]
        if len(set(ids)) != len(ids):
            raise ValueError("LAN ids must be unique")
        if self.registry_lan is None:
            self.registry_lan = ids[0]
        elif self.registry_lan not in ids:
            raise ValueError(f"registry_lan {self.registry_lan!r} is not a LAN")
        nodes = set(self.node_ids())
        for event in self.churn:
            if event.node != TRACKER_ALIAS and event.node not in nodes:
                raise ValueError(f"churn names unknown node {event.node!r}")
        return self

    def node_ids(self) -> list[str]:
        return [f"{lan.id}-{i}" for lan in self.lans for i in range(1, lan.nodes + 1)]

    def lan_of(self, node: str) -> str:
        return node.rsplit("-", 1)[0]

    def intra_for(self, lan: LanSpec) -> LinkProfile:
        return lan.intra or self.intra

    def router_for(self, lan: LanSpec) -> LinkProfile:
        return lan.router or self.router


class LayerSpec(_Model):
    name: Optional[str] = None
    size: Size

    @field_validator("size")
    @classmethod
    def positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("layer size must be positive")
        return v


class ImageSpec(_Model):
    name: str
    size: Optional[Size] = None
    layers: list[LayerSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def default_layers(self):
        if not self.layers:
            if not self.size or self.size <= 0:
                raise ValueError("an image needs a positive size or explicit layers")
            # default split: 10% / 30% / 60%
            a = self.size // 10
            b = self.size * 3 // 10
            self.layers = [LayerSpec(size=s) for s in (a, b, self.size - a - b) if s > 0]
        for i, layer in enumerate(self.layers):
            if layer.name is None:
                layer.name = f"{self.name}#{i}"
        self.size = sum(layer.size for layer in self.layers)
        return self


class TraceEntry(_Model):
    time: Duration
    node: str
    image: str


class Workload(_Model):
    catalog: list[ImageSpec] = Field(default_factory=list)
    A: float = 0.01
    B: float = 0.0
    horizon: Duration = 600.0
    size_unit: float = float(1 << 30)
    requesters: Optional[list[str]] = None
    trace: Optional[list[TraceEntry]] = None

    @model_validator(mode="after")
    def check(self):
        if self.A <= 0:
            raise ValueError("A must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        names = [img.name for img in self.catalog]
        if len(set(names)) != len(names):
            raise ValueError("image names must be unique")
        for entry in self.trace or ():
            if entry.image not in names:
                raise ValueError(f"trace names unknown image {entry.image!r}")
        return self


class SeedHolding(_Model):
    node: str
    images: list[str]


class CacheSpec(_Model):
    capacity: Optional[Size] = None
    threshold: float = 0.10
    target: float = 0.20
    strategy: Literal["tiered", "lru"] = "tiered"
    lans: Optional[list[str]] = None  # LANs whose nodes get a bounded cache; all when unset


class FaultSpec(_Model):
    corrupt_nodes: list[str] = Field(default_factory=list)
    corrupt_probability: float = Field(default=1.0, ge=0, le=1)


class EngineSpec(_Model):
    batch_size: int = Field(default=16, ge=1)
    k: int = Field(default=3, ge=1)
    per_peer_inflight: int = Field(default=4, ge=1)
    registry_inflight: int = Field(default=4, ge=1)
    deadline: float = Field(default=2.0, gt=0)
    retry_limit: int = Field(default=5, ge=0)
    defer_limit: float = Field(default=30.0, ge=0)
    poll_interval: float = Field(default=0.5, gt=0)
    max_concurrent_layers: int = Field(default=3, ge=1)
    multicast_window: float = Field(default=0.2, gt=0)


class ScoringSpec(_Model):
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    lam: float = Field(default=1.0, alias="lambda")
    window: int = 16
    tau0: float = 20.0
    custom_scorer: bool = False

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TrackerSpec(_Model):
    ttl: float = 60.0
    announce_interval: float = 30.0
    heartbeat_interval: float = 1.0
    miss_threshold: int = 3
    round_interval: float = 0.5
    diameter_bound: int = 10
    query_overhead: float = 0.005


class Scenario(_Model):
    name: str = "scenario"
    topology: Topology
    workload: Workload
    seeds: list[SeedHolding] = Field(default_factory=list)
    policies: list[Literal["baseline", "naive_p2p", "scored"]] = Field(default_factory=lambda: list(POLICIES))
    run_seeds: list[int] = Field(default_factory=lambda: [1])
    sweep: list[float] = Field(default_factory=list)
    time_limit: Duration = 1200.0
    bucket: float = 1.0
    observation_window: Optional[float] = None
    cache: CacheSpec = CacheSpec()
    faults: FaultSpec = FaultSpec()
    engine: EngineSpec = EngineSpec()
    scoring: ScoringSpec = ScoringSpec()
    tracker: TrackerSpec = TrackerSpec()

    @model_validator(mode="after")
    def check(self):
        nodes = set(self.topology.node_ids())
        images = {img.name for img in self.workload.catalog}
        lans = {lan.id for lan in self.topology.lans}
        for holding in self.seeds:
            if holding.node not in nodes:
                raise ValueError(f"seed names unknown node {holding.node!r}")
            for image in holding.images:
                if image not in images:
                    raise ValueError(f"seed names unknown image {image!r}")
        for entry in self.workload.trace or ():
            if entry.node not in nodes:
                raise ValueError(f"trace names unknown node {entry.node!r}")
        for lan in self.workload.requesters or ():
            if lan not in lans:
                raise ValueError(f"requesters names unknown LAN {lan!r}")
        for lan in self.cache.lans or ():
            if lan not in lans:
                raise ValueError(f"cache names unknown LAN {lan!r}")
        for node in self.faults.corrupt_nodes:
            if node not in nodes:
                raise ValueError(f"faults name unknown node {node!r}")
        if any(a <= 0 for a in self.sweep):
            raise ValueError("sweep values of A must be positive")
        if self.time_limit <= 0:
            raise ValueError("time limit must be positive")
        if self.observation_window is None:
            self.observation_window = self.workload.horizon + self.time_limit
        return self

    def node_count(self) -> int:
        return len(self.topology.node_ids())

    def with_overrides(self, **changes) -> "Scenario":
        """Copy with dotted-path overrides, e.g. ``{"workload.A": 0.05}``, revalidated."""
        doc = self.model_dump(by_alias=True)
        for dotted, value in changes.items():
            target = doc
            *head, last = dotted.split(".")
            for key in head:
                if not isinstance(target, dict) or not isinstance(target.get(key), dict):
                    raise ScenarioError(f"override {dotted!r}: no section {key!r}")
                target = target[key]
            if last not in target:
                raise ScenarioError(f"override {dotted!r}: unknown field {last!r}")
            target[last] = value
        try:
            return Scenario.model_validate(doc)
        except ValidationError as exc:
            err = exc.errors()[0]
            where = ".".join(str(p) for p in err["loc"]) or "<root>"
            raise ScenarioError(f"override: {where}: {err['msg']}") from None


def _line_of(root: yaml.Node | None, loc: tuple) -> int | None:
    node = root
    line = None if node is None else node.start_mark.line + 1
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    break
            if nxt is None:
                break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
        line = node.start_mark.line + 1
    return line


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"{source}: not valid YAML: {exc}", None if mark is None else mark.line + 1) from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{source}: top level must be a mapping", 1)
    try:
        return Scenario.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(err["loc"])
        where = ".".join(str(p) for p in loc) or "<root>"
        raise ScenarioError(f"{source}: {where}: {err['msg']}", _line_of(root, loc)) from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text, str(path))


def shipped_scenarios() -> dict[str, Path]:
    here = Path(__file__).resolve().parent.parent / "scenarios"
    return {p.stem: p for p in sorted(here.glob("*.yaml"))}


def resolve_scenario(name_or_path: str | Path) -> Scenario:
    """Load a scenario by file path or by the name of a shipped scenario."""
    path = Path(name_or_path)
    if not path.exists():
        shipped = shipped_scenarios()
        if str(name_or_path) in shipped:
            path = shipped[str(name_or_path)]
    return load_scenario(path)
