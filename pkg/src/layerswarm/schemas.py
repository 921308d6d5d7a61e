"""Request and response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field

Policy = Literal["baseline", "naive_p2p", "scored"]


class ScenarioRef(BaseModel):
    """A shipped scenario name or server-side path, or the YAML text itself."""

    scenario: Optional[str] = None
    scenario_yaml: Optional[str] = None
    overrides: dict[str, Any] = Field(default_factory=dict)


class RunRequest(ScenarioRef):
    policy: Policy = "scored"
    seeds: Optional[list[int]] = None
    A: Optional[float] = Field(default=None, gt=0)


class CompareRequest(ScenarioRef):
    policies: Optional[list[Policy]] = None
    seeds: Optional[list[int]] = None
    A: Optional[float] = Field(default=None, gt=0)


class SweepRequest(ScenarioRef):
    A_values: Optional[list[float]] = None
    policies: Optional[list[Policy]] = None
    seeds: Optional[list[int]] = None


class RunSummary(BaseModel):
    policy: str
    seed: int
    A: float
    requests: int
    completed: int
    timeouts: int
    mean_s: Optional[float]
    p90_s: Optional[float]
    p99_s: Optional[float]
    cross_max_gbps: float
    cross_avg_gbps: float
    cross_lan_fraction: float
    integrity_failures: int


class RunResponse(BaseModel):
    scenario: str
    resolved_yaml: str
    runs: list[RunSummary]
    files: dict[str, str]


class PolicyRow(BaseModel):
    policy: str
    mean_s: Optional[float]
    p90_s: Optional[float]
    p99_s: Optional[float]
    cross_avg_gbps: float
    cross_max_gbps: float
    cross_lan_fraction: float
    mean_pct_of_baseline: Optional[float]


class ComparePoint(BaseModel):
    A: float
    rows: list[PolicyRow]


class CompareResponse(BaseModel):
    scenario: str
    resolved_yaml: str
    seeds: list[int]
    points: list[ComparePoint]
    files: dict[str, str]


class Handshake(BaseModel):
    layer_digest: str
    merkle_root: str
    block_size: int
    block_count: int
    layer_size: int
    have: list[int]


class ErrorDetail(BaseModel):
    code: str
    message: str
    detail: Any = None


class ErrorBody(BaseModel):
    errors: list[ErrorDetail]
