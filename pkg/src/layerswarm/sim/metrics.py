"""Run metrics, percentile summaries and CSV output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

REQUEST_HEADER = [
    "request",
    "policy",
    "seed",
    "arrival_s",
    "node",
    "lan",
    "image",
    "status",
    "distribution_s",
    "fetched_bytes",
    "local_bytes",
    "cross_bytes",
    "registry_bytes",
    "strategies",
]

SUMMARY_HEADER = [
    "policy",
    "seed",
    "A",
    "requests",
    "completed",
    "timeouts",
    "aborted",
    "mean_s",
    "p90_s",
    "p99_s",
    "cross_max_gbps",
    "cross_avg_gbps",
    "cross_lan_fraction",
    "local_bytes",
    "cross_bytes",
    "registry_bytes",
    "integrity_failures",
]

PLOT_HEADER = ["policy", "A", "mean_s", "runs"]


@dataclass
class RequestRecord:
    id: int
    arrival: float
    node: str
    lan: str
    image: str
    status: str = "running"
    distribution_time: float = 0.0
    fetched_bytes: int = 0
    local_bytes: int = 0
    cross_bytes: int = 0
    registry_bytes: int = 0
    strategies: list[str] = field(default_factory=list)

    @property
    def counted(self) -> bool:
        """Completed and timed-out requests enter the time statistics."""
        return self.status in ("completed", "timeout")


@dataclass
class MetricsReport:
    scenario: str
    policy: str
    seed: int
    A: float
    requests: list[RequestRecord] = field(default_factory=list)
    cross_buckets: dict[int, float] = field(default_factory=dict)
    bucket_s: float = 1.0
    observation_window: float = 1.0
    integrity_failures: int = 0
    layers_verified: int = 0
    evictions: list[tuple] = field(default_factory=list)
    max_link_utilisation: float = 0.0
    cross_lan_bytes: float = 0.0
    network_bytes: float = 0.0
    cache_history: list[tuple[list[int], list[int]]] = field(default_factory=list)

    def cross_lan_fraction(self) -> float:
        """Share of all transferred bytes that went over a router link."""
        return self.cross_lan_bytes / self.network_bytes if self.network_bytes else 0.0

    def times(self) -> list[float]:
        return [r.distribution_time for r in self.requests if r.counted]

    def mean_time(self) -> float:
        times = self.times()
        return sum(times) / len(times) if times else math.nan

    def cross_max_gbps(self) -> float:
        if not self.cross_buckets:
            return 0.0
        return max(self.cross_buckets.values()) * 8 / self.bucket_s / 1e9

    def cross_avg_gbps(self) -> float:
        return sum(self.cross_buckets.values()) * 8 / self.observation_window / 1e9

    def summary_row(self) -> list:
        times = self.times()
        done = [r for r in self.requests if r.status == "completed"]
        return [
            self.policy,
            self.seed,
            _f(self.A),
            len(self.requests),
            len(done),
            sum(r.status == "timeout" for r in self.requests),
            sum(r.status == "aborted" for r in self.requests),
            _f(self.mean_time()),
            _f(nearest_rank(times, 90)),
            _f(nearest_rank(times, 99)),
            _f(self.cross_max_gbps()),
            _f(self.cross_avg_gbps()),
            _f(self.cross_lan_fraction()),
            sum(r.local_bytes for r in self.requests),
            sum(r.cross_bytes for r in self.requests),
            sum(r.registry_bytes for r in self.requests),
            self.integrity_failures,
        ]

    def request_rows(self) -> list[list]:
        return [
            [
                r.id,
                self.policy,
                self.seed,
                _f(r.arrival),
                r.node,
                r.lan,
                r.image,
                r.status,
                _f(r.distribution_time),
                r.fetched_bytes,
                r.local_bytes,
                r.cross_bytes,
                r.registry_bytes,
                ";".join(r.strategies),
            ]
            for r in self.requests
        ]


def _f(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the sample at or below it."""
    if not values:
        return math.nan
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def _csv(header: list[str], rows: Iterable[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def plot_rows(reports: Sequence[MetricsReport]) -> list[list]:
    groups: dict[tuple[str, float], list[float]] = {}
    for rep in reports:
        mean = rep.mean_time()
        if not math.isnan(mean):
            groups.setdefault((rep.policy, rep.A), []).append(mean)
    return [
        [policy, _f(A), _f(sum(v) / len(v)), len(v)]
        for (policy, A), v in sorted(groups.items())
    ]


def render_report(reports: MetricsReport | Sequence[MetricsReport]) -> dict[str, str]:
    """CSV text for requests, summary, plot data, cross traffic and evictions, keyed by file name."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    return {
        "requests.csv": _csv(REQUEST_HEADER, (row for rep in reports for row in rep.request_rows())),
        "summary.csv": _csv(SUMMARY_HEADER, (rep.summary_row() for rep in reports if rep.requests)),
        "plot.csv": _csv(PLOT_HEADER, plot_rows(reports)),
        "cross_traffic.csv": _csv(
            ["policy", "seed", "t_s", "gbps"],
            (
                [rep.policy, rep.seed, _f(b * rep.bucket_s), _f(v * 8 / rep.bucket_s / 1e9)]
                for rep in reports
                for b, v in sorted(rep.cross_buckets.items())
            ),
        ),
        "evictions.csv": _csv(
            ["policy", "seed", "time", "digest", "size", "tier", "reason"],
            ([rep.policy, rep.seed, _f(t), d, size, tier, why] for rep in reports for t, d, size, tier, why in rep.evictions),
        ),
    }


def write_files(files: dict[str, str], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in files.items():
        paths[name] = out / name
        paths[name].write_text(text)
    return paths


def emit_report(reports: MetricsReport | Sequence[MetricsReport], out_dir: str | Path) -> dict[str, Path]:
    """Write the CSVs from :func:`render_report` into ``out_dir``."""
    return write_files(render_report(reports), out_dir)
