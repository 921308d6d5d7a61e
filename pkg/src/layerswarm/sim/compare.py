"""Multi-seed comparisons between policies and sweeps over the arrival scale A."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .metrics import MetricsReport, nearest_rank
from .scenario import Scenario
from .simulator import run


@dataclass
class PolicySummary:
    policy: str
    reports: list[MetricsReport] = field(default_factory=list)

    def _mean(self, values: list[float]) -> float:
        values = [v for v in values if not math.isnan(v)]
        return sum(values) / len(values) if values else math.nan

    @property
    def mean_time(self) -> float:
        """Mean over all counted requests of all seeds."""
        times = [t for r in self.reports for t in r.times()]
        return sum(times) / len(times) if times else math.nan

    @property
    def p90(self) -> float:
        return nearest_rank([t for r in self.reports for t in r.times()], 90)

    @property
    def p99(self) -> float:
        return nearest_rank([t for r in self.reports for t in r.times()], 99)

    @property
    def cross_avg_gbps(self) -> float:
        return self._mean([r.cross_avg_gbps() for r in self.reports])

    @property
    def cross_max_gbps(self) -> float:
        return self._mean([r.cross_max_gbps() for r in self.reports])

    @property
    def cross_lan_fraction(self) -> float:
        total = sum(r.network_bytes for r in self.reports)
        return sum(r.cross_lan_bytes for r in self.reports) / total if total else 0.0


@dataclass
class Comparison:
    scenario: str
    A: float
    policies: dict[str, PolicySummary]

    def ratio(self, policy: str, metric: str = "mean_time", reference: str = "baseline") -> float:
        """``metric`` of ``policy`` relative to the reference policy (reference = 1.0)."""
        ref = getattr(self.policies[reference], metric)
        value = getattr(self.policies[policy], metric)
        return value / ref if ref else math.nan

    def rows(self) -> list[list]:
        header = ["policy", "A", "mean_s", "p90_s", "p99_s", "cross_avg_gbps", "cross_max_gbps", "mean_pct_of_baseline"]
        rows = [header]
        for name, summary in self.policies.items():
            pct = self.ratio(name) * 100 if "baseline" in self.policies else math.nan
            rows.append(
                [
                    name,
                    f"{self.A:.6f}",
                    f"{summary.mean_time:.6f}",
                    f"{summary.p90:.6f}",
                    f"{summary.p99:.6f}",
                    f"{summary.cross_avg_gbps:.6f}",
                    f"{summary.cross_max_gbps:.6f}",
                    f"{pct:.2f}",
                ]
            )
        return rows


def run_comparison(
    scenario: Scenario,
    seeds: Iterable[int] | None = None,
    policies: Sequence[str] | None = None,
    A: float | None = None,
) -> Comparison:
    seeds = list(seeds if seeds is not None else scenario.run_seeds)
    policies = list(policies or scenario.policies)
    if A is not None:
        scenario = scenario.with_overrides(**{"workload.A": A})
    out = {p: PolicySummary(p, [run(scenario, p, s) for s in seeds]) for p in policies}
    return Comparison(scenario.name, scenario.workload.A, out)


def sweep(
    scenario: Scenario,
    A_values: Sequence[float],
    seeds: Iterable[int] | None = None,
    policies: Sequence[str] | None = None,
) -> list[Comparison]:
    seeds = list(seeds if seeds is not None else scenario.run_seeds)
    return [run_comparison(scenario, seeds, policies, A) for A in A_values]
