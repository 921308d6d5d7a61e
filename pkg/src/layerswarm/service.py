"""Simulation operations behind both the HTTP API and the local CLI."""

from __future__ import annotations

import csv
import io
import math

import yaml

from .errors import InvalidArgumentError
from .schemas import ComparePoint, CompareRequest, CompareResponse, PolicyRow, RunRequest, RunResponse, RunSummary, ScenarioRef, SweepRequest
from .sim.compare import Comparison, run_comparison
from .sim.metrics import MetricsReport, nearest_rank, render_report
from .sim.scenario import Scenario, parse_scenario, resolve_scenario
from .sim.simulator import run


def _num(x: float) -> float | None:
    return None if x is None or math.isnan(x) else x


def load(ref: ScenarioRef) -> Scenario:
    if ref.scenario_yaml is not None:
        scenario = parse_scenario(ref.scenario_yaml, "<request>")
    elif ref.scenario:
        scenario = resolve_scenario(ref.scenario)
    else:
        raise InvalidArgumentError("give a scenario name, path or YAML text")
    return scenario.with_overrides(**ref.overrides) if ref.overrides else scenario


def resolved_yaml(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.model_dump(by_alias=True, mode="json"), sort_keys=False)


def summarize(rep: MetricsReport) -> RunSummary:
    times = rep.times()
    return RunSummary(
        policy=rep.policy,
        seed=rep.seed,
        A=rep.A,
        requests=len(rep.requests),
        completed=sum(r.status == "completed" for r in rep.requests),
        timeouts=sum(r.status == "timeout" for r in rep.requests),
        mean_s=_num(rep.mean_time()),
        p90_s=_num(nearest_rank(times, 90)),
        p99_s=_num(nearest_rank(times, 99)),
        cross_max_gbps=rep.cross_max_gbps(),
        cross_avg_gbps=rep.cross_avg_gbps(),
        cross_lan_fraction=rep.cross_lan_fraction(),
        integrity_failures=rep.integrity_failures,
    )


def run_scenario(req: RunRequest) -> RunResponse:
    scenario = load(req)
    if req.A is not None:
        scenario = scenario.with_overrides(**{"workload.A": req.A})
    seeds = req.seeds or scenario.run_seeds
    reports = [run(scenario, req.policy, s) for s in seeds]
    return RunResponse(
        scenario=scenario.name,
        resolved_yaml=resolved_yaml(scenario),
        runs=[summarize(r) for r in reports],
        files=render_report(reports),
    )


def _point(cmp: Comparison) -> ComparePoint:
    rows = []
    for name, summary in cmp.policies.items():
        pct = cmp.ratio(name) * 100 if "baseline" in cmp.policies else math.nan
        rows.append(
            PolicyRow(
                policy=name,
                mean_s=_num(summary.mean_time),
                p90_s=_num(summary.p90),
                p99_s=_num(summary.p99),
                cross_avg_gbps=summary.cross_avg_gbps,
                cross_max_gbps=summary.cross_max_gbps,
                cross_lan_fraction=summary.cross_lan_fraction,
                mean_pct_of_baseline=_num(pct),
            )
        )
    return ComparePoint(A=cmp.A, rows=rows)


def _comparison_csv(points: list[ComparePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["A", *PolicyRow.model_fields])
    for point in points:
        for row in point.rows:
            cells = ["nan" if v is None else f"{v:.6f}" if isinstance(v, float) else v for v in row.model_dump().values()]
            writer.writerow([f"{point.A:.6f}", *cells])
    return buf.getvalue()


def _respond(scenario: Scenario, seeds: list[int], comparisons: list[Comparison]) -> CompareResponse:
    points = [_point(c) for c in comparisons]
    reports = [r for c in comparisons for s in c.policies.values() for r in s.reports]
    files = render_report(reports)
    files["comparison.csv"] = _comparison_csv(points)
    return CompareResponse(
        scenario=scenario.name, resolved_yaml=resolved_yaml(scenario), seeds=seeds, points=points, files=files
    )


def compare_scenario(req: CompareRequest) -> CompareResponse:
    scenario = load(req)
    seeds = req.seeds or scenario.run_seeds
    cmp = run_comparison(scenario, seeds, req.policies, req.A)
    return _respond(scenario, seeds, [cmp])


def sweep_scenario(req: SweepRequest) -> CompareResponse:
    scenario = load(req)
    seeds = req.seeds or scenario.run_seeds
    values = req.A_values or scenario.sweep
    if not values:
        raise InvalidArgumentError("no A values given and the scenario defines no sweep")
    return _respond(scenario, seeds, [run_comparison(scenario, seeds, req.policies, A) for A in values])
