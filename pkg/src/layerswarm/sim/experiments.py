"""Small self-contained experiments: selection regret and LAN cache size."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scoring import RegretLedger, record_round, select_peer
from .metrics import MetricsReport
from .scenario import Scenario
from .simulator import run

STATIONARY_UTILITIES = (62.0, 60.0, 57.0, 51.0, 44.0, 30.0)


def regret_curve(
    horizon: int,
    seed: int,
    utilities=STATIONARY_UTILITIES,
    tau0: float = 20.0,
) -> np.ndarray:
    """Cumulative regret R(1..horizon) of tempered softmax selection over fixed utilities."""
    rng = np.random.default_rng(seed)
    candidates = [(i, float(u)) for i, u in enumerate(utilities)]
    best = max(utilities)
    ledger = RegretLedger()
    curve = np.empty(horizon)
    for t in range(1, horizon + 1):
        chosen = select_peer(candidates, t, tau0, rng)
        record_round(ledger, utilities[chosen], best)
        curve[t - 1] = ledger.cumulative
    return curve


def regret_ratios(checkpoints=(1000, 4000, 16000), seeds=range(20), **kwargs) -> list[float]:
    """R(c[i+1]) / R(c[i]) with R averaged over seeds."""
    horizon = max(checkpoints)
    mean = np.mean([regret_curve(horizon, s, **kwargs) for s in seeds], axis=0)
    values = [mean[c - 1] for c in checkpoints]
    return [b / a for a, b in zip(values, values[1:])]


def fold_trace(scenario: Scenario, lan: str, nodes: int) -> Scenario:
    """Shrink ``lan`` to ``nodes`` nodes, mapping its trace entries round-robin onto the survivors."""
    doc = scenario.model_dump(by_alias=True)
    for spec in doc["topology"]["lans"]:
        if spec["id"] == lan:
            spec["nodes"] = nodes
    for entry in doc["workload"]["trace"] or ():
        owner, index = entry["node"].rsplit("-", 1)
        if owner == lan:
            entry["node"] = f"{lan}-{(int(index) - 1) % nodes + 1}"
    return Scenario.model_validate(doc)


@dataclass
class CacheRun:
    nodes: int
    reports: list[MetricsReport]

    @property
    def mean_time(self) -> float:
        times = [t for r in self.reports for t in r.times()]
        return sum(times) / len(times)


def lan_cache_experiment(scenario: Scenario, nodes: int, lan: str = "edge", seeds=None, policy: str = "scored") -> CacheRun:
    folded = fold_trace(scenario, lan, nodes)
    seeds = list(seeds if seeds is not None else scenario.run_seeds)
    return CacheRun(nodes, [run(folded, policy, s) for s in seeds])
