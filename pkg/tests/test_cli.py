import csv

import httpx
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from layerswarm.api import create_app
from layerswarm.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    return result


def test_scenarios_lists_shipped(runner):
    result = invoke(runner, "scenarios")
    assert result.exit_code == 0
    names = [line.split("\t")[0] for line in result.output.splitlines()]
    assert {"replica", "minimal", "single"} <= set(names)


def test_run_writes_files(runner, tmp_path):
    out = tmp_path / "out"
    result = invoke(runner, "run", "single", "--policy", "baseline", "--out", out)
    assert result.exit_code == 0, result.output
    assert "completed=1" in result.output
    rows = list(csv.DictReader((out / "requests.csv").open()))
    assert len(rows) == 1 and 7.5 < float(rows[0]["distribution_s"]) < 9.3
    assert (out / "scenario.resolved.yaml").read_text().startswith("name: single")
    for name in ("summary.csv", "plot.csv", "cross_traffic.csv", "evictions.csv"):
        assert (out / name).exists()


def test_overrides_reach_the_scenario(runner, tmp_path):
    out = tmp_path / "o"
    result = invoke(
        runner, "run", "minimal", "--seed", 2, "--set", "workload.A=0.2", "--time-limit", 300, "--lambda", 2.5, "--out", out
    )
    assert result.exit_code == 0, result.output
    resolved = (out / "scenario.resolved.yaml").read_text()
    assert "A: 0.2" in resolved and "time_limit: 300.0" in resolved and "lambda: 2.5" in resolved


def test_compare_and_sweep(runner, tmp_path):
    result = invoke(runner, "compare", "minimal", "--seed", 1, "--policy", "baseline", "--policy", "scored", "--out", tmp_path / "c")
    assert result.exit_code == 0, result.output
    assert "baseline" in result.output and "100.0000" in result.output
    assert (tmp_path / "c" / "comparison.csv").exists()
    result = invoke(runner, "sweep", "minimal", "--seed", 1, "--policy", "baseline", "--A-values", "0.02,0.1", "--out", tmp_path / "s")
    assert result.exit_code == 0, result.output
    rows = list(csv.DictReader((tmp_path / "s" / "plot.csv").open()))
    assert [float(r["A"]) for r in rows] == [0.02, 0.1]


def test_local_scenario_file(runner, tmp_path):
    path = tmp_path / "mine.yaml"
    path.write_text("name: mine\ntopology: {lans: [{id: a, nodes: 2}]}\nworkload:\n  catalog: [{name: x, size: 8MiB}]\n  trace: [{time: 0s, node: a-2, image: x}]\n")
    result = invoke(runner, "run", path, "--policy", "scored", "--out", tmp_path / "o")
    assert result.exit_code == 0, result.output


def test_errors_are_clean(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("topology:\n  lans:\n    - {id: a, nodes: 2, intra: {bandwidth: -1Mbps}}\nworkload: {catalog: []}\n")
    result = runner.invoke(main, ["run", str(bad), "--out", str(tmp_path / "o")])
    assert result.exit_code == 1 and "line 3" in result.output and "Traceback" not in result.output
    result = runner.invoke(main, ["run", "no-such-scenario", "--out", str(tmp_path / "o")])
    assert result.exit_code == 1 and "cannot read scenario" in result.output
    result = runner.invoke(main, ["run", "minimal", "--set", "workload.A", "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    result = runner.invoke(main, ["run", "minimal", "--set", "workload.A=-3", "--out", str(tmp_path / "o")])
    assert result.exit_code == 1 and "workload" in result.output


def test_regret_command(runner, tmp_path):
    out = tmp_path / "r.csv"
    result = invoke(runner, "regret", "--horizon", 4000, "--seed", 0, "--seed", 1, "--out", out)
    assert result.exit_code == 0 and "R(4000)/R(1000)" in result.output
    lines = out.read_text().splitlines()
    assert lines[0] == "round,cumulative_regret" and len(lines) == 4001


def test_server_mode(runner, tmp_path, monkeypatch):
    client = TestClient(create_app())
    calls = []

    def post(url, json, timeout):
        calls.append(url)
        path = httpx.URL(url).path
        resp = client.post(path, json=json)
        return httpx.Response(resp.status_code, content=resp.content, headers={"content-type": "application/json"})

    monkeypatch.setattr(httpx, "post", post)
    out = tmp_path / "srv"
    result = invoke(runner, "run", "single", "--policy", "baseline", "--server", "http://sim:8000", "--out", out)
    assert result.exit_code == 0, result.output
    assert calls == ["http://sim:8000/sim/run"]
    assert (out / "requests.csv").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("topology:\n  lans:\n    - {id: a, nodes: 0}\nworkload: {catalog: []}\n")
    result = runner.invoke(main, ["run", str(bad), "--server", "http://sim:8000", "--out", str(out)])
    assert result.exit_code == 1 and "422" in result.output and "line 3" in result.output
