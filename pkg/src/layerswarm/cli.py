"""Command line: runs simulations locally, or against a running service with --server."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import yaml

from .errors import LayerswarmError
from .schemas import CompareRequest, CompareResponse, RunRequest, RunResponse, SweepRequest

POLICY = click.Choice(["baseline", "naive_p2p", "scored"])


def _parse_value(text: str):
    return yaml.safe_load(text)


def _overrides(opts: dict) -> dict:
    out: dict = {}
    for item in opts.pop("set_") or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        out[key.strip()] = _parse_value(value)
    mapping = {
        "time_limit": "time_limit",
        "alpha": "scoring.alpha",
        "beta": "scoring.beta",
        "gamma": "scoring.gamma",
        "lam": "scoring.lambda",
        "window": "scoring.window",
        "tau0": "scoring.tau0",
        "cache_capacity": "cache.capacity",
        "cache_threshold": "cache.threshold",
        "cache_target": "cache.target",
        "cache_strategy": "cache.strategy",
    }
    for opt, path in mapping.items():
        value = opts.pop(opt, None)
        if value is not None:
            out[path] = value
    if opts.pop("custom_scorer", False):
        out["scoring.custom_scorer"] = True
    return out


def _scenario_fields(scenario: str) -> dict:
    """Local files travel as YAML text so a remote server can read them."""
    path = Path(scenario)
    if path.is_file():
        return {"scenario_yaml": path.read_text(), "scenario": None}
    return {"scenario": scenario}


def scenario_options(f):
    options = [
        click.argument("scenario"),
        click.option("--set", "set_", multiple=True, metavar="KEY=VALUE", help="Dotted scenario override, e.g. workload.A=0.05."),
        click.option("--time-limit", type=float, default=None, help="Per-request time limit in seconds (scenario default 1200)."),
        click.option("--alpha", type=float), click.option("--beta", type=float), click.option("--gamma", type=float),
        click.option("--lambda", "lam", type=float, help="Popularity weight on the layer count."),
        click.option("--window", type=int, help="Speed samples kept per peer."),
        click.option("--tau0", type=float, help="Initial softmax temperature."),
        click.option("--custom-scorer", is_flag=True, help="Use the pluggable scorer hook."),
        click.option("--cache-capacity", help="Per-node cache capacity, e.g. 400MiB."),
        click.option("--cache-threshold", type=float), click.option("--cache-target", type=float),
        click.option("--cache-strategy", type=click.Choice(["tiered", "lru"])),
        click.option("--seed", "seeds", type=int, multiple=True, help="Repeatable; defaults to the scenario's run_seeds."),
        click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True),
        click.option("--server", default=None, help="Base URL of a running service; otherwise runs in-process."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _call(server: str | None, path: str, request, local, response_model):
    if server is None:
        return local(request)
    import httpx

    try:
        resp = httpx.post(server.rstrip("/") + path, json=request.model_dump(mode="json"), timeout=None)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"cannot reach {server}: {exc}") from exc
    if resp.status_code != 200:
        try:
            err = resp.json()["errors"][0]
            message = err["message"]
        except (ValueError, KeyError, IndexError, TypeError, AttributeError):
            message = resp.text
        raise click.ClickException(f"server returned {resp.status_code}: {message}")
    return response_model.model_validate(resp.json())


def _write(out: str, response) -> None:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for name, text in response.files.items():
        (root / name).write_text(text)
    (root / "scenario.resolved.yaml").write_text(response.resolved_yaml)


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _echo_points(resp: CompareResponse) -> None:
    click.echo(f"{'A':>8} {'policy':<10} {'mean_s':>9} {'p90_s':>9} {'p99_s':>9} {'cross_avg':>10} {'cross_frac':>10} {'%base':>8}")
    for point in resp.points:
        for r in point.rows:
            click.echo(
                f"{point.A:>8.4f} {r.policy:<10} {_fmt(r.mean_s):>9} {_fmt(r.p90_s):>9} {_fmt(r.p99_s):>9} "
                f"{_fmt(r.cross_avg_gbps):>10} {_fmt(r.cross_lan_fraction):>10} {_fmt(r.mean_pct_of_baseline):>8}"
            )


def _guard(fn):
    """Report library errors as CLI errors rather than tracebacks."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LayerswarmError as exc:
            raise click.ClickException(str(exc)) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int) -> None:
    """Simulate and serve peer-to-peer container layer distribution."""
    import logging

    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)], stream=sys.stderr)


@main.command()
@scenario_options
@click.option("--policy", type=POLICY, default="scored", show_default=True)
@click.option("--A", "A", type=float, default=None, help="Arrival-rate scale factor.")
@_guard
def run(scenario, seeds, out, server, policy, A, **opts):
    """Run one policy over a scenario and write per-request CSVs."""
    from . import service

    req = RunRequest(policy=policy, seeds=list(seeds) or None, A=A, overrides=_overrides(opts), **_scenario_fields(scenario))
    resp: RunResponse = _call(server, "/sim/run", req, service.run_scenario, RunResponse)
    _write(out, resp)
    for r in resp.runs:
        click.echo(
            f"seed={r.seed} policy={r.policy} requests={r.requests} completed={r.completed} timeouts={r.timeouts} "
            f"mean_s={_fmt(r.mean_s)} p90_s={_fmt(r.p90_s)} cross_avg_gbps={_fmt(r.cross_avg_gbps)}"
        )
    click.echo(f"wrote {', '.join(sorted(resp.files))} to {out}")


@main.command()
@scenario_options
@click.option("--policy", "policies", type=POLICY, multiple=True, help="Repeatable; defaults to the scenario's policies.")
@click.option("--A", "A", type=float, default=None)
@_guard
def compare(scenario, seeds, out, server, policies, A, **opts):
    """Run several policies over the same seeds and compare them."""
    from . import service

    req = CompareRequest(
        policies=list(policies) or None, seeds=list(seeds) or None, A=A, overrides=_overrides(opts), **_scenario_fields(scenario)
    )
    resp = _call(server, "/sim/compare", req, service.compare_scenario, CompareResponse)
    _write(out, resp)
    _echo_points(resp)


@main.command()
@scenario_options
@click.option("--policy", "policies", type=POLICY, multiple=True)
@click.option("--A-values", "A_values", default=None, help="Comma-separated A values; defaults to the scenario's sweep.")
@_guard
def sweep(scenario, seeds, out, server, policies, A_values, **opts):
    """Compare policies across several arrival-rate scale factors."""
    from . import service

    values = None
    if A_values:
        try:
            values = [float(v) for v in A_values.split(",") if v.strip()]
        except ValueError as exc:
            raise click.BadParameter(str(exc), param_hint="--A-values") from exc
    req = SweepRequest(
        A_values=values, policies=list(policies) or None, seeds=list(seeds) or None, overrides=_overrides(opts),
        **_scenario_fields(scenario),
    )
    resp = _call(server, "/sim/sweep", req, service.sweep_scenario, CompareResponse)
    _write(out, resp)
    _echo_points(resp)


@main.command()
def scenarios() -> None:
    """List the shipped scenarios."""
    from .sim.scenario import shipped_scenarios

    for name, path in shipped_scenarios().items():
        click.echo(f"{name}\t{path}")


@main.command()
@click.option("--horizon", type=int, default=16000, show_default=True)
@click.option("--seed", "seeds", type=int, multiple=True)
@click.option("--tau0", type=float, default=20.0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default="regret.csv", show_default=True)
def regret(horizon, seeds, tau0, out):
    """Cumulative selection regret over a fixed utility set, averaged over seeds."""
    import numpy as np

    from .sim.experiments import regret_curve

    seeds = list(seeds) or list(range(20))
    mean = np.mean([regret_curve(horizon, s, tau0=tau0) for s in seeds], axis=0)
    with open(out, "w") as fh:
        fh.write("round,cumulative_regret\n")
        for t, value in enumerate(mean, start=1):
            fh.write(f"{t},{value:.6f}\n")
    marks = [c for c in (1000, 4000, 16000) if c <= horizon]
    for a, b in zip(marks, marks[1:]):
        click.echo(f"R({b})/R({a}) = {mean[b - 1] / mean[a - 1]:.3f}")
    click.echo(f"wrote {out}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--lan", default=None, help="This node's LAN; enables peer mode together with --peer.")
@click.option("--peer", "peers", multiple=True, metavar="URL@LAN", help="Repeatable peer base URL and its LAN.")
@click.option("--upstream", default=None, help="Upstream registry base URL.")
@click.option("--public-url", default=None, help="URL other peers use to reach this node.")
def serve(host, port, lan, peers, upstream, public_url):
    """Start the HTTP service (OCI pull API, peer endpoints, simulation API)."""
    import uvicorn

    from .api import NodeService, create_app, live_node
    from .gateway import HttpUpstream, RegistryGateway, UpstreamConfig

    if lan or peers:
        parsed = []
        for item in peers:
            url, sep, peer_lan = item.rpartition("@")
            if not sep or not url:
                raise click.BadParameter(f"expected URL@LAN, got {item!r}", param_hint="--peer")
            parsed.append((url.rstrip("/"), peer_lan))
        node = live_node(public_url or f"http://{host}:{port}", lan or "default", parsed, upstream)
    else:
        node = NodeService(RegistryGateway(HttpUpstream(UpstreamConfig(upstream)) if upstream else None))
    uvicorn.run(create_app(node), host=host, port=port)


if __name__ == "__main__":
    main()
