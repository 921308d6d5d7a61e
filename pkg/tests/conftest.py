import functools

from layerswarm.sim.scenario import parse_scenario, resolve_scenario


@functools.lru_cache(maxsize=None)
def shipped(name: str):
    return resolve_scenario(name)


def scenario_from(text: str):
    return parse_scenario(text, "<test>")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            for name, value in getattr(rep, "user_properties", ()):
                if name == "criterion":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
