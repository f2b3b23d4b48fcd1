import pytest

from neutral_diff.config import load_preset
from neutral_diff.hypothesis_checker import choose_constants

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def preset():
    """Cached (config, report) pairs by preset name."""
    cache = {}

    def get(name):
        if name not in cache:
            cfg = load_preset(name)
            cache[name] = (cfg, choose_constants(cfg.equation, cfg.solver.d, cfg.solver.check_window))
        return cache[name]

    return get


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
