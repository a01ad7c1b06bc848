import numpy as np
import pytest

from nullforge import forgetting

CRITERIA: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str = "") -> bool:
    CRITERIA.append((criterion, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_benchmark():
    """The default 10-seed benchmark: prepared seeds plus every (scheme, seed) report."""
    cfg = forgetting.BenchmarkConfig()
    prepared = {}
    reports = []
    for seed in range(10):
        prepared[seed] = forgetting.prepare_seed(cfg, seed)
    for scheme in forgetting.DEFAULT_SCHEMES:
        for seed in range(10):
            reports.append(forgetting.run_cell(scheme, seed, cfg, *prepared[seed]))
    return cfg, prepared, reports
