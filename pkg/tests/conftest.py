import numpy as np
import pytest
from hypothesis import settings

from cancelpq.bench import PipelineConfig, prepare_data

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench_cache():
    """Shared across tests so the synthetic benchmark and its codebooks are built once."""
    return {}


@pytest.fixture(scope="session")
def bench_data(bench_cache):
    return prepare_data(PipelineConfig(), bench_cache)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if rep.when == "call" and "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:>2}: {verdict}  {detail}")
