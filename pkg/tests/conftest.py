import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    from rgbtmae.synthetic import SceneSpec, generate_pairs

    return generate_pairs(SceneSpec(seed=11), 64)


_GATE: dict = {}


@pytest.fixture
def gate():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def report(cid: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] C{cid}: {detail}"
        _GATE[cid] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _GATE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(_GATE):
            terminalreporter.write_line(_GATE[cid])
