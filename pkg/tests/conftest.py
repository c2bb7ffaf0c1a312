import numpy as np
import pytest

from leakedweb.core import Dataset, Trace
from leakedweb.synth import Burst, GeneratorConfig, SiteSignature, generate

EVENTS4 = ("cache-misses", "node-loads", "branch-misses", "branch-load-misses")


def make_trace(label, rows, events=None):
    rows = np.asarray(rows, dtype=np.int64)
    events = events or EVENTS4[: rows.shape[1]]
    return Trace(label=label, samples=rows, events=tuple(events))


def separable_signatures(n_sites=3, noise_cv=0.0):
    """Sites whose constant base rates differ by a factor of ten."""
    sigs = []
    for i in range(n_sites):
        rates = {e: 100.0 * 10**i * (j + 1) for j, e in enumerate(EVENTS4)}
        burst = (Burst(2 + 3 * i, 3, {e: 3.0 for e in EVENTS4}),)
        sigs.append(SiteSignature(f"site{i}", rates, {}, burst, noise_cv))
    return sigs


@pytest.fixture(scope="session")
def noiseless():
    return generate(GeneratorConfig(tuple(separable_signatures()), 8, 20, seed=1))


@pytest.fixture(scope="session")
def noisy_small():
    return generate(GeneratorConfig(tuple(separable_signatures(4, 0.1)), 12, 20, seed=2))


@pytest.fixture
def tiny_dataset():
    return Dataset((make_trace("a", [[1, 2], [3, 4]]), make_trace("b", [[5, 6], [7, 8]])))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
