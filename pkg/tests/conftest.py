import numpy as np
import pytest

from gavd.core import TokenLayout


def layout_with(roles):
    """Layout from a role string such as ``"svvt"``; each visual token is its own frame."""
    names = {"s": "system", "v": "visual", "t": "text"}
    roles = tuple(names[c] for c in roles)
    spans, f = [], 0
    for i, r in enumerate(roles):
        if r == "visual":
            spans.append((f, i, i + 1))
            f += 1
    return TokenLayout(len(roles), roles, tuple(spans), len(roles) - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _RunCache:
    """Lazily trained toy runs keyed by (weights, seed, related_task), shared across modules."""

    def __init__(self):
        self.runs = {}
        self.seconds = {}

    def get(self, weights, seed, related_task="verification", **overrides):
        import time

        from gavd.toy.config import ToyConfig
        from gavd.toy.train import train

        key = (tuple(weights), seed, related_task, tuple(sorted(overrides.items())))
        if key not in self.runs:
            t0 = time.process_time()
            cfg = ToyConfig(seed=seed, **overrides).with_weights(*weights)
            self.runs[key] = train(cfg, related_task=related_task)
            self.seconds[key] = time.process_time() - t0
        return self.runs[key]


@pytest.fixture(scope="session")
def toy_runs():
    return _RunCache()


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
