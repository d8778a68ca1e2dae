import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from zerosim.collectives import ProcessGroup  # noqa: E402
from zerosim.transport import SimFabric  # noqa: E402


def run_group(n, fn):
    """Run ``fn(group)`` on every rank of an ``n``-rank sim fabric.

    Returns (results, groups) in rank order.
    """
    fabric = SimFabric(n)
    groups = [ProcessGroup(fabric.endpoint(r)) for r in range(n)]
    results = fabric.run([lambda g=g: fn(g) for g in groups])
    return results, groups


# ---------------------------------------------------------------------------
# acceptance criteria bookkeeping

import contextlib  # noqa: E402
import time  # noqa: E402

import pytest  # noqa: E402

_RESULTS = pytest.StashKey[list]()


class Criterion:
    def __init__(self, results, number, title, limit):
        self.results, self.number, self.title, self.limit = results, number, title, limit
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)


@pytest.fixture
def criterion(request):
    """``with criterion(n, title, limit_s) as c:`` times the block and logs pass/fail."""
    results = request.config.stash.setdefault(_RESULTS, [])

    @contextlib.contextmanager
    def run(number, title, limit=None):
        c = Criterion(results, number, title, limit)
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield c
            elapsed = time.perf_counter() - t0
            if limit is not None:
                assert elapsed < limit, f"took {elapsed:.2f}s, limit {limit}s"
            status = "PASS"
        finally:
            elapsed = time.perf_counter() - t0
            budget = f" limit {limit:g}s" if limit is not None else ""
            extra = f" | {'; '.join(c.notes)}" if c.notes else ""
            line = f"[{status}] criterion {number:2d}: {title} ({elapsed:.2f}s{budget}){extra}"
            results.append((number, line))
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results):
        terminalreporter.write_line(line)
