import numpy as np
import pytest

from excursionlab.panel import Panel


def make_panel(n=40, T=4, p=1, seed=0, link="identity", avail_rate=1.0, prob=None):
    rng = np.random.default_rng(seed)
    avail = (rng.random((n, T)) < avail_rate).astype(float)
    pr = rng.uniform(0.2, 0.8, (n, T)) if prob is None else np.full((n, T), prob)
    treat = avail * (rng.random((n, T)) < pr)
    z = rng.normal(size=(n, T))
    if link == "identity":
        y = 1.0 + z + treat * 0.7 + rng.normal(size=(n, T))
    else:
        y = rng.poisson(np.exp(0.3 + 0.2 * z + 0.2 * treat)).astype(float)
    tcol = np.broadcast_to(np.arange(1, T + 1, dtype=float), (n, T))
    hist = np.stack([tcol, z], axis=-1)
    mod = np.ones((n, T, 1))
    if p > 1:
        extra = rng.normal(size=(n, T, p - 1))
        mod = np.concatenate([mod, extra], axis=-1)
    return Panel(avail, pr, treat, y, hist, mod, ("t", "z"))


@pytest.fixture
def small_panel():
    return make_panel()


@pytest.fixture
def log_panel():
    return make_panel(link="log", seed=3)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """report(k, ok, detail) records one acceptance line and fails the test if not ok."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
