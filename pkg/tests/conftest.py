import time

import numpy as np
import pytest

from tltradeoff import _accel
from tltradeoff.backbone import toy_backbone
from tltradeoff.pipelines import pretrain
from tltradeoff.tasks import make_synthetic_task


class TickClock:
    """Advances by a fixed step on every read, so timings are reproducible."""

    def __init__(self, step=1.0, start=0.0):
        self.t = start
        self.step = step

    def __call__(self):
        self.t += self.step
        return self.t


@pytest.fixture
def tick_clock():
    return TickClock


@pytest.fixture(scope="session")
def toy_task():
    # 16x16 images -> 14x14 crops, matching toy_backbone's default input
    return make_synthetic_task(name="toy", n_classes=3, n_train=12, n_val=4, n_test=4, seed=7, overlap="disjoint")


@pytest.fixture(scope="session")
def source_task():
    return make_synthetic_task(name="source", n_classes=4, n_train=15, n_val=4, n_test=2, seed=99)


@pytest.fixture(scope="session")
def pretrained(source_task):
    b = toy_backbone(n_classes=4, seed=1, source_tag="IN")
    return pretrain(b, source_task, epochs=4, learning_rate=0.02, seed=0)


@pytest.fixture
def toy_bb():
    return toy_backbone(n_classes=3, seed=0)


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    if request.param == "numba" and not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(_accel, "USE_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


class _Criterion:
    def __init__(self, results, n, title, budget_s):
        self.results, self.n, self.title, self.budget = results, n, title, budget_s
        self.failures = []
        self.notes = []

    def check(self, ok, what):
        if not ok:
            self.failures.append(what)
        return ok

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        if elapsed > self.budget:
            self.failures.append(f"took {elapsed:.1f}s, budget {self.budget:g}s")
        ok = not self.failures
        detail = "; ".join(self.failures if not ok else self.notes)
        self.results[self.n] = (self.title, ok, f"{detail} [{elapsed:.2f}s]")
        if exc is None and not ok:
            pytest.fail(f"criterion {self.n} ({self.title}): {detail}")
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title, budget_s) as c:`` records one acceptance line."""
    results = request.config.stash[ACCEPTANCE]
    return lambda n, title, budget_s: _Criterion(results, n, title, budget_s)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
