import time
from pathlib import Path

import numpy as np
import pytest

from ragprobe.copy_task import canonical_prompt, construct_copy_task_model, copy_task_vocabulary
from ragprobe.model_core import ModelConfig, init_random

FIXTURES = Path(__file__).parent / "fixtures"

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    marks = getattr(report, "_criterion", None)
    if marks is None:
        return
    n, title = marks
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        if report.failed:
            entry["ok"] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result()._criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2} {status}: {e['title']}")


TINY = ModelConfig(n_layers=4, n_heads=2, d_model=32, d_head=16, d_mlp=64, vocab_size=97, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_model():
    return init_random(TINY, seed=7)


@pytest.fixture(scope="session")
def copy_model():
    return construct_copy_task_model()


@pytest.fixture(scope="session")
def copy_vocab():
    return copy_task_vocabulary()


@pytest.fixture(scope="session")
def rag_prompt():
    return canonical_prompt("rag")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


@pytest.fixture
def timer():
    return Timer()
