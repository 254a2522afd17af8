"""Session fixtures and the acceptance-criteria reporter."""

import time

import pytest

from eepipe.config import desk_scale_config
from eepipe.training import train

_CRITERIA: list = []


def record_criterion(number, name, passed, detail):
    _CRITERIA.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, passed, detail in sorted(_CRITERIA):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number} ({name}): {detail}")


@pytest.fixture(scope="session")
def desk_run():
    """One desk-scale training run (8 layers, 2 exits, 500 steps) shared by
    the convergence and inference acceptance tests."""
    cfg = desk_scale_config()
    corpus = cfg.corpus()
    t0 = time.perf_counter()
    model, history = train(cfg, corpus)
    seconds = time.perf_counter() - t0
    return {"cfg": cfg, "corpus": corpus, "model": model, "history": history,
            "seconds": seconds}
