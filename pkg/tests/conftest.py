import numpy as np
import pytest

from itfa.detector import DetectorConfig
from itfa.synthdata import ClassVocabulary, DatasetConfig, build_dataset

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line: criterion(3, ok, "detail")."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")


@pytest.fixture(scope="session")
def vocab():
    return ClassVocabulary(("circle", "square", "triangle", "ring", "cross", "star"),
                           ("pentagon", "crescent", "diamond"))


@pytest.fixture(scope="session")
def small_split():
    cfg = DatasetConfig(n_base_train=16, n_novel_pool=40, n_test=10, n_shifted_test=4, max_k=3, seed=7)
    return build_dataset(cfg)


@pytest.fixture
def det_cfg():
    return DetectorConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
