import numpy as np
import pytest

from fairpo.data import SplitSpec, SyntheticConfig, generate_synthetic, partition_by_frequency, split_dataset

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    _CRITERIA[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_data():
    cfg = SyntheticConfig(n_instances=200, n_labels=6, n_features=5, seed=3)
    ds = generate_synthetic(cfg)
    train, test = split_dataset(ds, SplitSpec(0.75, 1))
    return ds, train, test, partition_by_frequency(train, 0.34)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
