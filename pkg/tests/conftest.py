import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from popsteer import data

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def split_from_sequences(seqs, n_items=None):
    """SplitBundle whose training sequences are ``seqs`` (valid/test set to item 0)."""
    n_items = n_items or (max(max(s) for s in seqs if len(s)) + 1)
    train = tuple(np.array(s, dtype=np.int64) for s in seqs)
    stamps = tuple(np.arange(len(s), dtype=np.int64) for s in seqs)
    zeros = np.zeros(len(seqs), dtype=np.int64)
    return data.SplitBundle(train, stamps, zeros, zeros.copy(),
                            tuple(str(u) for u in range(len(seqs))), tuple(str(i) for i in range(n_items)))


def split_with_counts(counts):
    """One user per item occurrence is wasteful; a single user holding every event suffices."""
    seq = [i for i, c in enumerate(counts) for _ in range(c)]
    return split_from_sequences([seq], n_items=len(counts))


@pytest.fixture(scope="session")
def small_log():
    return data.generate_powerlaw_dataset(120, 80, (8, 20), 1.0, seed=3, n_clusters=4, affinity=0.6)


@pytest.fixture(scope="session")
def small_split(small_log):
    return data.chronological_split(data.kcore_filter(small_log, 5))


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
