import numpy as np
import pytest

from pdro.data import gen_biased_sequences, gen_toy_gaussian
from pdro.history import CheckpointRecord, RunHistory
from pdro.models import ModelParams

# one "PASS/FAIL [criterion] ..." line per acceptance check, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_small():
    return gen_toy_gaussian(3, n_train=1200, n_valid=300, n_test=600)


@pytest.fixture(scope="session")
def seq_small():
    return gen_biased_sequences(3, n_train=600, n_valid=200, n_test=200)


def random_history(rng: np.random.Generator, n_records=None, n_valid=None, fingerprint="v0",
                   tie_prone=False) -> RunHistory:
    """Synthetic RunHistory with random log-weights and 0-1 errors.

    Record 0 has zero log-weights, as a trainer's initial checkpoint does.
    With ``tie_prone`` errors come from a tiny pool so robust scores tie often.
    """
    n_records = n_records or int(rng.integers(1, 12))
    n_valid = n_valid or int(rng.integers(5, 40))
    groups = rng.integers(0, 3, size=n_valid)
    records = []
    for t in range(n_records):
        lw = np.zeros(n_valid) if t == 0 else rng.normal(0.0, rng.uniform(0.1, 2.0), size=n_valid)
        if tie_prone:
            base = rng.integers(0, 2, size=n_valid).astype(float)
            errors = base if rng.uniform() < 0.5 else np.zeros(n_valid)
        else:
            errors = (rng.uniform(size=n_valid) < rng.uniform(0.1, 0.6)).astype(float)
        losses = rng.exponential(size=n_valid)
        records.append(CheckpointRecord(t, lw, losses, errors))
    return RunHistory({"method": "pdro_relaxed"}, records, ModelParams(np.zeros(3)), None, groups,
                      fingerprint, [])
