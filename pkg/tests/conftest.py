import warnings

import numpy as np
import pytest

from stratpart.domain import SubjectRecord, validate_dataset
from stratpart.presets import paper2019
from stratpart.simulator import generate_population


@pytest.fixture(scope="session")
def planted():
    """One calibrated population (seed 1)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_population(paper2019(1))


@pytest.fixture(scope="session")
def planted_ds(planted):
    return planted.dataset


def make_records(n=40, seed=0, locations=("A", "B")):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        code = int(rng.integers(1, 6))
        recs.append(
            SubjectRecord(
                subject_id=f"S{i:03d}",
                location=locations[i % len(locations)],
                enroll_date=f"2019-09-{6 + i % 3:02d}",
                treat_date=f"2019-09-{16 + i % 2:02d}",
                b_prior=float(rng.uniform(0.05, 0.6)),
                b_post=float(rng.uniform(0.05, 0.6)),
                b_ref=float(rng.uniform(0, 1)),
                z=int(rng.random() < 2 / 3),
                a=int(code == 1),
                raw_outcome_code=code,
            )
        )
    return recs


@pytest.fixture
def small_ds():
    return validate_dataset(make_records(), {"A": 0.35, "B": 0.4})


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
