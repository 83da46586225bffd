import numpy as np
import pytest

from mdpssp.core import MdpModel
from mdpssp.simulator import SimConfig, generate_ground_truth, generate_users

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}

A, B = 0, 1


@pytest.fixture
def worked_model():
    """Two steps, two items; SSP beats greedy by showing B first."""
    return MdpModel(
        reward=[[0.5, 0.35], [0.5, 0.35]],
        quit=[[0.6, 0.2], [1.0, 1.0]],
        item_ids=("A", "B"),
    )


def random_model(rng: np.random.Generator, T: int, K: int) -> MdpModel:
    return MdpModel(rng.random((T, K)), rng.random((T, K)))


@pytest.fixture(scope="session")
def default_config():
    return SimConfig()


@pytest.fixture(scope="session")
def default_truth(default_config):
    return generate_ground_truth(default_config)


@pytest.fixture(scope="session")
def small_config():
    return SimConfig(num_users=40, sessions_per_user=5, catalog_size=400, candidates_per_user=60)


@pytest.fixture(scope="session")
def small_world(small_config):
    gt = generate_ground_truth(small_config)
    users = generate_users(small_config, first_index=small_config.num_users)
    return gt, users


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split(".")[0])):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture(scope="session")
def planted_fit():
    """MI-SVM and the inherited-label baseline on default planted-witness logs."""
    from mdpssp.models import fit_mi_svm, train_quit_model_no_mil
    from mdpssp.simulator import generate_planted_witness_sessions

    train = generate_planted_witness_sessions(seed=7)
    held_out = generate_planted_witness_sessions(seed=8)
    return train, held_out, fit_mi_svm(train), train_quit_model_no_mil(train)
