import numpy as np
import pytest

from fedsim.data import ClientShard, FederatedDataset, generate_synthetic

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_synthetic():
    return generate_synthetic(0.8, 0.5, num_clients=8, feature_dim=6, num_classes=3, total_samples=400, seed=3)


def toy_dataset(num_clients=5, n=30, feature_dim=4, num_classes=3, seed=0) -> FederatedDataset:
    rng = np.random.default_rng(seed)
    shards = []
    for k in range(num_clients):
        m = n + 5 * k
        x = rng.normal(size=(m, feature_dim)) + k * 0.3
        y = rng.integers(0, num_classes, m)
        shards.append(ClientShard(k, x[: m - 6], y[: m - 6], x[m - 6 :], y[m - 6 :]))
    return FederatedDataset(num_classes, feature_dim, shards)
