import numpy as np
import pytest

from lidsub import data, nn


@pytest.fixture(scope="session")
def blobs2d():
    return data.synthetic_blobs(300, 3, 2, 0.03, seed=0)


@pytest.fixture(scope="session")
def blob_net(blobs2d):
    """Small relu classifier on 2-D blobs; trains to 100% accuracy."""
    return nn.train(nn.init_network((2, 32, 32, 3), 0), blobs2d, nn.TrainConfig(0.1, 200, 32, 0))


@pytest.fixture(scope="session")
def blob_targets(blob_net, blobs2d):
    idx = data.select_attack_indices(blob_net, blobs2d, 60, seed=1)
    return blobs2d.samples[idx], blobs2d.labels[idx]


def random_net(rng, sizes=None):
    if sizes is None:
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
    weights = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [rng.normal(size=o) for o in sizes[1:]]
    acts = ["relu"] * (len(sizes) - 2) + ["identity"]
    return nn.Network(tuple(weights), tuple(biases), tuple(acts))


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
