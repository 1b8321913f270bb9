import numpy as np
import pytest

from adapfl.data import build_client_datasets
from adapfl.federation import Client
from adapfl.synthetic import SyntheticConfig, generate_synthetic_sequence

# smallest 9-layer chain that still maps 50x50 inputs to 32x32 outputs
SLIM = (3, 2, 2, 2, 2, 2, 2, 2, 2, 1)


@pytest.fixture(scope="session")
def small_frames():
    return generate_synthetic_sequence(SyntheticConfig(n_frames=80, seed=1))


@pytest.fixture(scope="session")
def small_clients(small_frames):
    return {z: Client(z, ds) for z, ds in build_client_datasets(small_frames).items()}


def random_weights(rng, channels=(2, 3, 1), dtype=np.float64):
    from adapfl.nn import ModelWeights
    arrays = []
    for cin, cout in zip(channels, channels[1:]):
        arrays += [rng.normal(size=(cout, cin, 3, 3)).astype(dtype), rng.normal(size=cout).astype(dtype)]
    return ModelWeights.from_arrays(arrays)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
