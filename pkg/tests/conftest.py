import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from actvit.synth import PlantedTask, ToyTransformer, generate_dataset  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_b():
    return ToyTransformer.random("toy-b", n_layers=6, hidden_dim=32, seed=1)


@pytest.fixture(scope="session")
def planted_linear(toy_b):
    task = PlantedTask(signal_layer=3, signal_token_offset=-1, flip_p=0.0, min_tokens=8, max_tokens=16)
    return generate_dataset(toy_b, task, 400, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
