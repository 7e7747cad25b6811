import numpy as np
import pytest

from sparseft.models import Checkpoint, ModelSpec, build_model
from sparseft.tasks import PretrainConfig, TaskSpec, pretrain, synth_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return ModelSpec(2, (4,), "tanh", "classification", 2)


@pytest.fixture
def tiny_model(tiny_spec):
    return build_model(tiny_spec, 7)


@pytest.fixture(scope="session")
def small_task():
    spec = TaskSpec(input_dim=4, classes=2, modes=1, n_pretrain=300, n_train=40, n_test=200,
                    shift=0.5, label_noise=0.0, separation=3.0, seed=3, name="small")
    return synth_task(spec)


@pytest.fixture(scope="session")
def small_checkpoint(small_task):
    cfg = PretrainConfig(hidden_dims=(8,), epochs=5, batch_size=32)
    return pretrain(small_task.pretrain, 2, cfg)


@pytest.fixture
def toy_checkpoint(tiny_model):
    return Checkpoint(tiny_model.spec, tiny_model.theta.copy(), seed=7)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
