import numpy as np
import pytest

from protolab.data import SynthConfig, generate
from protolab.model import ModelConfig, ProtoPNet
from protolab.training import TrainConfig, train_schedule

TINY_SYNTH = SynthConfig(classes=3, train_per_class=12, test_per_class=6, seed=11)
TINY_MODEL = ModelConfig(num_classes=3, prototypes_per_class=2, latent_dim=8, channels=(4, 8, 8))
TINY_TRAIN = TrainConfig(warmup_epochs=1, joint_epochs=2, last_layer_iters=3, lr_joint_backbone=3e-3,
                         lr_last_layer=3e-3, batch_size=12, seed=5)


@pytest.fixture(scope="session")
def tiny_data():
    return generate(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_result(tiny_data):
    model = ProtoPNet.initialize(TINY_MODEL, np.random.default_rng(0))
    return train_schedule(model, tiny_data, TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_model(tiny_result):
    return tiny_result.model


@pytest.fixture
def fresh_model():
    return ProtoPNet.initialize(TINY_MODEL, np.random.default_rng(1))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
