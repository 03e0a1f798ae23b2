import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fed3d.detector import ModelDims, build_model

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


TINY = ModelDims(n_layers=2, n_heads=2, prompt_len=2, d_model=4, d_head=2, n_tokens=2, n_points=6,
                 n_classes=3, point_width=4)


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def tiny_model():
    return build_model(TINY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides):
    from fed3d.config import ExperimentConfig

    base = dict(clients=4, client_fraction=0.5, rounds=2, local_epochs=1, batch_size=4, lr_prompt=0.01,
                lr_head=0.02, n_layers=1, n_heads=2, prompt_len=2, d_model=8, d_head=4, n_tokens=4,
                n_points=16, n_classes=4, point_width=8, samples_per_class=12, pretrain_epochs=2,
                pretrain_per_class=10, imbalance_ratio=3.0)
    base.update(overrides)
    return ExperimentConfig(**base).validate()


@pytest.fixture(scope="session")
def small_backbone():
    from fed3d.experiment import pretrain_backbone

    return pretrain_backbone(small_config())[1]
