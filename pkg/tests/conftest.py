import numpy as np
import pytest

from scoped import (
    DsmTrainConfig,
    MlpDenoiser,
    build_linear_schedule,
    train_dsm,
)


@pytest.fixture(scope="session")
def default_schedule():
    return build_linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def trained_mlp(default_schedule):
    """Small DSM-trained network shared by tests that need a realistic model.

    Trained on an off-center Gaussian cloud in d=4; a few epochs suffice for
    smoothness/JVP tests (quality-sensitive tests train their own).
    """
    rng = np.random.default_rng(123)
    data = 2.0 + rng.standard_normal((1500, 4))
    model = MlpDenoiser(4, hidden=(48, 48), seed=3, schedule=default_schedule)
    model, losses = train_dsm(
        model, data, default_schedule, DsmTrainConfig(epochs=25, seed=3)
    )
    return model
