import numpy as np
import pytest

from src.idlewatch.sequential_stats import AmplitudeModel
from src.idlewatch.signal_model import InterferenceParams, ScenarioConfig, UlaGeometry


@pytest.fixture
def geometry():
    return UlaGeometry(num_elements=4, spacing_wavelengths=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def model_3db():
    return AmplitudeModel.from_inr_db(3.0)


def make_scenario(inr_db=None, theta=0.0, change_point=1, num_elements=4, noise_std=1.0, seed=0):
    """Scenario helper; ``inr_db=None`` gives pure noise."""
    interference = None
    if inr_db is not None:
        interference = InterferenceParams(amplitude=10.0 ** (inr_db / 20.0) * noise_std, direction=theta)
    return ScenarioConfig(
        geometry=UlaGeometry(num_elements=num_elements),
        noise_std=noise_std,
        interference=interference,
        change_point=change_point,
        rng_seed=seed,
    )


@pytest.fixture
def scenario():
    return make_scenario
