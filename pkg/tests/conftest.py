import numpy as np
import pytest

from lesionmil.volume import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def demo_phantom():
    """A mid-sized phantom with lesions, shared by read-only tests."""
    spec = PhantomSpec(
        dims=(96, 96, 128), spacing=(1.0, 1.0, 1.0),
        background_mean=-800.0, background_std=60.0,
        lesion_count=(3, 5), lesion_radius_mm=(9.0, 14.0),
        lesion_mean=-980.0, lesion_std=40.0, smoothing_mm=1.2, seed=7070,
    )
    return generate_phantom(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
