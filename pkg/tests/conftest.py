import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from forestseg.model import CHANNEL_ORDER, Channel, ChannelCloud, MultispectralCloud
from forestseg.synthetic import SceneSpec, generate_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_multispectral(rng, n, labeled=True, z_norm=False, extent=10.0):
    xyz = rng.uniform(0, extent, size=(n, 3))
    refl = rng.normal(-6, 2, size=(n, 3)).astype(np.float32)
    labels = rng.integers(0, 6, n) if labeled else None
    zn = xyz[:, 2] - xyz[:, 2].min() if z_norm else None
    return MultispectralCloud(xyz, refl, labels, zn, {"source": "test"})


def random_channel(rng, channel: Channel, n, extent=5.0, labeled=True):
    xyz = rng.uniform(0, extent, size=(n, 3))
    refl = rng.normal(-6, 2, size=n).astype(np.float32)
    labels = rng.integers(0, 6, n) if labeled else None
    return ChannelCloud(channel, xyz, refl, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(extent_m=(20.0, 20.0), n_trees=9, total_points=40_000, seed=3))


@pytest.fixture(scope="session")
def channel_order():
    return CHANNEL_ORDER


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
