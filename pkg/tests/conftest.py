import numpy as np
import pytest

from spire.geometry import DetectorGeometry, amo_instrument, build_qgrid


@pytest.fixture(scope="session")
def paper_geom():
    return amo_instrument()


@pytest.fixture(scope="session")
def paper_qgrid(paper_geom):
    return build_qgrid(paper_geom)


@pytest.fixture(scope="session")
def toy_geom():
    # Wide-angle 16-pixel detector whose corner q stays inside a small volume.
    return DetectorGeometry(n_side=16, pixel_size=0.01, distance=0.15, photon_energy=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
