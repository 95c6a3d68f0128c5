import numpy as np
import pytest
from scipy import ndimage

from services.fixture_service import FixtureService, sharp_texture
from services.raw_service import RawService


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def texture():
    """Smooth, well-textured 128x128 RGB image"""
    return sharp_texture(128, seed=3)


@pytest.fixture
def texture_luma(texture):
    return texture.mean(axis=-1)


@pytest.fixture
def raw_service():
    return RawService(max_workers=2)


@pytest.fixture
def blur_split(texture):
    """(sharp, frames): frame 0 sharp on the left half, frame 1 sharp on the right"""
    blurred = ndimage.gaussian_filter(texture, sigma=(3.0, 3.0, 0), mode="reflect")
    half = texture.shape[1] // 2
    left_sharp = blurred.copy()
    left_sharp[:, :half] = texture[:, :half]
    right_sharp = blurred.copy()
    right_sharp[:, half:] = texture[:, half:]
    return texture, [left_sharp, right_sharp]


@pytest.fixture
def raw_burst_dir(tmp_path):
    """Four-frame 64x64 synthetic raw burst with gt.png"""
    burst_dir = tmp_path / "bursts" / "mini_000"
    FixtureService().generate(burst_dir, size=64, n_frames=4, seed=2)
    return burst_dir
