import numpy as np
import pytest

from app.color import srgb_to_lab
from app.network import BackboneConfig
from app.styles import make_dataset, planted_global_style, render_synthetic_image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Narrow widths so a full forward/backward pass stays fast"""
    return BackboneConfig(stage_channels=(4, 4, 6, 6, 6), context_channels=6, head_hidden=(6, 6))


@pytest.fixture
def gradcheck_config():
    """Default widths; no reflection pad so 8x8 images are accepted"""
    return BackboneConfig(reflect_pad=0)


@pytest.fixture
def lab_image():
    img, _ = render_synthetic_image(3, 24, 20)
    return srgb_to_lab(img)


@pytest.fixture
def global_dataset():
    return make_dataset(planted_global_style(5), n_train=3, n_test=2, w=24, h=24)
