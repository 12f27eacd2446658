import numpy as np
import pytest

from rapnet.backbone import TOY_PLAN, BackboneConfig, random_backbone
from rapnet.heads import init_attention


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_backbone():
    return random_backbone(BackboneConfig(plan=TOY_PLAN), seed=0)


@pytest.fixture(scope="session")
def toy_attention():
    return init_attention(16, seed=0)


@pytest.fixture
def rgb_image(rng):
    return rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)
