import numpy as np
import pytest

from densepipe.data import ArrayDataset
from densepipe.model import DenseNetConfig, HeadConfig


def tiny_config(**overrides):
    """A few-hundred-parameter dense model on 8x8 inputs for fast loop tests."""
    kw = dict(stem_channels=4, growth_rate=4, block_sizes=[2, 1], bottleneck_multiplier=2,
              head=HeadConfig([8], 0.0), input_resolution=8, seed=0)
    kw.update(overrides)
    return DenseNetConfig.toy(**kw)


def blob_dataset(n, seed, size=8):
    """Two classes separated by mean brightness of the left half."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0.0, 0.3, (n, 1, size, size))
    x[:, :, :, : size // 2] += np.where(y == 0, 1.0, -1.0)[:, None, None, None]
    return ArrayDataset(x, y, ["female", "male"])


@pytest.fixture
def tiny():
    return tiny_config
