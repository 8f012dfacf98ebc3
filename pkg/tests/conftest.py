import numpy as np
import pytest

from latte.geometry import expmap0
from latte.model import LatteConfig


def random_points(rng, shape, dim, K=1.0, scale=1.0):
    """Points on the K-hyperboloid via the exp map of Gaussian tangents at the origin."""
    v = rng.standard_normal(tuple(shape) + (dim,)) * scale
    return expmap0(v, K)


def desk_config(**kw) -> LatteConfig:
    base = dict(
        channels=8,
        timesteps=128,
        classes=2,
        windows=1,
        components=8,
        bottleneck=8,
        filters=8,
        heads=2,
        latent_dim=16,
    )
    base.update(kw)
    return LatteConfig(**base)


def tiny_config(**kw) -> LatteConfig:
    base = dict(
        channels=4,
        timesteps=24,
        classes=3,
        windows=2,
        components=4,
        stf_kernel=3,
        bottleneck=4,
        filters=2,
        kernels=(3, 5),
        heads=2,
        latent_dim=4,
        proc_rank=2,
        dec_rank=2,
        decoder_hidden=8,
        decoder_channels=2,
    )
    base.update(kw)
    return LatteConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
