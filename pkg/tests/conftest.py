import numpy as np
import pytest

from cifield.core import GaussianSet
from cifield.deform import DeformationField
from cifield.splat import Camera


def random_gaussians(rng, n=30, k=2, spread=0.6, scale=(0.05, 0.25)):
    g = GaussianSet.create(
        rng.uniform(-spread, spread, (n, 3)), k,
        scales=rng.uniform(*scale, (n, 3)),
        colors=rng.uniform(0, 1, (n, 3)),
        opacity=rng.uniform(0.05, 0.95, n),
        occupancy=rng.uniform(0.05, 0.95, n),
        base_identity=rng.dirichlet(np.ones(k), n),
    )
    g.rotations = rng.normal(size=(n, 4))
    g.normalize_rotations()
    g.calib_log = rng.normal(0, 0.5, (n, k))
    return g


def small_field(rng, hidden=(8, 8), n_freq_pos=1, n_freq_time=1, gain=0.3):
    d = DeformationField.create(hidden=hidden, n_freq_pos=n_freq_pos, n_freq_time=n_freq_time,
                                rng=rng, zero_heads=False)
    for w in d.weights:
        w *= gain
    for b in d.biases:
        b[:] = rng.normal(0, 0.05, b.shape)
    return d


def camera(size=32, focal=40.0, eye=(0.3, -0.2, -4.0)):
    return Camera.look_at(np.array(eye), np.zeros(3), np.array([0.0, -1.0, 0.0]), focal, focal, size, size)


def gradient_scene(seed, n=40, k=2, size=32):
    """Soft scene for finite differences.

    Every footprint covers the whole image above the rasteriser's skip
    threshold and transmittance stays well above the early-exit level, so
    the rendered loss is smooth around the sampled parameters.
    """
    rng = np.random.default_rng(seed)
    g = GaussianSet.create(
        rng.uniform(-0.5, 0.5, (n, 3)), k,
        scales=rng.uniform(1.0, 1.5, (n, 3)),
        colors=rng.uniform(0, 1, (n, 3)),
        opacity=rng.uniform(0.05, 0.15, n),
        occupancy=rng.uniform(0.05, 0.15, n),
        base_identity=rng.dirichlet(np.ones(k), n),
    )
    g.rotations = rng.normal(size=(n, 4))
    g.normalize_rotations()
    g.calib_log = rng.normal(0, 0.3, (n, k))
    d = small_field(rng)
    target = rng.uniform(0, 1, (size, size, 3))
    mask = rng.integers(0, k + 1, (size, size))
    return g, d, camera(size), float(rng.uniform(0, 1)), target, mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
