import numpy as np
import pytest
from scipy import ndimage

from txmsum import PhantomSpec, builtin_library


def resampled_library(frames, lo=8180.0, hi=8562.0):
    return builtin_library().resample(np.linspace(lo, hi, frames))


def voronoi_phantom(size=128, frames=64, sigma=60.0, seed=1, lo=8180.0, **kw):
    """Five-phase Voronoi phantom with morphology-modulated amplitudes; the
    standard benchmarking configuration in this suite."""
    return PhantomSpec(width=size, height=size, sigma=sigma, seed=seed,
                       label_source="voronoi", amplitude_source="image",
                       library=resampled_library(frames, lo=lo), **kw)


def granular_texture(size, seed=99, scale=2.0):
    """Binary fine-grained texture; shifting it decorrelates fast, so the
    per-frame jitter structure stays above the subspace noise floor."""
    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.standard_normal((size, size)), scale)
    return (t > np.median(t)).astype(float)


@pytest.fixture(scope="session")
def library():
    return builtin_library()
