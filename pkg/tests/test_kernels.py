"""The numba kernels and their numpy fallbacks must agree."""

import numpy as np
import pytest

from rankssm import kernels

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")


def both(fn, *args):
    out = {}
    for backend in kernels.BACKENDS:
        with kernels.use_backend(backend):
            out[backend] = fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])
    return out["numba"], out["numpy"]


@pytest.mark.parametrize("L", [1, 5, 64, 257])
def test_scans(L):
    rng = np.random.default_rng(L)
    a, b, h0 = rng.uniform(0, 1, (L, 6)), rng.normal(size=(L, 6)), rng.normal(size=6)
    for fn in (kernels.scan_sequential, kernels.scan_blelloch):
        nb, np_ = both(fn, a, b, h0)
        np.testing.assert_allclose(nb, np_, rtol=1e-13, atol=1e-13)


def test_causal_conv_and_backward():
    rng = np.random.default_rng(0)
    x, k, dy = rng.normal(size=(3, 40)), rng.normal(size=(3, 40)), rng.normal(size=(3, 40))
    nb, np_ = both(kernels.causal_conv, x, k)
    np.testing.assert_allclose(nb, np_, rtol=1e-12, atol=1e-12)
    (gx1, gk1), (gx2, gk2) = both(kernels.causal_conv_backward, x, k, dy)
    np.testing.assert_allclose(gx1, gx2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gk1, gk2, rtol=1e-12, atol=1e-12)


def test_use_backend_restores():
    before = kernels.get_backend()
    with kernels.use_backend("numpy"):
        assert kernels.get_backend() == "numpy"
    assert kernels.get_backend() == before
    with pytest.raises(ValueError):
        with kernels.use_backend("cuda"):
            pass


def test_zoh_gain_series_matches_closed_form():
    delta = np.full(6, 0.7)
    z = np.array([-1e-5, -5e-5, 5e-5, -0.3, 0.2, -2.0])
    phi, E, dE = kernels.zoh_gain_arrays(delta, z)
    np.testing.assert_allclose(E, np.expm1(z) / z, rtol=1e-12)
    np.testing.assert_allclose(phi, delta * E, rtol=1e-15)
    exact = (z * np.exp(z) - np.expm1(z)) / (z * z)
    np.testing.assert_allclose(dE, exact, rtol=1e-6)
