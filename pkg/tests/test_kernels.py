import os
import subprocess
import sys

import numpy as np
import pytest

from valuestitch import _pykernels

ck = pytest.importorskip("valuestitch._ckernels")


def test_silu_forward_agrees(rng):
    z = rng.standard_normal((50, 33)) * 20
    y0, s0 = _pykernels.silu_forward(z)
    y1, s1 = ck.silu_forward(z)
    np.testing.assert_allclose(y1, y0, rtol=1e-14, atol=1e-300)
    np.testing.assert_allclose(s1, s0, rtol=1e-14, atol=1e-300)


def test_silu_known_values():
    y, s = _pykernels.silu_forward(np.array([[0.0, 1.0, -1.0]]))
    sig1 = 1 / (1 + np.exp(-1.0))
    np.testing.assert_allclose(s, [[0.5, sig1, 1 - sig1]], rtol=1e-15)
    np.testing.assert_allclose(y, [[0.0, sig1, -(1 - sig1)]], rtol=1e-15)
    # extreme inputs stay finite
    y, s = _pykernels.silu_forward(np.array([[-800.0, 800.0]]))
    assert np.all(np.isfinite(y)) and y[0, 1] == 800.0


def test_silu_backward_agrees_and_fd(rng):
    z = rng.standard_normal((20, 7))
    g = rng.standard_normal(z.shape)
    _, sig = _pykernels.silu_forward(z)
    d0 = _pykernels.silu_backward(g, z, sig)
    np.testing.assert_allclose(ck.silu_backward(g, z, sig), d0, rtol=1e-13)
    eps = 1e-6
    fd = (_pykernels.silu_forward(z + eps)[0] - _pykernels.silu_forward(z - eps)[0]) / (2 * eps)
    np.testing.assert_allclose(d0, g * fd, rtol=1e-6, atol=1e-9)


def test_silu_backward_shape_error(rng):
    z = rng.standard_normal((3, 2))
    for k in (_pykernels, ck):
        with pytest.raises(ValueError):
            k.silu_backward(np.zeros((2, 2)), z, z)


def test_inverse_cdf_agrees(rng):
    w = rng.random(64)
    w[5] = 0.0
    u = rng.random(1000)
    a = _pykernels.inverse_cdf(w, u)
    np.testing.assert_array_equal(ck.inverse_cdf(w, u), a)
    assert not np.any(a == 5)


def test_inverse_cdf_boundaries():
    w = np.array([1.0, 1.0, 2.0])
    u = np.array([0.0, 0.2499, 0.25, 0.4999, 0.5, 0.9999])
    for k in (_pykernels, ck):
        np.testing.assert_array_equal(k.inverse_cdf(w, u), [0, 0, 1, 1, 2, 2])


@pytest.mark.parametrize("bad", [np.array([]), np.array([1.0, -1.0]), np.zeros(3)])
def test_inverse_cdf_errors(bad):
    for k in (_pykernels, ck):
        with pytest.raises(ValueError):
            k.inverse_cdf(bad, np.array([0.5]))


def test_pure_python_switch():
    env = dict(os.environ, VALUESTITCH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from valuestitch import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
