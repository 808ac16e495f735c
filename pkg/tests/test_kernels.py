import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsn import kernels

needs_numba = pytest.mark.skipif(kernels.numba_kernels is None, reason="numba not importable")


def case(seed, c=3, h=5, w=7, k=3):
    rng = np.random.default_rng(seed)
    ky, kx = np.meshgrid(np.arange(float(k)), np.arange(float(k)), indexing="ij")
    x = rng.standard_normal((c, h, w))
    off = rng.uniform(-3, 3, (2 * k * k, h, w))
    gcols = rng.standard_normal((c * k * k, h * w))
    return x, off, ky.ravel(), kx.ravel(), gcols


@needs_numba
class TestBackendsAgree:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_im2col(self, seed):
        x, off, gy, gx, _ = case(seed)
        np.testing.assert_allclose(
            kernels.numba_kernels[0](x, off, gy, gx, 1), kernels.numpy_kernels[0](x, off, gy, gx, 1), atol=1e-13
        )

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_col2im(self, seed):
        x, off, gy, gx, gcols = case(seed)
        a = kernels.numba_kernels[1](gcols, off, gy, gx, 1, 5, 7)
        b = kernels.numpy_kernels[1](gcols, off, gy, gx, 1, 5, 7)
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_offset_grad(self, seed):
        x, off, gy, gx, gcols = case(seed)
        a = kernels.numba_kernels[2](gcols, x, off, gy, gx, 1)
        b = kernels.numpy_kernels[2](gcols, x, off, gy, gx, 1)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_float32_inputs(self):
        x, off, gy, gx, _ = case(3)
        a = kernels.numba_kernels[0](x.astype(np.float32), off.astype(np.float32), gy.astype(np.float32), gx.astype(np.float32), 1)
        assert a.dtype == np.float32


class TestAdjoint:
    """col2im is the transpose of im2col in the input: <im2col(x), g> == <x, col2im(g)>."""

    @pytest.mark.parametrize("seed", range(5))
    def test_dot_product_identity(self, seed):
        x, off, gy, gx, gcols = case(seed)
        lhs = float((kernels.deform_im2col(x, off, gy, gx, 1) * gcols).sum())
        rhs = float((x * kernels.deform_col2im(gcols, off, gy, gx, 1, 5, 7)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_env_flag_selects_numpy():
    env = dict(os.environ, STSN_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from stsn import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_default_backend_is_numba(monkeypatch):
    assert kernels.BACKEND == ("numpy" if kernels._env_disabled() else "numba")
