import os
import subprocess
import sys

import numpy as np
import pytest

from sedlm import kernels, _recurrence_py

needs_ext = pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled kernel not built")


def _inputs(rng, dtype, B=3, T=9, H=5, C=4, cond=True):
    G = 3 * H
    return dict(
        xproj=rng.normal(size=(B, T, G)).astype(dtype),
        wc=(rng.normal(size=(C, G)) if cond else np.zeros((0, G))).astype(dtype),
        u=(rng.normal(size=(H, G)) * 0.5).astype(dtype),
        wo=rng.normal(size=(H, C)).astype(dtype),
        bo=rng.normal(size=C).astype(dtype),
        y_true=(rng.random((B, T, C)) < 0.5).astype(dtype),
        truth=(rng.random((B, T)) < 0.5).astype(np.uint8),
    )


def test_backend_lookup():
    assert kernels.get_backend() is kernels.recurrence
    assert kernels.get_backend("python") is _recurrence_py
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_env_forces_python_backend():
    env = dict(os.environ, SEDLM_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "from sedlm import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@pytest.mark.parametrize("cond", [True, False])
@pytest.mark.parametrize("binarize", [True, False])
def test_backends_agree(rng, dtype, cond, binarize):
    ext = kernels.BACKENDS["cython"]
    a = _inputs(rng, dtype, cond=cond)
    args = (a["xproj"], a["wc"], a["u"], a["wo"], a["bo"], a["y_true"], a["truth"], binarize)
    fp, fc = _recurrence_py.forward(*args), ext.forward(*args)
    tol = 1e-12 if dtype == np.float64 else 1e-5
    for x, y in zip(fp, fc):
        np.testing.assert_allclose(x, y, rtol=tol, atol=tol)
    gy = rng.normal(size=fp[0].shape).astype(dtype)
    bp = _recurrence_py.backward(gy, *fp, a["wc"], a["u"], a["wo"])
    bc = ext.backward(gy, *fc, a["wc"], a["u"], a["wo"])
    for x, y in zip(bp, bc):
        np.testing.assert_allclose(x, y, rtol=tol * 10, atol=tol * 10)


def test_outputs_are_probabilities(rng):
    a = _inputs(rng, np.float64)
    a["xproj"] *= 100
    yhat = kernels.recurrence.forward(*a.values(), False)[0]
    assert np.all((yhat >= 0) & (yhat <= 1)) and np.all(np.isfinite(yhat))
