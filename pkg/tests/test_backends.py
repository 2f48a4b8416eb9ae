"""Compiled stencil backend vs. the pure-numpy fallback.

Both must produce identical forward states and adjoint outputs (to f64
roundoff) for every boundary mode; the import-time selection and the env
override must resolve correctly.
"""

import numpy as np
import pytest

import pdeblur.stencil as st
from pdeblur.core import BoundaryMode
from pdeblur.pde_layer import Discretization, VelocityMode, coefficient_fields, init_params

cython_missing = "cython" not in st.available_backends()


def _random_step_args(seed, mode, bsz=2, c=3, h=6, w=7):
    rng = np.random.default_rng(seed)
    params = init_params(c, h, w, mode=VelocityMode.SPATIAL, seed=seed, init_scale=0.4)
    disc = Discretization(delta_t=0.2, k=1)
    coeffs = coefficient_fields(params, disc, mode, h, w)
    hk = rng.normal(size=(bsz, c, h, w))
    hkm1 = rng.normal(size=(bsz, c, h, w))
    src = rng.normal(size=(bsz, c, h, w))
    return hk, hkm1, src, coeffs


def _call_forward(backend, hk, hkm1, src, coeffs, mode):
    return backend.step_forward(hk, hkm1, src, coeffs.c0, coeffs.wxp, coeffs.wxm,
                                coeffs.wyp, coeffs.wym, coeffs.lcoef, coeffs.mcoef,
                                coeffs.two_dt, mode.int_id)


def test_some_backend_is_active():
    assert st.BACKEND in st.available_backends()
    assert "numpy" in st.available_backends()  # fallback is always importable


def test_get_backend_unknown_name():
    with pytest.raises(ValueError):
        st.get_backend("fortran")


def test_env_override(monkeypatch):
    monkeypatch.setenv("PDEBLUR_BACKEND", "numpy")
    assert st.get_backend().NAME == "numpy"


@pytest.mark.skipif(cython_missing, reason="compiled backend not built")
@pytest.mark.parametrize("mode", list(BoundaryMode))
def test_forward_parity(mode):
    cy = st.get_backend("cython")
    np_b = st.get_backend("numpy")
    for seed in range(3):
        hk, hkm1, src, coeffs = _random_step_args(seed, mode)
        a = _call_forward(cy, hk, hkm1, src, coeffs, mode)
        b = _call_forward(np_b, hk, hkm1, src, coeffs, mode)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


@pytest.mark.skipif(cython_missing, reason="compiled backend not built")
@pytest.mark.parametrize("mode", list(BoundaryMode))
def test_adjoint_parity(mode):
    cy = st.get_backend("cython")
    np_b = st.get_backend("numpy")
    for seed in range(3):
        hk, hkm1, src, coeffs = _random_step_args(seed + 10, mode)
        h_out = _call_forward(np_b, hk, hkm1, src, coeffs, mode)
        g_out = np.random.default_rng(seed).normal(size=hk.shape)
        outs = []
        for backend in (cy, np_b):
            outs.append(backend.step_adjoint(
                g_out, hk, hkm1, h_out, coeffs.c0, coeffs.wxp, coeffs.wxm,
                coeffs.wyp, coeffs.wym, coeffs.lcoef, coeffs.mcoef,
                coeffs.two_dt, mode.int_id))
        for a, b in zip(*outs):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
