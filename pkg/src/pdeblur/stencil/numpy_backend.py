"""Pure-numpy stencil kernels (fallback when the compiled core is absent).

Both backends share the same flat-array signature. Coefficient fields are
per-channel (C, H, W); L and M are per-channel scalars because diffusion
coefficients are per-channel.
"""

from __future__ import annotations

import numpy as np

from ..core import AXIS_X, AXIS_Y, BoundaryMode, shift, shift_adjoint

NAME = "numpy"

_MODES = {m.int_id: m for m in BoundaryMode}


def step_forward(hk, hkm1, src, c0, wxp, wxm, wyp, wym, lcoef, mcoef, two_dt, mode_id):
    """One explicit update: returns H^{k+1} from (H^k, H^{k-1}, f).

    Evaluated as H^{k-1} + [c0 H^k + 2dt f + sum_w w (neighbor - H^{k-1})] / L,
    which is algebraically L H^{k+1} = M H^{k-1} + ... but keeps constant
    fields (and the zero-parameter identity) bit-exact: every correction term
    vanishes identically when the neighbors equal the center.
    """
    mode = _MODES[mode_id]
    num = c0 * hk
    num += two_dt * src
    num += wxp * (shift(hk, AXIS_X, +1, mode) - hkm1)
    num += wxm * (shift(hk, AXIS_X, -1, mode) - hkm1)
    num += wyp * (shift(hk, AXIS_Y, +1, mode) - hkm1)
    num += wym * (shift(hk, AXIS_Y, -1, mode) - hkm1)
    num /= lcoef[:, None, None]
    num += hkm1
    return num


def step_adjoint(g_out, hk, hkm1, h_out, c0, wxp, wxm, wyp, wym, lcoef, mcoef, two_dt, mode_id):
    """Exact adjoint of `step_forward`.

    Returns (g_hk, g_hkm1, g_src, g_ax, g_ay, g_q, g_bx, g_by):
    gradients w.r.t. the three state inputs plus batch-summed gradients
    w.r.t. the advection coefficients A_x, A_y, the velocity-divergence
    accumulator q (gradient w.r.t. c0), and the per-channel diffusion
    coefficients B_x, B_y.
    """
    mode = _MODES[mode_id]
    g_rhs = g_out / lcoef[:, None, None]

    g_hkm1 = mcoef[:, None, None] * g_rhs
    g_src = two_dt * g_rhs

    g_hk = c0 * g_rhs
    g_hk += shift_adjoint(wxp * g_rhs, AXIS_X, +1, mode)
    g_hk += shift_adjoint(wxm * g_rhs, AXIS_X, -1, mode)
    g_hk += shift_adjoint(wyp * g_rhs, AXIS_Y, +1, mode)
    g_hk += shift_adjoint(wym * g_rhs, AXIS_Y, -1, mode)

    sxp = shift(hk, AXIS_X, +1, mode)
    sxm = shift(hk, AXIS_X, -1, mode)
    syp = shift(hk, AXIS_Y, +1, mode)
    sym = shift(hk, AXIS_Y, -1, mode)

    g_ax = ((sxm - sxp) * g_rhs).sum(axis=0)
    g_ay = ((sym - syp) * g_rhs).sum(axis=0)
    g_q = (hk * g_rhs).sum(axis=0)
    g_bx = 2.0 * (g_rhs * (sxp + sxm - hkm1 - h_out)).sum(axis=(0, 2, 3))
    g_by = 2.0 * (g_rhs * (syp + sym - hkm1 - h_out)).sum(axis=(0, 2, 3))

    return g_hk, g_hkm1, g_src, g_ax, g_ay, g_q, g_bx, g_by
