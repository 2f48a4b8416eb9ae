"""Advection-diffusion global feature layer.

One layer evolves a feature map H through K explicit finite-difference
updates of the 2-D advection-diffusion dynamics, with learned per-channel
velocity fields (u, v), per-channel diffusion coefficients (Dx, Dy), and a
pointwise affine source computed once from the layer input. The backward
pass is the exact discrete adjoint obtained by reverse iteration over the
recorded states.

Update (per batch, channel, pixel), with L = 1 + 2Bx + 2By and
M = 1 - 2Bx - 2By:

    L H^{k+1} = M H^{k-1} - 2 (u_x + v_y) dt H^k + 2 dt f
                + (-Ax + 2Bx) H^k_{x+1} + (Ax + 2Bx) H^k_{x-1}
                + (-Ay + 2By) H^k_{y+1} + (Ay + 2By) H^k_{y-1}

where Ax = u dt / (2 dx), Bx = Dx dt / dx^2 (Ay, By likewise) and u_x, v_y
are central differences of the velocity fields (zero in uniform mode).

Diffusion coefficients are reparameterized as Dx = dx_raw**2 so they stay
nonnegative under any optimizer update and are exactly zero at zero raw
parameters, which makes the zero-parameter layer an exact identity.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics, stencil
from .core import (
    BoundaryMode,
    ContractError,
    ShapeError,
    as_feature_map,
    check_finite,
    neighbor,
    shift,
    shift_adjoint,
)

PARAMS_FORMAT_VERSION = 1

# axes of the per-channel (C, H, W) coefficient fields
_FIELD_AXIS_Y = 1
_FIELD_AXIS_X = 2


class VelocityMode(enum.Enum):
    UNIFORM = "uniform"  # per-channel scalar velocities, stored 1x1
    SPATIAL = "spatial"  # full per-pixel per-channel velocity fields


@dataclass(frozen=True)
class Discretization:
    """Spatio-temporal step sizes and iteration count of one layer pass."""

    delta_t: float
    k: int
    delta_x: float = 1.0
    delta_y: float = 1.0

    def __post_init__(self):
        if self.delta_x <= 0 or self.delta_y <= 0 or self.delta_t <= 0:
            raise ValueError("delta_x, delta_y, delta_t must be positive")
        if self.k < 1:
            raise ValueError("iteration count k must be >= 1")


@dataclass
class PdeLayerParams:
    """Learned layer parameters.

    u, v: (C, H, W) velocity fields, or (C, 1, 1) in uniform mode.
    dx_raw, dy_raw: (C,) unconstrained; effective diffusion is raw**2.
    source_scale, source_bias: (C,) affine source f(I) = scale * I + bias.
    """

    u: np.ndarray
    v: np.ndarray
    dx_raw: np.ndarray
    dy_raw: np.ndarray
    source_scale: np.ndarray
    source_bias: np.ndarray
    velocity_mode: VelocityMode

    def __post_init__(self):
        c = self.channels
        if self.u.shape != self.v.shape or self.u.ndim != 3:
            raise ShapeError("u and v must be equally shaped (C, H, W) arrays")
        if self.velocity_mode is VelocityMode.UNIFORM and self.u.shape[1:] != (1, 1):
            raise ShapeError("uniform-velocity fields must be (C, 1, 1)")
        for name in ("dx_raw", "dy_raw", "source_scale", "source_bias"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"{name} must have shape ({c},)")

    @property
    def channels(self) -> int:
        return self.u.shape[0]

    @property
    def diffusion_x(self) -> np.ndarray:
        return self.dx_raw**2

    @property
    def diffusion_y(self) -> np.ndarray:
        return self.dy_raw**2

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "u": self.u,
            "v": self.v,
            "dx_raw": self.dx_raw,
            "dy_raw": self.dy_raw,
            "source_scale": self.source_scale,
            "source_bias": self.source_bias,
        }

    def copy(self) -> "PdeLayerParams":
        return PdeLayerParams(
            **{k: v.copy() for k, v in self.arrays().items()},
            velocity_mode=self.velocity_mode,
        )

    @classmethod
    def zeros(cls, channels, height=1, width=1,
              mode=VelocityMode.UNIFORM) -> "PdeLayerParams":
        """All-zero parameters: the layer is the exact identity map."""
        hw = (1, 1) if mode is VelocityMode.UNIFORM else (height, width)
        return cls(
            u=np.zeros((channels, *hw)),
            v=np.zeros((channels, *hw)),
            dx_raw=np.zeros(channels),
            dy_raw=np.zeros(channels),
            source_scale=np.zeros(channels),
            source_bias=np.zeros(channels),
            velocity_mode=mode,
        )


@dataclass
class PdeLayerGrads:
    """Gradients with the same shapes as the corresponding parameters."""

    u: np.ndarray
    v: np.ndarray
    dx_raw: np.ndarray
    dy_raw: np.ndarray
    source_scale: np.ndarray
    source_bias: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "u": self.u,
            "v": self.v,
            "dx_raw": self.dx_raw,
            "dy_raw": self.dy_raw,
            "source_scale": self.source_scale,
            "source_bias": self.source_bias,
        }


@dataclass(frozen=True)
class CoefficientSet:
    """Scalar update coefficients at one (channel, x, y) position."""

    l: float
    m: float
    a_x: float
    a_y: float
    b_x: float
    b_y: float
    u_x: float
    v_y: float


@dataclass
class CoefficientFields:
    """Precomputed per-channel coefficient fields shared by all K steps."""

    c0: np.ndarray    # (C, H, W): -2 (u_x + v_y) dt
    wxp: np.ndarray   # (C, H, W): -Ax + 2Bx
    wxm: np.ndarray   # (C, H, W):  Ax + 2Bx
    wyp: np.ndarray   # (C, H, W): -Ay + 2By
    wym: np.ndarray   # (C, H, W):  Ay + 2By
    lcoef: np.ndarray  # (C,): 1 + 2Bx + 2By
    mcoef: np.ndarray  # (C,): 1 - 2Bx - 2By
    two_dt: float


@dataclass
class LayerTrace:
    """Everything the adjoint needs: H^{-1}, H^0, ..., H^K plus context."""

    states: list
    source: np.ndarray
    coeffs: CoefficientFields
    params: PdeLayerParams
    disc: Discretization
    mode: BoundaryMode


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(channels: int, height: int, width: int,
                mode: VelocityMode = VelocityMode.SPATIAL,
                seed: int = 0, init_scale: float = 0.01) -> PdeLayerParams:
    """Xavier-uniform draws scaled by `init_scale`; source bias starts at 0.

    Spatial fields use fan_in = fan_out = H*W; per-channel scalars use
    fan_in = fan_out = 1. Deterministic given the seed.
    """
    if min(channels, height, width) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    hw = (height, width) if mode is VelocityMode.SPATIAL else (1, 1)
    field_bound = init_scale * xavier_bound(hw[0] * hw[1], hw[0] * hw[1])
    scalar_bound = init_scale * xavier_bound(1, 1)
    return PdeLayerParams(
        u=rng.uniform(-field_bound, field_bound, (channels, *hw)),
        v=rng.uniform(-field_bound, field_bound, (channels, *hw)),
        dx_raw=rng.uniform(-scalar_bound, scalar_bound, channels),
        dy_raw=rng.uniform(-scalar_bound, scalar_bound, channels),
        source_scale=rng.uniform(-scalar_bound, scalar_bound, channels),
        source_bias=np.zeros(channels),
        velocity_mode=mode,
    )


def coefficient_fields(params: PdeLayerParams, disc: Discretization,
                       mode: BoundaryMode, height: int, width: int) -> CoefficientFields:
    c = params.channels
    bx = params.diffusion_x * disc.delta_t / disc.delta_x**2  # (C,)
    by = params.diffusion_y * disc.delta_t / disc.delta_y**2

    def expand(a):
        # force a writable owned copy; broadcast_to views are read-only
        return np.array(np.broadcast_to(a, (c, height, width)), dtype=np.float64)

    ax = expand(params.u * (disc.delta_t / (2.0 * disc.delta_x)))
    ay = expand(params.v * (disc.delta_t / (2.0 * disc.delta_y)))

    if params.velocity_mode is VelocityMode.SPATIAL:
        u_x = (shift(params.u, _FIELD_AXIS_X, +1, mode)
               - shift(params.u, _FIELD_AXIS_X, -1, mode)) / (2.0 * disc.delta_x)
        v_y = (shift(params.v, _FIELD_AXIS_Y, +1, mode)
               - shift(params.v, _FIELD_AXIS_Y, -1, mode)) / (2.0 * disc.delta_y)
        c0 = expand(-2.0 * disc.delta_t * (u_x + v_y))
    else:
        c0 = np.zeros((c, height, width))

    bx3 = bx[:, None, None]
    by3 = by[:, None, None]
    return CoefficientFields(
        c0=c0,
        wxp=np.ascontiguousarray(-ax + 2.0 * bx3),
        wxm=np.ascontiguousarray(ax + 2.0 * bx3),
        wyp=np.ascontiguousarray(-ay + 2.0 * by3),
        wym=np.ascontiguousarray(ay + 2.0 * by3),
        lcoef=1.0 + 2.0 * bx + 2.0 * by,
        mcoef=1.0 - 2.0 * bx - 2.0 * by,
        two_dt=2.0 * disc.delta_t,
    )


def compute_coefficients(params: PdeLayerParams, disc: Discretization,
                         channel: int, x: int, y: int,
                         mode: BoundaryMode) -> CoefficientSet:
    """Reference scalar evaluation of the update coefficients at one pixel."""
    if not 0 <= channel < params.channels:
        raise ContractError(f"channel {channel} out of range")
    u2d, v2d = params.u[channel], params.v[channel]
    if params.velocity_mode is VelocityMode.SPATIAL:
        h, w = u2d.shape
        if not (0 <= x < w and 0 <= y < h):
            raise ContractError(f"pixel (x={x}, y={y}) out of range for {w}x{h}")
        u_val = float(u2d[y, x])
        v_val = float(v2d[y, x])
        u_x = (neighbor(u2d, x, y, +1, 0, mode) - neighbor(u2d, x, y, -1, 0, mode)) / (2 * disc.delta_x)
        v_y = (neighbor(v2d, x, y, 0, +1, mode) - neighbor(v2d, x, y, 0, -1, mode)) / (2 * disc.delta_y)
    else:
        u_val, v_val = float(u2d[0, 0]), float(v2d[0, 0])
        u_x = v_y = 0.0
    b_x = float(params.diffusion_x[channel]) * disc.delta_t / disc.delta_x**2
    b_y = float(params.diffusion_y[channel]) * disc.delta_t / disc.delta_y**2
    return CoefficientSet(
        l=1.0 + 2.0 * b_x + 2.0 * b_y,
        m=1.0 - 2.0 * b_x - 2.0 * b_y,
        a_x=u_val * disc.delta_t / (2.0 * disc.delta_x),
        a_y=v_val * disc.delta_t / (2.0 * disc.delta_y),
        b_x=b_x,
        b_y=b_y,
        u_x=u_x,
        v_y=v_y,
    )


def source_term(input_map: np.ndarray, params: PdeLayerParams) -> np.ndarray:
    """f(I) = scale_c * I + bias_c, computed once per layer pass."""
    x = as_feature_map(input_map)
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, params expect {params.channels}")
    return params.source_scale[:, None, None] * x + params.source_bias[:, None, None]


def pde_step(h_k, h_km1, source, params: PdeLayerParams, disc: Discretization,
             mode: BoundaryMode) -> np.ndarray:
    """Single explicit update H^{k+1}; `source` must already equal f(I)."""
    h_k = as_feature_map(h_k)
    h_km1 = as_feature_map(h_km1)
    source = as_feature_map(source)
    if not (h_k.shape == h_km1.shape == source.shape):
        raise ShapeError("H^k, H^{k-1} and source shapes must match")
    for name, arr in (("H^k", h_k), ("H^{k-1}", h_km1), ("source", source)):
        check_finite(arr, name)
    _, c, height, width = h_k.shape
    if c != params.channels:
        raise ShapeError("channel mismatch between state and params")
    coeffs = coefficient_fields(params, disc, mode, height, width)
    return _run_step(h_k, h_km1, source, coeffs, mode)


def _run_step(h_k, h_km1, source, coeffs: CoefficientFields, mode: BoundaryMode):
    return stencil.step_forward(
        h_k, h_km1, source, coeffs.c0, coeffs.wxp, coeffs.wxm, coeffs.wyp,
        coeffs.wym, coeffs.lcoef, coeffs.mcoef, coeffs.two_dt, mode.int_id)


def forward(input_map, params: PdeLayerParams, disc: Discretization,
            mode: BoundaryMode = BoundaryMode.REPLICATE,
            counter: "metrics.MacCounter | None" = None):
    """Run K update steps from H^0 = input; returns (H^K, trace).

    The trace stores H^{-1} = H^0 and every intermediate state, as the
    adjoint needs all of them.
    """
    x = as_feature_map(input_map)
    check_finite(x, "layer input")
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, params expect {params.channels}")
    _, _, height, width = x.shape
    src = source_term(x, params)
    coeffs = coefficient_fields(params, disc, mode, height, width)
    states = [x, x]  # H^{-1} = H^0 = input
    for _ in range(disc.k):
        states.append(_run_step(states[-1], states[-2], src, coeffs, mode))
    if counter is not None:
        counter.add("pde_layer", metrics.pde_source_macs(x.shape))
        for _ in range(disc.k):
            counter.add("pde_layer", metrics.pde_step_macs(x.shape, params.velocity_mode))
    trace = LayerTrace(states=states, source=src, coeffs=coeffs, params=params,
                       disc=disc, mode=mode)
    return states[-1], trace


def backward(trace: LayerTrace, grad_output, params: PdeLayerParams | None = None):
    """Exact reverse-mode derivatives of `forward`.

    Returns (grad_input, PdeLayerGrads). Gradients are exact for the
    discrete computation, including the chain through the nonnegative
    diffusion reparameterization.
    """
    params = trace.params if params is None else params
    disc, mode, coeffs = trace.disc, trace.mode, trace.coeffs
    k_steps = disc.k
    if len(trace.states) != k_steps + 2:
        raise ContractError(
            f"incomplete trace: {len(trace.states)} states, expected {k_steps + 2}")
    g_out = as_feature_map(grad_output)
    if g_out.shape != trace.states[-1].shape:
        raise ShapeError("grad_output shape must match the layer output")

    c, height, width = params.channels, g_out.shape[2], g_out.shape[3]
    g_states = [np.zeros_like(g_out) for _ in range(k_steps + 2)]
    g_states[-1] = g_out.copy()
    g_src = np.zeros_like(g_out)
    g_ax = np.zeros((c, height, width))
    g_ay = np.zeros((c, height, width))
    g_q = np.zeros((c, height, width))
    g_bx = np.zeros(c)
    g_by = np.zeros(c)

    # step k produced states[k+2] from (H^k = states[k+1], H^{k-1} = states[k])
    for k in range(k_steps - 1, -1, -1):
        (d_hk, d_hkm1, d_src, d_ax, d_ay, d_q, d_bx, d_by) = stencil.step_adjoint(
            g_states[k + 2], trace.states[k + 1], trace.states[k],
            trace.states[k + 2], coeffs.c0, coeffs.wxp, coeffs.wxm, coeffs.wyp,
            coeffs.wym, coeffs.lcoef, coeffs.mcoef, coeffs.two_dt, mode.int_id)
        g_states[k + 1] += d_hk
        g_states[k] += d_hkm1
        g_src += d_src
        g_ax += d_ax
        g_ay += d_ay
        g_q += d_q
        g_bx += d_bx
        g_by += d_by

    dt = disc.delta_t
    # advection coefficients: Ax = u dt / (2 dx)
    g_u_field = g_ax * (dt / (2.0 * disc.delta_x))
    g_v_field = g_ay * (dt / (2.0 * disc.delta_y))
    if params.velocity_mode is VelocityMode.SPATIAL:
        # central-difference terms: c0 = -2 dt (u_x + v_y), grad wrt c0 is g_q
        g_ux = -2.0 * dt * g_q
        g_vy = -2.0 * dt * g_q
        g_u_field = g_u_field + (
            shift_adjoint(g_ux, _FIELD_AXIS_X, +1, mode)
            - shift_adjoint(g_ux, _FIELD_AXIS_X, -1, mode)) / (2.0 * disc.delta_x)
        g_v_field = g_v_field + (
            shift_adjoint(g_vy, _FIELD_AXIS_Y, +1, mode)
            - shift_adjoint(g_vy, _FIELD_AXIS_Y, -1, mode)) / (2.0 * disc.delta_y)
        g_u, g_v = g_u_field, g_v_field
    else:
        g_u = g_u_field.sum(axis=(1, 2))[:, None, None]
        g_v = g_v_field.sum(axis=(1, 2))[:, None, None]

    # diffusion chain: Bx = Dx dt / dx^2, Dx = dx_raw^2
    g_dx_raw = g_bx * (dt / disc.delta_x**2) * 2.0 * params.dx_raw
    g_dy_raw = g_by * (dt / disc.delta_y**2) * 2.0 * params.dy_raw

    # source chain: f = scale * I + bias, I = H^0 = layer input
    x = trace.states[1]
    g_scale = (g_src * x).sum(axis=(0, 2, 3))
    g_bias = g_src.sum(axis=(0, 2, 3))
    grad_input = g_states[0] + g_states[1] + params.source_scale[:, None, None] * g_src

    grads = PdeLayerGrads(u=g_u, v=g_v, dx_raw=g_dx_raw, dy_raw=g_dy_raw,
                          source_scale=g_scale, source_bias=g_bias)
    return grad_input, grads


@dataclass
class CflReport:
    """Explicit-scheme stability diagnostics (advisory only)."""

    max_bx: float
    max_by: float
    max_abs_ax: float
    max_abs_ay: float
    warnings: list = field(default_factory=list)


def cfl_diagnostic(params: PdeLayerParams, disc: Discretization) -> CflReport:
    """Reports coefficient maxima; flags Bx + By > 1/2 per channel."""
    bx = params.diffusion_x * disc.delta_t / disc.delta_x**2
    by = params.diffusion_y * disc.delta_t / disc.delta_y**2
    ax = params.u * (disc.delta_t / (2.0 * disc.delta_x))
    ay = params.v * (disc.delta_t / (2.0 * disc.delta_y))
    warnings = []
    worst = float((bx + by).max()) if bx.size else 0.0
    if worst > 0.5:
        warnings.append(
            f"Bx + By reaches {worst:.6g} > 0.5; explicit scheme may be inaccurate")
    return CflReport(
        max_bx=float(bx.max()) if bx.size else 0.0,
        max_by=float(by.max()) if by.size else 0.0,
        max_abs_ax=float(np.abs(ax).max()) if ax.size else 0.0,
        max_abs_ay=float(np.abs(ay).max()) if ay.size else 0.0,
        warnings=warnings,
    )


_BLOB_ORDER = ("u", "v", "dx_raw", "dy_raw", "source_scale", "source_bias")


def params_to_bytes(params: PdeLayerParams) -> bytes:
    """JSON header line + flat little-endian f64 blob; bit-exact round trip."""
    c, h, w = params.u.shape
    header = {
        "version": PARAMS_FORMAT_VERSION,
        "channels": c,
        "height": h,
        "width": w,
        "velocity_mode": params.velocity_mode.value,
    }
    arrays = params.arrays()
    blob = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes()
                    for n in _BLOB_ORDER)
    return json.dumps(header, sort_keys=True).encode() + b"\n" + blob


def params_from_bytes(data: bytes) -> PdeLayerParams:
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode())
    if header.get("version") != PARAMS_FORMAT_VERSION:
        raise ValueError(f"unsupported params format version {header.get('version')}")
    c, h, w = header["channels"], header["height"], header["width"]
    mode = VelocityMode(header["velocity_mode"])
    shapes = {"u": (c, h, w), "v": (c, h, w), "dx_raw": (c,), "dy_raw": (c,),
              "source_scale": (c,), "source_bias": (c,)}
    blob = data[nl + 1:]
    expected = sum(int(np.prod(shapes[n])) for n in _BLOB_ORDER) * 8
    if expected != len(blob):
        raise ValueError(f"params blob has {len(blob)} bytes, expected {expected}")
    arrays = {}
    off = 0
    for name in _BLOB_ORDER:
        n = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off
                                     ).reshape(shapes[name]).copy()
        off += n * 8
    return PdeLayerParams(**arrays, velocity_mode=mode)
