"""Dense tensor helpers shared by all numerical modules.

Feature maps are plain float64 numpy arrays of shape (batch, channels,
height, width); 2-D fields are (height, width). Values are treated as
immutable after construction: every public operation returns a fresh array.
"""

from __future__ import annotations

import enum

import numpy as np

AXIS_Y = 2  # height axis of a (B, C, H, W) feature map
AXIS_X = 3  # width axis


class BoundaryMode(enum.Enum):
    """Boundary rule for stencil neighbor access at field edges."""

    REPLICATE = "replicate"  # clamp indices to the nearest valid pixel
    PERIODIC = "periodic"    # wrap around
    ZEROPAD = "zeropad"      # values outside the field are 0

    @property
    def int_id(self) -> int:
        return _MODE_IDS[self]


_MODE_IDS = {BoundaryMode.REPLICATE: 0, BoundaryMode.PERIODIC: 1, BoundaryMode.ZEROPAD: 2}


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


class ContractError(ValueError):
    """Raised on out-of-range indices or other precondition violations."""


def as_feature_map(data, shape=None) -> np.ndarray:
    """Coerce to a C-contiguous float64 (B, C, H, W) array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim != 4:
        raise ShapeError(f"feature map must be 4-D (B,C,H,W), got shape {arr.shape}")
    return arr


def as_field2d(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"2-D field expected, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")


def neighbor(field, x: int, y: int, dx: int, dy: int, mode: BoundaryMode) -> float:
    """Stencil neighbor value at (x+dx, y+dy) under the boundary rule.

    `field` is indexed [y][x] (row, column). The base index must lie inside
    the field; only single-axis unit offsets are meaningful for the stencil.
    """
    f = as_field2d(field)
    h, w = f.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ContractError(f"base index (x={x}, y={y}) outside {w}x{h} field")
    if abs(dx) + abs(dy) > 1:
        raise ContractError("stencil offsets are restricted to |dx|+|dy| <= 1")
    xx, yy = x + dx, y + dy
    if mode is BoundaryMode.PERIODIC:
        return float(f[yy % h, xx % w])
    if mode is BoundaryMode.REPLICATE:
        return float(f[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)])
    if 0 <= xx < w and 0 <= yy < h:
        return float(f[yy, xx])
    return 0.0


def shift(arr: np.ndarray, axis: int, step: int, mode: BoundaryMode) -> np.ndarray:
    """Gather of shifted values: out[i] = arr[i + step] along `axis`."""
    n = arr.shape[axis]
    idx = np.arange(n) + step
    if mode is BoundaryMode.PERIODIC:
        return np.take(arr, idx % n, axis=axis)
    out = np.take(arr, np.clip(idx, 0, n - 1), axis=axis)
    if mode is BoundaryMode.ZEROPAD:
        oob = (idx < 0) | (idx >= n)
        if oob.any():
            sl = [slice(None)] * arr.ndim
            sl[axis] = oob
            out[tuple(sl)] = 0.0
    return out


def shift_adjoint(arr: np.ndarray, axis: int, step: int, mode: BoundaryMode) -> np.ndarray:
    """Adjoint (transpose) of `shift` for unit steps.

    Satisfies <shift(a), b> == <a, shift_adjoint(b)> for all a, b.
    """
    if step == 0:
        return arr.copy()
    if abs(step) != 1:
        raise ContractError("shift_adjoint supports unit steps only")
    if mode is BoundaryMode.PERIODIC:
        return shift(arr, axis, -step, mode)
    out = shift(arr, axis, -step, BoundaryMode.ZEROPAD)
    if mode is BoundaryMode.REPLICATE:
        # clamped gathers at the edge accumulate onto the edge pixel
        edge = [slice(None)] * arr.ndim
        edge[axis] = -1 if step > 0 else 0
        out[tuple(edge)] += arr[tuple(edge)]
    return out


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Pointwise add/sub/mul of two equally shaped maps."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce_sum(a: np.ndarray) -> float:
    """Sum of all entries in a fixed row-major accumulation order."""
    return float(np.sum(np.ravel(a, order="C")))


def reduce_max_abs(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))
