"""Restoration quality metrics, gradient-norm statistics, and the MAC model.

The multiply-accumulate (MAC) accounting has two routes: an instrumented
counter incremented by the operations as they execute, and closed-form
formulas. Both share the per-pixel constants below, so the acceptance check
"counter == closed form" verifies that the expected number of steps ran.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError

# MACs per pixel per solver iteration:
#   update products: 4 stencil neighbors + M*H^{k-1} + c0*H^k + 2dt*f + /L = 8
#   coefficient formation: Ax, Ay, Bx, By = 4
#   spatial velocity adds the u_x, v_y central differences = 2
PDE_STEP_MACS_UNIFORM = 12
PDE_STEP_MACS_SPATIAL = 14
# one-time source term f(I) = scale*I + bias: 1 MAC per pixel
PDE_SOURCE_MACS = 1

PSNR_INF = math.inf  # sentinel for identical inputs (zero MSE)


class MacCounter:
    """Accumulates multiply-accumulate counts with a per-category breakdown."""

    def __init__(self):
        self.total = 0
        self.by_category: dict[str, int] = {}

    def add(self, category: str, count: int) -> None:
        if count < 0:
            raise ValueError("MAC increments must be nonnegative")
        self.total += count
        self.by_category[category] = self.by_category.get(category, 0) + count

    def reset(self) -> None:
        self.total = 0
        self.by_category = {}

    def gmacs(self) -> float:
        return self.total / 1e9


def _is_spatial(velocity_mode) -> bool:
    value = getattr(velocity_mode, "value", velocity_mode)
    if value not in ("uniform", "spatial"):
        raise ValueError(f"unknown velocity mode {velocity_mode!r}")
    return value == "spatial"


def pde_step_macs(shape, velocity_mode) -> int:
    b, c, h, w = shape
    per_pixel = PDE_STEP_MACS_SPATIAL if _is_spatial(velocity_mode) else PDE_STEP_MACS_UNIFORM
    return b * c * h * w * per_pixel


def pde_source_macs(shape) -> int:
    b, c, h, w = shape
    return b * c * h * w * PDE_SOURCE_MACS


def pde_layer_macs(shape, k: int, velocity_mode) -> int:
    """Closed-form MAC count of one K-iteration layer pass: affine in K."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return pde_source_macs(shape) + k * pde_step_macs(shape, velocity_mode)


def conv2d_macs(input_shape, out_channels: int, kernel: int = 3) -> int:
    b, c_in, h, w = input_shape
    return b * out_channels * h * w * kernel * kernel * c_in


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) with peak 1.0; +inf for identical inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _channel_windows(img: np.ndarray, mode: str) -> np.ndarray:
    h, w = img.shape
    if mode == "gaussian11":
        if h < 11 or w < 11:
            raise ShapeError(f"image {w}x{h} smaller than the 11x11 SSIM window")
        return np.lib.stride_tricks.sliding_window_view(img, (11, 11)).reshape(-1, 11, 11)
    if mode == "block8":
        if h < 8 or w < 8:
            raise ShapeError(f"image {w}x{h} smaller than the 8x8 SSIM block")
        hb, wb = h - h % 8, w - w % 8
        blocks = img[:hb, :wb].reshape(hb // 8, 8, wb // 8, 8)
        return blocks.transpose(0, 2, 1, 3).reshape(-1, 8, 8)
    raise ValueError(f"unknown SSIM mode {mode!r}")


def ssim(a: np.ndarray, b: np.ndarray, mode: str = "gaussian11",
         c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over windows and channels on [0, 1]-range images.

    "gaussian11" uses an 11x11 sliding Gaussian window (sigma 1.5, valid
    positions only); "block8" uses non-overlapping 8x8 blocks with uniform
    weights. Report the mode next to every value you publish.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ShapeError("ssim expects a single image, not a batch")
        a, b = a[0], b[0]
    if mode == "gaussian11":
        weights = _gaussian_window().ravel()
    else:
        weights = np.full(64, 1.0 / 64.0)

    values = []
    for ca, cb in zip(a, b):
        wa = _channel_windows(ca, mode).reshape(-1, weights.size)
        wb = _channel_windows(cb, mode).reshape(-1, weights.size)
        mu_a = wa @ weights
        mu_b = wb @ weights
        var_a = (wa**2) @ weights - mu_a**2
        var_b = (wb**2) @ weights - mu_b**2
        cov = (wa * wb) @ weights - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
        values.append(s.mean())
    return float(np.mean(values))


@dataclass
class GradNormRecord:
    """Global and per-module L2 norms of the parameter gradients."""

    epoch: int
    step: int
    global_norm: float
    per_module: dict = field(default_factory=dict)
    finite: bool = True


def grad_norm(gradients: dict, epoch: int = 0, step: int = 0) -> GradNormRecord:
    """Global L2 over all parameter gradients, broken down by name prefix."""
    sq_by_module: dict[str, float] = {}
    finite = True
    for name, g in gradients.items():
        arr = np.asarray(g, dtype=np.float64)
        if not np.isfinite(arr).all():
            finite = False
        module = name.split(".", 1)[0]
        sq_by_module[module] = sq_by_module.get(module, 0.0) + float(np.sum(arr * arr))
    total_sq = sum(sq_by_module.values())
    return GradNormRecord(
        epoch=epoch,
        step=step,
        global_norm=math.sqrt(total_sq) if math.isfinite(total_sq) else math.inf,
        per_module={k: math.sqrt(v) if math.isfinite(v) else math.inf
                    for k, v in sq_by_module.items()},
        finite=finite,
    )
