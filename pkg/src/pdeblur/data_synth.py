"""Synthetic motion-blur dataset generation and portable PGM/PPM image I/O.

Sharp images are procedural (gradients, anti-aliased convex polygons, and
stroke segments rendered at 4x and box-downsampled) so the repository stays
self-contained. Blur is 2-D correlation with a normalized line-segment
kernel plus optional Gaussian noise.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core import AXIS_X, AXIS_Y, BoundaryMode, shift

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class MotionKernel:
    """Normalized point-spread function of a linear camera motion."""

    taps: np.ndarray  # 2-D, nonnegative, sums to 1
    length: float
    angle: float

    @property
    def radius(self) -> int:
        return (self.taps.shape[0] - 1) // 2


@dataclass
class PairSample:
    sharp: np.ndarray    # (C, H, W) in [0, 1]
    blurred: np.ndarray  # same shape and range
    kernel_length: float
    kernel_angle: float
    noise_sigma: float


def make_motion_kernel(length: float, angle: float) -> MotionKernel:
    """Line-segment PSF: unit-spaced sample points along the segment, each
    splatted bilinearly with equal weight, normalized to unit sum.

    length 1 degenerates to the identity kernel (single center tap).
    """
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    n = max(1, round(length))
    offsets = np.arange(n) - (n - 1) / 2.0
    px = offsets * math.cos(angle)
    py = offsets * math.sin(angle)
    radius = int(math.ceil(max(np.abs(px).max(), np.abs(py).max(), 0.0))) if n > 1 else 0
    size = 2 * radius + 1
    taps = np.zeros((size, size))
    for x, y in zip(px, py):
        gx, gy = x + radius, y + radius
        x0, y0 = int(math.floor(gx)), int(math.floor(gy))
        fx, fy = gx - x0, gy - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                w = wx * wy
                if w > 0.0:
                    taps[y0 + dy, x0 + dx] += w / n
    taps /= taps.sum()
    return MotionKernel(taps=taps, length=float(length), angle=float(angle))


def blur(image: np.ndarray, kernel: MotionKernel,
         mode: BoundaryMode = BoundaryMode.REPLICATE,
         noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Per-channel correlation with the kernel, plus clamped Gaussian noise."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    r = kernel.radius
    out = np.zeros_like(img)
    for ky in range(kernel.taps.shape[0]):
        for kx in range(kernel.taps.shape[1]):
            w = kernel.taps[ky, kx]
            if w == 0.0:
                continue
            shifted = shift(shift(img, AXIS_Y, ky - r, mode), AXIS_X, kx - r, mode)
            out += w * shifted
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, noise_sigma, out.shape)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# procedural sharp images

_SUPERSAMPLE = 4


def _render_sharp(rng: np.random.Generator, size: int, channels: int = 3) -> np.ndarray:
    """High-frequency procedural image: gradient background, convex polygons,
    and thin strokes, rendered at 4x then box-averaged for anti-aliasing."""
    s = size * _SUPERSAMPLE
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1.0)
    theta = rng.uniform(0, 2 * math.pi)
    t = np.clip((xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta) + 0.5, 0, 1)
    c0 = rng.uniform(0, 1, channels)
    c1 = rng.uniform(0, 1, channels)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    def paint(mask, color):
        img[:, mask] = color[:, None]

    for _ in range(rng.integers(2, 5)):
        nv = int(rng.integers(3, 6))
        center = rng.uniform(0.15, 0.85, 2)
        radii = rng.uniform(0.08, 0.35, nv)
        angles = np.sort(rng.uniform(0, 2 * math.pi, nv))
        vx = center[0] + radii * np.cos(angles)
        vy = center[1] + radii * np.sin(angles)
        mask = np.ones((s, s), dtype=bool)
        for i in range(nv):  # convex hull of angular-sorted vertices
            x0, y0 = vx[i], vy[i]
            x1, y1 = vx[(i + 1) % nv], vy[(i + 1) % nv]
            mask &= (xx - x0) * (y1 - y0) - (yy - y0) * (x1 - x0) <= 0
        paint(mask, rng.uniform(0, 1, channels))

    for _ in range(rng.integers(2, 6)):
        p0 = rng.uniform(0, 1, 2)
        p1 = rng.uniform(0, 1, 2)
        half_w = rng.uniform(0.008, 0.03)
        d = p1 - p0
        denom = float(d @ d) or 1.0
        tproj = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / denom, 0, 1)
        dist = np.hypot(xx - (p0[0] + tproj * d[0]), yy - (p0[1] + tproj * d[1]))
        paint(dist <= half_w, rng.uniform(0, 1, channels))

    # oriented sinusoid gratings in disc regions: dense high-frequency
    # content that motion blur visibly attenuates
    for _ in range(rng.integers(2, 4)):
        theta_g = rng.uniform(0, math.pi)
        freq = rng.uniform(4.0, 12.0)
        phase = rng.uniform(0, 2 * math.pi)
        wave = 0.5 + 0.5 * np.sin(
            2 * math.pi * freq * (xx * math.cos(theta_g) + yy * math.sin(theta_g))
            + phase)
        ca = rng.uniform(0, 1, channels)
        cb = rng.uniform(0, 1, channels)
        cx, cy = rng.uniform(0.2, 0.8, 2)
        rad = rng.uniform(0.15, 0.45)
        region = (xx - cx) ** 2 + (yy - cy) ** 2 < rad**2
        tex = ca[:, None, None] * (1 - wave) + cb[:, None, None] * wave
        img[:, region] = tex[:, region]

    ss = _SUPERSAMPLE
    img = img.reshape(channels, size, ss, size, ss).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0)


@dataclass
class DatasetConfig:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    size: int = 32
    channels: int = 3
    blur_len_min: float = 3.0
    blur_len_max: float = 9.0
    noise_sigma_max: float = 0.01
    boundary_mode: BoundaryMode = BoundaryMode.REPLICATE
    seed: int = 0

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["boundary_mode"] = self.boundary_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["boundary_mode"] = BoundaryMode(d["boundary_mode"])
        return cls(**d)


@dataclass
class Dataset:
    config: DatasetConfig
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _make_sample(cfg: DatasetConfig, index: int) -> PairSample:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    sharp = _render_sharp(rng, cfg.size, cfg.channels)
    length = float(rng.uniform(cfg.blur_len_min, cfg.blur_len_max))
    angle = float(rng.uniform(0.0, math.pi))
    sigma = float(rng.uniform(0.0, cfg.noise_sigma_max))
    kernel = make_motion_kernel(length, angle)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    blurred = blur(sharp, kernel, cfg.boundary_mode, sigma, noise_seed)
    return PairSample(sharp=sharp, blurred=blurred, kernel_length=length,
                      kernel_angle=angle, noise_sigma=sigma)


def generate_dataset(cfg: DatasetConfig) -> Dataset:
    """Pure function of (seed, config); splits use disjoint global indices."""
    ds = Dataset(config=cfg)
    idx = 0
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        bucket = ds.split(split)
        for _ in range(n):
            bucket.append(_make_sample(cfg, idx))
            idx += 1
    return ds


# ---------------------------------------------------------------------------
# binary PGM (P5) / PPM (P6) I/O, maxval 255


class ImageFormatError(ValueError):
    pass


def write_image(path, image: np.ndarray) -> None:
    """Write a (H,W), (1,H,W) or (3,H,W) [0,1] image; round-half-up to 8 bit."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got shape {img.shape}")
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    c, h, w = q.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = q[0].tobytes() if c == 1 else q.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(payload)


def _read_token(data: bytes, pos: int):
    while pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError(f"truncated header at byte offset {start}")
    return data[start:pos], pos


def read_image(path) -> np.ndarray:
    """Read binary PGM/PPM (maxval 255) into a (C, H, W) [0,1] float map."""
    with open(path, "rb") as f:
        data = f.read()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r} at byte offset 0")
    try:
        wtok, pos = _read_token(data, pos)
        htok, pos = _read_token(data, pos)
        mtok, pos = _read_token(data, pos)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as e:
        raise ImageFormatError(f"malformed header near byte offset {pos}: {e}") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported max value {maxval} (only 255)")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError(
            f"truncated payload at byte offset {pos + len(payload)}: "
            f"expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        out = arr.reshape(1, h, w)
    else:
        out = arr.reshape(h, w, 3).transpose(2, 0, 1)
    return out.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# on-disk dataset layout with JSON manifest


def save_dataset(directory, ds: Dataset) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {"version": MANIFEST_VERSION, "config": ds.config.to_dict(), "splits": {}}
    for split in ("train", "val", "test"):
        os.makedirs(os.path.join(directory, split), exist_ok=True)
        entries = []
        for i, s in enumerate(ds.split(split)):
            sharp_rel = f"{split}/pair_{i:05d}_sharp.ppm"
            blur_rel = f"{split}/pair_{i:05d}_blur.ppm"
            write_image(os.path.join(directory, sharp_rel), s.sharp)
            write_image(os.path.join(directory, blur_rel), s.blurred)
            entries.append({
                "sharp": sharp_rel,
                "blurred": blur_rel,
                "kernel_length": s.kernel_length,
                "kernel_angle": s.kernel_angle,
                "noise_sigma": s.noise_sigma,
            })
        manifest["splits"][split] = entries
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(directory) -> Dataset:
    with open(os.path.join(directory, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    ds = Dataset(config=DatasetConfig.from_dict(manifest["config"]))
    for split in ("train", "val", "test"):
        bucket = ds.split(split)
        for e in manifest["splits"][split]:
            bucket.append(PairSample(
                sharp=read_image(os.path.join(directory, e["sharp"])),
                blurred=read_image(os.path.join(directory, e["blurred"])),
                kernel_length=e["kernel_length"],
                kernel_angle=e["kernel_angle"],
                noise_sigma=e["noise_sigma"],
            ))
    return ds
