"""CT volume preprocessing: dedup, reconstruction, resize, denoise, sharpen, normalize.

All operations are pure functions on numpy arrays; intermediate volumes stay in
floating point and only the optional PNG export quantizes to 8 bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

STAGES = ("raw", "resized", "denoised", "sharpened", "normalized")

VOLUME_MAGIC = b"VOL1"


class PreprocessError(RuntimeError):
    """Raised when a preprocessing stage fails; message carries stage context."""


@dataclass
class SliceStack:
    """An ordered stack of 2D grayscale slices (0-255 intensity semantics)."""

    slices: list[np.ndarray]
    source_order: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.slices) < 1:
            raise ValueError("slice stack must contain at least one slice")


@dataclass
class Volume:
    """Dense 3D intensity grid, depth x height x width."""

    data: np.ndarray
    stage_tag: str = "raw"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.stage_tag not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage_tag!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class PreprocCfg:
    target_side: int = 128
    denoise_sigma: float = 1.0
    sharpen_amount: float = 0.5
    sharpen_sigma: float = 1.0

    def __post_init__(self):
        if self.target_side < 8:
            raise ValueError("target_side must be >= 8")
        if self.denoise_sigma <= 0 or self.sharpen_sigma <= 0:
            raise ValueError("sigmas must be > 0")
        if self.sharpen_amount < 0:
            raise ValueError("sharpen_amount must be >= 0")


def load_stack(stack_dir: Path | str) -> SliceStack:
    """Load a slice-stack directory; lexicographic filename order is stacking order."""
    stack_dir = Path(stack_dir)
    files = sorted(p for p in stack_dir.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise PreprocessError(f"no slice images in {stack_dir}")
    slices = []
    for p in files:
        try:
            img = Image.open(p)
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
        except Exception as exc:
            raise PreprocessError(f"failed to read slice {p}: {exc}") from exc
        slices.append(arr)
    return SliceStack(slices=slices, source_order=[p.name for p in files])


def dedup_slices(stack: SliceStack) -> SliceStack:
    """Drop every slice byte-identical to any earlier one; keep first occurrences."""
    seen: set[bytes] = set()
    kept_slices, kept_names = [], []
    names = stack.source_order or [""] * len(stack.slices)
    for sl, name in zip(stack.slices, names):
        key = np.ascontiguousarray(sl).tobytes()
        if key in seen:
            continue
        seen.add(key)
        kept_slices.append(sl)
        kept_names.append(name)
    return SliceStack(slices=kept_slices, source_order=kept_names)


def reconstruct_volume(stack: SliceStack) -> Volume:
    """Stack slices along axis 0 (the axial axis)."""
    h, w = stack.slices[0].shape
    for i, sl in enumerate(stack.slices):
        if sl.shape != (h, w):
            raise PreprocessError(
                f"slice {i} has shape {sl.shape}, expected {(h, w)}"
            )
    data = np.stack([sl.astype(np.float64) for sl in stack.slices], axis=0)
    return Volume(data=data, stage_tag="raw")


def _resize_axis_linear(arr: np.ndarray, axis: int, out_len: int) -> np.ndarray:
    """1D linear resample along one axis, align-corners-false convention."""
    in_len = arr.shape[axis]
    if out_len < 1:
        raise ValueError("output length must be >= 1")
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_len - 1)
    w = src - i0
    shape = [1] * arr.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i1, axis=axis)
    return lo * (1.0 - w) + hi * w


def resize_volume(vol: Volume, target_side: int) -> Volume:
    """Trilinear resize to a target_side cube (sequential per-axis linear passes)."""
    if target_side < 1:
        raise ValueError("target_side must be >= 1")
    data = vol.data
    for axis in range(3):
        data = _resize_axis_linear(data, axis, target_side)
    return Volume(data=data, stage_tag="resized")


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian kernel truncated at radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _convolve_axis_reflect(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate a symmetric 1D kernel along one axis with mirrored boundaries."""
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="symmetric")
    n = arr.shape[axis]
    out = np.zeros_like(arr, dtype=np.float64)
    for k in range(len(kernel)):
        out += kernel[k] * np.take(padded, np.arange(k, k + n), axis=axis)
    return out


def gaussian_denoise(vol: Volume, sigma: float) -> Volume:
    """Separable 3D Gaussian filter with reflect boundaries."""
    kernel = gaussian_kernel_1d(sigma)
    data = vol.data
    for axis in range(3):
        data = _convolve_axis_reflect(data, kernel, axis)
    return Volume(data=data, stage_tag="denoised")


def sharpen(vol: Volume, amount: float, sigma: float) -> Volume:
    """Unsharp masking clamped to the input's value range."""
    if amount < 0:
        raise ValueError("amount must be >= 0")
    blurred = gaussian_denoise(vol, sigma).data
    out = vol.data + amount * (vol.data - blurred)
    out = np.clip(out, vol.data.min(), vol.data.max())
    return Volume(data=out, stage_tag="sharpened")


def normalize_intensity(vol: Volume) -> Volume:
    """Per-volume min-max rescale to [0, 255]; constant volumes map to zeros."""
    lo = vol.data.min()
    hi = vol.data.max()
    if hi == lo:
        data = np.zeros_like(vol.data)
    else:
        data = 255.0 * (vol.data - lo) / (hi - lo)
    return Volume(data=data, stage_tag="normalized")


def preprocess_scan(stack_dir: Path | str, cfg: PreprocCfg) -> Volume:
    """Full pipeline: load, dedup, reconstruct, resize, denoise, sharpen, normalize."""
    stage = "load"
    try:
        stack = load_stack(stack_dir)
        stage = "dedup"
        stack = dedup_slices(stack)
        stage = "reconstruct"
        vol = reconstruct_volume(stack)
        stage = "resize"
        vol = resize_volume(vol, cfg.target_side)
        stage = "denoise"
        vol = gaussian_denoise(vol, cfg.denoise_sigma)
        stage = "sharpen"
        vol = sharpen(vol, cfg.sharpen_amount, cfg.sharpen_sigma)
        stage = "normalize"
        return normalize_intensity(vol)
    except PreprocessError as exc:
        raise PreprocessError(f"[{stack_dir}] stage={stage}: {exc}") from exc


def save_volume(vol: Volume, path: Path | str) -> None:
    """Write VOL1 binary: magic, three LE uint32 dims, row-major LE float32 data."""
    d, h, w = vol.data.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<III", d, h, w))
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def load_volume(path: Path | str, stage_tag: str = "normalized") -> Volume:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VOLUME_MAGIC:
            raise PreprocessError(f"{path}: bad magic {magic!r}")
        d, h, w = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(d * h * w * 4), dtype="<f4").reshape(d, h, w)
    return Volume(data=data.astype(np.float64), stage_tag=stage_tag)


def export_slices(vol: Volume, out_dir: Path | str) -> list[Path]:
    """Optional inspection export: one 8-bit PNG per axial slice."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    data = np.clip(vol.data, 0, 255).astype(np.uint8)
    for i in range(data.shape[0]):
        p = out_dir / f"slice_{i:04d}.png"
        Image.fromarray(data[i], mode="L").save(p)
        paths.append(p)
    return paths
