"""2.5D multi-view slice extraction: axial, coronal, sagittal.

Slices are sampled uniformly over the central 80% of each axis, bilinearly
resized, and channel-replicated to 3 channels. ViewSets keep [0, 255]
intensities; scaling to the encoder input range happens in `prepare_slice`
(or its vectorized equivalent) at encode time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .preprocess import Volume, _resize_axis_linear

VIEW_NAMES = ("axial", "coronal", "sagittal")


@dataclass
class ViewCfg:
    k_slices: int = 10
    slice_size: int = 224
    norm_mean: float = 0.5
    norm_std: float = 0.5

    def __post_init__(self):
        if self.k_slices < 1:
            raise ValueError("k_slices must be >= 1")
        if self.slice_size < 16:
            raise ValueError("slice_size must be >= 16")
        if self.norm_std <= 0:
            raise ValueError("norm_std must be > 0")


@dataclass
class ViewSet:
    """K slices per orthogonal plane, each (S, S, 3) in [0, 255]."""

    axial: np.ndarray
    coronal: np.ndarray
    sagittal: np.ndarray
    source_indices: dict[str, list[int]] = field(default_factory=dict)

    def views(self) -> dict[str, np.ndarray]:
        return {"axial": self.axial, "coronal": self.coronal, "sagittal": self.sagittal}

    def as_array(self) -> np.ndarray:
        """(3, K, S, S, 3) array in view order axial, coronal, sagittal."""
        return np.stack([self.axial, self.coronal, self.sagittal], axis=0)


def sample_indices(axis_len: int, k: int) -> list[int]:
    """k indices uniformly spaced over the central 80% of the axis."""
    if k < 1 or axis_len < 1:
        raise ValueError("k and axis_len must be >= 1")
    if k == 1:
        return [axis_len // 2]
    out = []
    for i in range(k):
        x = 0.1 * axis_len + (0.8 * axis_len - 1.0) * i / (k - 1)
        idx = int(np.floor(x + 0.5))
        out.append(min(max(idx, 0), axis_len - 1))
    return out


def resize_2d(slice2d: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize, align-corners-false (sequential per-axis linear passes)."""
    arr = np.asarray(slice2d, dtype=np.float64)
    arr = _resize_axis_linear(arr, 0, out_h)
    arr = _resize_axis_linear(arr, 1, out_w)
    return arr


def extract_views(vol: Volume, cfg: ViewCfg) -> ViewSet:
    """Slice along each of the three axes and resize to slice_size squares."""
    if vol.stage_tag != "normalized":
        raise ValueError("extract_views expects a normalized volume")
    d, h, w = vol.data.shape
    if not (d == h == w):
        raise ValueError(f"volume must be cubic, got {vol.data.shape}")
    indices = {name: sample_indices(vol.data.shape[axis], cfg.k_slices)
               for axis, name in enumerate(VIEW_NAMES)}
    views = {}
    for axis, name in enumerate(VIEW_NAMES):
        slabs = []
        for idx in indices[name]:
            sl = np.take(vol.data, idx, axis=axis)
            sl = resize_2d(sl, cfg.slice_size, cfg.slice_size)
            slabs.append(np.repeat(sl[:, :, None], 3, axis=2))
        views[name] = np.stack(slabs, axis=0)
    return ViewSet(axial=views["axial"], coronal=views["coronal"],
                   sagittal=views["sagittal"], source_indices=indices)


def prepare_slice(
    slice2d: np.ndarray, slice_size: int, mean: float = 0.5, std: float = 0.5
) -> np.ndarray:
    """Resize, replicate to 3 channels, scale to [0, 1], standardize. Returns (3, S, S)."""
    arr = np.asarray(slice2d, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty slice")
    if arr.ndim != 2:
        raise ValueError(f"expected 2D slice, got shape {arr.shape}")
    arr = resize_2d(arr, slice_size, slice_size)
    arr = arr / 255.0
    arr = (arr - mean) / std
    return np.repeat(arr[None, :, :], 3, axis=0)


def standardize_views(view_array: np.ndarray, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    """Vectorized prepare step for an already-extracted (…, S, S, 3) view array."""
    return (view_array / 255.0 - mean) / std


def export_viewset(vs: ViewSet, out_dir: Path | str) -> list[Path]:
    """Inspection export: `<view>_<i>.png` per slice (first channel, 8 bit)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr in vs.views().items():
        for i in range(arr.shape[0]):
            img = np.clip(np.rint(arr[i, :, :, 0]), 0, 255).astype(np.uint8)
            p = out_dir / f"{name}_{i}.png"
            Image.fromarray(img, mode="L").save(p)
            paths.append(p)
    return paths
