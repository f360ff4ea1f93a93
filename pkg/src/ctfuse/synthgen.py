"""Synthetic multi-source CT phantom generator.

Produces lung-like volumes whose class identity is a deterministic geometric
signature (positioned ellipsoidal lesions with class-specific texture
frequency), whose source identity is an intensity bias + noise + blur triple,
and whose gender annotation is a mild global shape scaling. Domain and class
factors are independent by construction: source effects are applied after the
class signature.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .preprocess import Volume

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ["scan_id", "label", "source", "gender", "split"]

# One lesion site per class: (z, y, x) center in [-1, 1] cube plus a texture
# frequency. Sites sit inside the lung ellipsoids so the signal survives the
# body mask.
_CLASS_SITES = [
    ((-0.45, -0.15, -0.45), 2.0),
    ((0.45, -0.15, 0.45), 4.0),
    ((-0.45, 0.25, 0.45), 6.0),
    ((0.45, 0.25, -0.45), 8.0),
]


@dataclass
class SourceEffect:
    bias: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0


@dataclass
class SynthSpec:
    n_scans_per_class_per_source: int = 5
    n_classes: int = 2
    n_sources: int = 4
    volume_side: int = 64
    class_signature_strength: float = 1.0
    source_shift: list[SourceEffect] | None = None
    gender_ratio: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 2:
            raise ValueError("n_sources must be >= 2 (VREx needs two domains)")
        if self.n_classes < 1 or self.n_classes > len(_CLASS_SITES):
            raise ValueError(f"n_classes must be in [1, {len(_CLASS_SITES)}]")
        if not (0.0 <= self.class_signature_strength <= 1.0):
            raise ValueError("class_signature_strength must be in [0, 1]")
        if not (0.0 <= self.gender_ratio <= 1.0):
            raise ValueError("gender_ratio must be in [0, 1]")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in [0, 1)")
        if self.source_shift is None:
            self.source_shift = default_source_effects(self.n_sources)
        if len(self.source_shift) != self.n_sources:
            raise ValueError("source_shift must have one entry per source")
        for eff in self.source_shift:
            vals = (eff.bias, eff.noise_sigma, eff.blur_sigma)
            if not all(np.isfinite(v) for v in vals):
                raise ValueError("source effects must be finite")
            if eff.noise_sigma < 0 or eff.blur_sigma < 0:
                raise ValueError("sigmas must be non-negative")


def default_source_effects(n_sources: int, scale: float = 1.0) -> list[SourceEffect]:
    """A fixed ladder of per-source shifts, strength controlled by `scale`."""
    ladder = [
        SourceEffect(0.0, 1.0, 0.0),
        SourceEffect(25.0, 4.0, 0.0),
        SourceEffect(-20.0, 8.0, 0.8),
        SourceEffect(40.0, 2.0, 0.5),
        SourceEffect(-35.0, 6.0, 0.3),
        SourceEffect(15.0, 10.0, 0.7),
    ]
    effects = []
    for i in range(n_sources):
        base = ladder[i % len(ladder)]
        effects.append(
            SourceEffect(base.bias * scale, base.noise_sigma * scale, base.blur_sigma * scale)
        )
    return effects


@dataclass
class ScanRecord:
    scan_id: str
    label: int
    source: int
    gender: str  # "F" or "M"
    split: str  # "train" or "val"


@dataclass
class DatasetManifest:
    records: list[ScanRecord]
    root_path: Path
    spec_echo: SynthSpec | None = None

    def save(self) -> Path:
        path = self.root_path / MANIFEST_NAME
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for r in self.records:
                writer.writerow([r.scan_id, r.label, r.source, r.gender, r.split])
        return path

    @classmethod
    def load(cls, root: Path | str) -> "DatasetManifest":
        root = Path(root)
        records = []
        with open(root / MANIFEST_NAME, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                records.append(
                    ScanRecord(
                        scan_id=row["scan_id"],
                        label=int(row["label"]),
                        source=int(row["source"]),
                        gender=row["gender"],
                        split=row["split"],
                    )
                )
        return cls(records=records, root_path=root)


def _scan_seed(global_seed: int, scan_index: int) -> np.random.SeedSequence:
    digest = hashlib.sha256(f"{global_seed}:{scan_index}".encode()).digest()
    return np.random.SeedSequence(int.from_bytes(digest[:8], "little"))


def _base_phantom(side: int, gender_effect: float) -> np.ndarray:
    """Class-independent body: background, torso ellipse, two lung ellipsoids."""
    c = np.linspace(-1.0, 1.0, side)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    xw = x / gender_effect
    vol = np.full((side, side, side), 15.0)
    body = (y / 0.85) ** 2 + (xw / 0.95) ** 2 <= 1.0
    vol[body] = 150.0
    for lx in (-0.45, 0.45):
        lung = (z / 0.8) ** 2 + (y / 0.55) ** 2 + ((xw - lx) / 0.38) ** 2 <= 1.0
        vol[lung] = 60.0
    return vol


def _class_signature(
    side: int, class_id: int, strength: float, rng: np.random.Generator
) -> np.ndarray:
    """Bright textured ellipsoid at a class-specific site, with small jitter."""
    (cz, cy, cx), freq = _CLASS_SITES[class_id]
    jitter = rng.uniform(-0.05, 0.05, size=3)
    cz, cy, cx = cz + jitter[0], cy + jitter[1], cx + jitter[2]
    radius = 0.28 * (1.0 + rng.uniform(-0.1, 0.1))
    c = np.linspace(-1.0, 1.0, side)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    dist2 = ((z - cz) / radius) ** 2 + ((y - cy) / radius) ** 2 + ((x - cx) / radius) ** 2
    inside = dist2 <= 1.0
    texture = 1.0 + 0.4 * np.sin(2.0 * np.pi * freq * z)
    sig = np.zeros((side, side, side))
    sig[inside] = 90.0 * strength * texture[inside]
    return sig


def make_phantom(
    spec: SynthSpec,
    class_id: int,
    source_effects: SourceEffect,
    gender_effect: float,
    rng: np.random.Generator,
) -> Volume:
    """One phantom volume before slicing to disk; intensities clamped to [0, 255]."""
    if class_id >= spec.n_classes:
        raise ValueError(f"class_id {class_id} out of range for {spec.n_classes} classes")
    side = spec.volume_side
    vol = _base_phantom(side, gender_effect)
    vol = vol + _class_signature(side, class_id, spec.class_signature_strength, rng)
    if source_effects.blur_sigma > 0:
        vol = ndimage.gaussian_filter(vol, sigma=source_effects.blur_sigma)
    vol = vol + source_effects.bias
    if source_effects.noise_sigma > 0:
        vol = vol + rng.normal(0.0, source_effects.noise_sigma, size=vol.shape)
    return Volume(data=np.clip(vol, 0.0, 255.0), stage_tag="raw")


def _write_stack(vol: Volume, scan_dir: Path, rng: np.random.Generator) -> None:
    """Write the slice stack; with probability 0.2 insert one consecutive
    duplicate slice so the dedup path downstream sees real inputs."""
    scan_dir.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(vol.data), 0, 255).astype(np.uint8)
    slices = [data[d] for d in range(data.shape[0])]
    if rng.random() < 0.2:
        pos = int(rng.integers(0, len(slices)))
        slices.insert(pos + 1, slices[pos].copy())
    for i, sl in enumerate(slices):
        Image.fromarray(sl, mode="L").save(scan_dir / f"slice_{i:04d}.png")


def generate_dataset(spec: SynthSpec, out_dir: Path | str) -> DatasetManifest:
    """Write the full synthetic dataset and its manifest. Deterministic in seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[ScanRecord] = []
    n = spec.n_scans_per_class_per_source
    n_val = int(round(spec.val_fraction * n))
    scan_index = 0
    for source in range(spec.n_sources):
        for label in range(spec.n_classes):
            for i in range(n):
                rng = np.random.Generator(np.random.PCG64(_scan_seed(spec.seed, scan_index)))
                gender = "F" if rng.random() < spec.gender_ratio else "M"
                gender_effect = 0.90 if gender == "F" else 1.0
                vol = make_phantom(spec, label, spec.source_shift[source], gender_effect, rng)
                scan_id = f"scan_{scan_index:05d}"
                _write_stack(vol, out_dir / scan_id, rng)
                split = "val" if i < n_val else "train"
                records.append(ScanRecord(scan_id, label, source, gender, split))
                scan_index += 1
    manifest = DatasetManifest(records=records, root_path=out_dir, spec_echo=spec)
    manifest.save()
    return manifest
