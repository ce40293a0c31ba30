"""Dataset loading and synthetic data generation.

On-disk layout (BCSS-WSSS flavored):

    root/labels.tsv            tab-separated: split, id, multi-hot string
    root/train/img/<id>.png
    root/val/img/<id>.png      + root/val/mask/<id>.png
    root/test/img/<id>.png     + root/test/mask/<id>.png

Images are 8-bit RGB PNGs; masks are single-channel indexed PNGs with values
in 0..C-1 (every pixel carries a class, there is no void index). Image-level
labels live in the manifest, one line per sample.

The synthetic generator renders each class as a striped texture in a distinct
hue, with two brightness/phase variants per class so that a class is not a
single visual mode. Pixels are produced as uint8 from the start, which makes
the PNG round trip bitwise exact.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Raised for manifest or file problems; messages carry the sample id."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (C,) float32 multi-hot
    mask: Optional[np.ndarray] = None  # (H, W) int64, values in 0..C-1

    def label_set(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.flatnonzero(self.labels > 0.5))


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic synthetic dataset.

    ``blob_count`` bounds (inclusive) how many foreign-class blobs are painted
    over each sample's base texture. ``texture_period`` is the stripe period
    in pixels. ``noise`` is uniform uint8 jitter added to the rendering.
    """

    num_classes: int = 4
    image_size: int = 64
    num_samples: int = 20
    blob_count: Tuple[int, int] = (1, 3)
    texture_period: int = 8
    noise: int = 6
    seed: int = 0


def _class_palette(num_classes: int) -> List[np.ndarray]:
    # evenly spaced hues, full saturation; one base color per class
    colors = []
    for c in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb(c / max(num_classes, 1), 0.85, 0.9)
        colors.append(np.array([r, g, b], dtype=np.float64) * 255.0)
    return colors


def _render_texture(
    mask_region: np.ndarray,
    class_id: int,
    variant: int,
    spec: SyntheticSpec,
    canvas: np.ndarray,
) -> None:
    """Paints the striped texture of (class_id, variant) where mask_region holds."""
    h, w = mask_region.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # stripe orientation is a class property, phase and tone are the variant
    angle = class_id * (np.pi / max(spec.num_classes, 1)) + np.pi / 7.0
    proj = xs * np.cos(angle) + ys * np.sin(angle)
    phase = 0.0 if variant == 0 else spec.texture_period / 2.0
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * (proj + phase) / spec.texture_period)

    base = _class_palette(spec.num_classes)[class_id]
    if variant == 0:
        lo, hi = base * 0.55, np.minimum(base * 1.25 + 30.0, 255.0)
    else:
        lo, hi = base * 0.30, base * 0.95
    pixels = lo[:, None, None] + (hi - lo)[:, None, None] * wave[None]
    canvas[:, mask_region] = pixels[:, mask_region]


def generate_synthetic(spec: SyntheticSpec, prefix: str = "synth") -> List[Sample]:
    """Deterministic list of samples with exact pixel masks.

    Each sample starts as one full-frame base class and gets a few elliptical
    blobs of other classes (or the same class in its other variant) painted on
    top. Image-level labels are recomputed from the final mask, so they always
    equal the set of classes actually present.
    """
    if spec.num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if spec.blob_count[0] > spec.blob_count[1] or spec.blob_count[0] < 0:
        raise ValueError(f"bad blob_count range {spec.blob_count}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    size = spec.image_size
    samples = []
    for index in range(spec.num_samples):
        base_class = index % spec.num_classes
        canvas = np.zeros((3, size, size), dtype=np.float64)
        mask = np.full((size, size), base_class, dtype=np.int64)
        full = np.ones((size, size), dtype=bool)
        _render_texture(full, base_class, int(rng.integers(2)), spec, canvas)

        n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        for _ in range(n_blobs):
            blob_class = int(rng.integers(spec.num_classes))
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            ry = rng.uniform(0.12 * size, 0.3 * size)
            rx = rng.uniform(0.12 * size, 0.3 * size)
            theta = rng.uniform(0.0, np.pi)
            dy, dx = ys - cy, xs - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            blob = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
            _render_texture(blob, blob_class, int(rng.integers(2)), spec, canvas)
            mask[blob] = blob_class

        if spec.noise > 0:
            canvas += rng.integers(-spec.noise, spec.noise + 1, size=canvas.shape)
        pixels = np.clip(np.round(canvas), 0, 255).astype(np.uint8)

        labels = np.zeros(spec.num_classes, dtype=np.float32)
        labels[np.unique(mask)] = 1.0
        samples.append(
            Sample(
                id=f"{prefix}_{index:04d}",
                image=pixels.astype(np.float32) / 255.0,
                labels=labels,
                mask=mask,
            )
        )
    return samples


def _labels_to_bits(labels: np.ndarray) -> str:
    return "".join("1" if v > 0.5 else "0" for v in labels)


def _bits_to_labels(bits: str, sample_id: str) -> np.ndarray:
    if not bits or any(ch not in "01" for ch in bits):
        raise DataError(f"sample {sample_id}: malformed label string {bits!r}")
    return np.array([float(ch) for ch in bits], dtype=np.float32)


def save_dataset(root, splits: Dict[str, List[Sample]]) -> None:
    """Writes samples under ``root`` in the external layout (see module doc)."""
    root = Path(root)
    lines = []
    for split in sorted(splits):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        img_dir = root / split / "img"
        img_dir.mkdir(parents=True, exist_ok=True)
        for sample in sorted(splits[split], key=lambda s: s.id):
            pixels = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(
                img_dir / f"{sample.id}.png"
            )
            if sample.mask is not None and split in ("val", "test"):
                mask_dir = root / split / "mask"
                mask_dir.mkdir(parents=True, exist_ok=True)
                if sample.mask.max() > 255:
                    raise ValueError(f"sample {sample.id}: mask does not fit 8-bit PNG")
                Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(
                    mask_dir / f"{sample.id}.png"
                )
            lines.append(f"{split}\t{sample.id}\t{_labels_to_bits(sample.labels)}")
    (root / "labels.tsv").write_text("\n".join(lines) + "\n")


def load_dataset(root, split: str) -> List[Sample]:
    """Samples of one split, sorted by id. An absent split is an empty list."""
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    manifest = root / "labels.tsv"
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")

    entries = []
    num_bits = None
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise DataError(f"labels.tsv line {lineno}: expected 3 tab-separated fields")
        line_split, sample_id, bits = parts
        if line_split not in SPLITS:
            raise DataError(f"sample {sample_id}: unknown split {line_split!r}")
        labels = _bits_to_labels(bits, sample_id)
        if num_bits is None:
            num_bits = len(bits)
        elif len(bits) != num_bits:
            raise DataError(
                f"sample {sample_id}: label string has {len(bits)} bits, expected {num_bits}"
            )
        if line_split == split:
            entries.append((sample_id, labels))

    samples = []
    for sample_id, labels in sorted(entries):
        img_path = root / split / "img" / f"{sample_id}.png"
        if not img_path.exists():
            raise DataError(f"sample {sample_id}: missing image file {img_path}")
        try:
            with Image.open(img_path) as handle:
                rgb = np.asarray(handle.convert("RGB"), dtype=np.uint8)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"sample {sample_id}: unreadable image {img_path}: {exc}") from exc
        image = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0

        mask = None
        mask_path = root / split / "mask" / f"{sample_id}.png"
        if mask_path.exists():
            try:
                with Image.open(mask_path) as handle:
                    mask = np.asarray(handle.convert("L"), dtype=np.int64)
            except Exception as exc:
                raise DataError(
                    f"sample {sample_id}: unreadable mask {mask_path}: {exc}"
                ) from exc
            if mask.shape != image.shape[1:]:
                raise DataError(
                    f"sample {sample_id}: mask size {mask.shape} does not match "
                    f"image size {image.shape[1:]}"
                )
            if mask.max() >= len(labels):
                raise DataError(
                    f"sample {sample_id}: mask labels up to {int(mask.max())} exceed "
                    f"num_classes {len(labels)}"
                )
        samples.append(Sample(id=sample_id, image=image, labels=labels, mask=mask))
    return samples
