"""Dataset ingestion and the synthetic shapes generator.

Images are 8-bit RGB rasters, masks single-channel 8-bit rasters with
ignore = 255. The manifest is a JSON file with a versioned format tag;
an optional color table converts RGB-coded ground truth to class ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .annotations import IGNORE_VALUE
from .labels import LabelSpace

MANIFEST_MAGIC = "INCSEG-MANIFEST-1"


class ManifestError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class DatasetEntry:
    image_id: str
    image_path: Path
    mask_path: Path
    split: str  # "pretrain" | "incremental"

    def load_image(self) -> np.ndarray:
        return np.asarray(Image.open(self.image_path).convert("RGB"))

    def load_mask(self) -> np.ndarray:
        return np.asarray(Image.open(self.mask_path)).astype(np.int64)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[DatasetEntry]
    class_names: list[str]
    background_name: str
    warnings: list[str] = field(default_factory=list)

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace.from_names(self.class_names, background=self.background_name)

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot parse manifest {path}: {e}") from e
    if blob.get("format") != MANIFEST_MAGIC:
        raise ManifestError(f"{path} is not a {MANIFEST_MAGIC} manifest")
    root = path.parent
    class_names = list(blob["class_names"])
    n_classes = len(class_names)
    entries = []
    for rec in blob["entries"]:
        entry = DatasetEntry(
            image_id=rec["image_id"],
            image_path=root / rec["image"],
            mask_path=root / rec["mask"],
            split=rec["split"],
        )
        if rec["split"] not in ("pretrain", "incremental"):
            raise ManifestError(f"unknown split {rec['split']!r} for {rec['image_id']}")
        for p in (entry.image_path, entry.mask_path):
            if not p.exists():
                raise ManifestError(f"missing file {p}")
        img, mask = entry.load_image(), entry.load_mask()
        if img.shape[:2] != mask.shape:
            raise ManifestError(
                f"shape mismatch for {entry.image_id}: image {img.shape[:2]} vs mask {mask.shape}"
            )
        bad = set(np.unique(mask)) - set(range(n_classes)) - {IGNORE_VALUE}
        if bad:
            raise ManifestError(
                f"mask {entry.mask_path} contains undeclared class ids {sorted(bad)}"
            )
        entries.append(entry)
    ids = [e.image_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate image ids in manifest")
    manifest = DatasetManifest(
        root=root,
        entries=entries,
        class_names=class_names,
        background_name=blob.get("background", class_names[0]),
    )
    if not manifest.split("incremental"):
        manifest.warnings.append("manifest has an empty incremental split (pretrain-only use)")
    return manifest


@dataclass
class SyntheticSpec:
    image_size: int = 256
    n_pretrain: int = 20
    n_incremental: int = 6
    lines_per_image: int = 3
    rects_per_image: int = 4
    noise_level: float = 12.0
    seed: int = 0
    min_new_class_pixels: int = 300

    def __post_init__(self):
        # rectangles are at least 24x24, which bounds the guaranteed pixel count
        if self.rects_per_image * 24 * 24 < self.min_new_class_pixels:
            raise ValueError(
                "rectangle density too low to guarantee "
                f"{self.min_new_class_pixels} new-class pixels per image"
            )


def _render_synthetic(rng: np.random.Generator, spec: SyntheticSpec):
    s = spec.image_size
    base = np.empty((s, s, 3), dtype=np.float32)
    base[..., 0] = 95
    base[..., 1] = 120
    base[..., 2] = 85
    texture = gaussian_filter(rng.normal(0, 1, (s, s)), sigma=6) * 40
    img = base + texture[..., None]
    mask = np.zeros((s, s), dtype=np.uint8)

    # line strips: dark gray, old class of interest
    for _ in range(spec.lines_per_image):
        p0 = rng.integers(0, s, 2)
        p1 = rng.integers(0, s, 2)
        thickness = int(rng.integers(5, 10))
        stroke = np.zeros((s, s), dtype=np.uint8)
        cv2.line(stroke, tuple(int(v) for v in p0), tuple(int(v) for v in p1), 1, thickness)
        shade = float(rng.uniform(50, 75))
        img[stroke == 1] = shade
        mask[stroke == 1] = 1

    # rotated rectangles: bright reddish, new class
    for _ in range(spec.rects_per_image):
        cx, cy = rng.uniform(30, s - 30, 2)
        w, h = rng.uniform(24, 56, 2)
        angle = rng.uniform(0, 180)
        box = cv2.boxPoints(((cx, cy), (w, h), angle)).astype(np.int32)
        poly = np.zeros((s, s), dtype=np.uint8)
        cv2.fillPoly(poly, [box], 1)
        color = np.array([rng.uniform(170, 210), rng.uniform(70, 100), rng.uniform(70, 100)])
        img[poly == 1] = color
        mask[poly == 1] = 2

    img += rng.normal(0, spec.noise_level, (s, s, 3))
    return np.clip(img, 0, 255).astype(np.uint8), mask


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Writes a deterministic synthetic dataset and its manifest to out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records = []
    plan = [("pretrain", i) for i in range(spec.n_pretrain)] + [
        ("incremental", i) for i in range(spec.n_incremental)
    ]
    for split, i in plan:
        while True:
            img, mask = _render_synthetic(rng, spec)
            new_px = int((mask == 2).sum())
            old_px = int((mask == 1).sum())
            if spec.rects_per_image == 0 or (
                new_px >= spec.min_new_class_pixels and old_px > 0
            ):
                break
        image_id = f"{split}_{i:03d}"
        Image.fromarray(img).save(out / f"{image_id}.png")
        Image.fromarray(mask).save(out / f"{image_id}_mask.png")
        records.append(
            {
                "image_id": image_id,
                "image": f"{image_id}.png",
                "mask": f"{image_id}_mask.png",
                "split": split,
            }
        )
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {
                "format": MANIFEST_MAGIC,
                "class_names": ["background", "line", "rect"],
                "background": "background",
                "entries": records,
            },
            indent=2,
        )
    )
    return load_manifest(manifest_path)


def image_to_tensor(img: np.ndarray):
    import torch

    return torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1)


def sample_crop(
    image: np.ndarray,
    mask: np.ndarray,
    crop_size: int,
    rng: np.random.Generator,
    require_label: np.ndarray | None = None,
    max_retries: int = 100,
):
    """Aligned random crop; with require_label, guarantees >=1 labeled pixel.

    Crops are centered on a uniformly drawn labeled pixel with jitter up
    to half the crop; after bounded retries the fallback centers exactly
    on a labeled pixel.
    """
    h, w = mask.shape
    if crop_size > h or crop_size > w:
        raise SamplingError(f"crop {crop_size} exceeds image {h}x{w}")
    if require_label is None:
        r0 = int(rng.integers(0, h - crop_size + 1))
        c0 = int(rng.integers(0, w - crop_size + 1))
        return image[r0 : r0 + crop_size, c0 : c0 + crop_size], mask[r0 : r0 + crop_size, c0 : c0 + crop_size]

    rows, cols = np.nonzero(require_label != IGNORE_VALUE)
    if rows.size == 0:
        raise SamplingError("require_label has no labeled pixel")

    def window_around(r, c, jitter: bool):
        dr = int(rng.integers(-crop_size // 2, crop_size // 2 + 1)) if jitter else 0
        dc = int(rng.integers(-crop_size // 2, crop_size // 2 + 1)) if jitter else 0
        r0 = int(np.clip(r - crop_size // 2 + dr, 0, h - crop_size))
        c0 = int(np.clip(c - crop_size // 2 + dc, 0, w - crop_size))
        return r0, c0

    for attempt in range(max_retries + 1):
        k = int(rng.integers(0, rows.size))
        r0, c0 = window_around(rows[k], cols[k], jitter=attempt < max_retries)
        win = require_label[r0 : r0 + crop_size, c0 : c0 + crop_size]
        if (win != IGNORE_VALUE).any():
            return (
                image[r0 : r0 + crop_size, c0 : c0 + crop_size],
                mask[r0 : r0 + crop_size, c0 : c0 + crop_size],
            )
    raise SamplingError("no admissible crop found")
