"""Procedural shape-segmentation domains and an on-disk dataset format.

A domain is rendered in two independent random streams: one for scene
geometry (which fixes the label maps) and one for appearance. Domain shift
parameters only ever feed the appearance stream, so two specs that differ
only in their shift produce identical labels for the same seed.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

IGNORE_INDEX = 255
SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross", "bar")
MAX_REJECTIONS = 100


@dataclass
class DomainSpec:
    name: str
    role: str = "target"
    palette: List[Tuple[float, float, float]] = field(default_factory=list)
    texture_noise_sigma: float = 0.0
    blur_radius: float = 0.0
    illumination_gain: float = 1.0
    clutter_density: float = 0.0
    image_size: Tuple[int, int] = (64, 64)
    num_classes: int = 4
    samples: int = 400
    val_samples: int = 100

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"domain role must be 'source' or 'target', got {self.role!r}")
        if not 2 <= self.num_classes <= len(SHAPES) + 1:
            raise ValueError(f"num_classes must lie in [2, {len(SHAPES) + 1}]")
        self.palette = [tuple(float(c) for c in rgb) for rgb in self.palette]
        if len(self.palette) != self.num_classes or any(len(rgb) != 3 for rgb in self.palette):
            raise ValueError("palette needs one RGB triple per class")
        if not all(np.isfinite(v) and 0 <= v <= 1 for rgb in self.palette for v in rgb):
            raise ValueError("palette entries must lie in [0, 1]")
        for name in ("texture_noise_sigma", "blur_radius", "clutter_density"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if not (np.isfinite(self.illumination_gain) and self.illumination_gain > 0):
            raise ValueError("illumination_gain must be positive")
        self.image_size = tuple(int(s) for s in self.image_size)
        if min(self.image_size) < 16:
            raise ValueError("image_size must be at least 16x16")


@dataclass
class DomainDataset:
    name: str
    role: str
    num_classes: int
    images: np.ndarray                 # N x 3 x H x W float32 in [0, 1]
    labels: Optional[np.ndarray]       # N x H x W uint8, or None
    split: str = "train"

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("image and label counts differ")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.labels is not None


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        s = 0.8 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if kind == "triangle":
        # upward isosceles triangle filling the radius-r box
        top = cy - r
        half = (yy - top) / 2.0
        return (yy >= top) & (yy <= cy + r) & (np.abs(dx) <= half)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = 0.3 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if kind == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.35 * r)
    raise ValueError(kind)


def _render_labels(rng: np.random.Generator, size, num_classes: int) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((h, w), dtype=np.uint8)
    scale = min(h, w) / 64.0
    for _ in range(int(rng.integers(1, 5))):
        cls = int(rng.integers(1, num_classes))
        for _attempt in range(MAX_REJECTIONS):
            r = rng.uniform(6.0, 13.0) * scale
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            if r <= cy <= h - 1 - r and r <= cx <= w - 1 - r:
                break
        else:
            raise RuntimeError(f"could not place a shape inside {h}x{w} after {MAX_REJECTIONS} tries")
        labels[_shape_mask(SHAPES[cls - 1], yy, xx, cy, cx, r)] = cls
    return labels


def _render_image(rng: np.random.Generator, labels: np.ndarray, spec: DomainSpec) -> np.ndarray:
    h, w = labels.shape
    # smooth multiplicative shading, shared by background and objects
    coarse = rng.uniform(0.85, 1.15, size=(h // 8 + 1, w // 8 + 1))
    shading = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=1)[:h, :w]
    index = labels.astype(np.int64)

    # background clutter: darker specks on background pixels only
    n_specks = int(round(spec.clutter_density * h * w / 48.0))
    clutter = np.zeros((h, w), dtype=bool)
    for _ in range(n_specks):
        y, x = rng.integers(0, h - 1), rng.integers(0, w - 1)
        clutter[y:y + 2, x:x + 2] = True
    clutter &= labels == 0

    palette = np.asarray(spec.palette, dtype=np.float64)
    img = palette[index] * shading[..., None]                      # palette recolor
    img[clutter] *= 0.6
    img = img * spec.illumination_gain                              # illumination
    if spec.texture_noise_sigma > 0:                                # texture noise
        img = img + rng.normal(0.0, spec.texture_noise_sigma, size=img.shape)
    radius = int(round(spec.blur_radius))
    if radius > 0:                                                  # box blur
        img = ndimage.uniform_filter(img, size=(2 * radius + 1, 2 * radius + 1, 1), mode="nearest")
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def generate_domain(spec: DomainSpec, seed: int, split: str = "train") -> DomainDataset:
    """Render ``spec.samples`` (train) or ``spec.val_samples`` (val) images.

    Target training splits carry no labels.
    """
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    n = spec.samples if split == "train" else spec.val_samples
    split_key = 0 if split == "train" else 1
    geometry = np.random.default_rng([seed, split_key, 0])
    appearance = np.random.default_rng([seed, split_key, 1])
    h, w = spec.image_size
    images = np.empty((n, 3, h, w), dtype=np.float32)
    labels = np.empty((n, h, w), dtype=np.uint8)
    for i in range(n):
        labels[i] = _render_labels(geometry, spec.image_size, spec.num_classes)
        images[i] = _render_image(appearance, labels[i], spec)
    keep_labels = spec.role == "source" or split == "val"
    return DomainDataset(spec.name, spec.role, spec.num_classes, images,
                         labels if keep_labels else None, split)


def class_histogram(ds: DomainDataset) -> np.ndarray:
    if ds.labels is None:
        raise ValueError(f"dataset {ds.name!r} has no labels")
    valid = ds.labels[ds.labels != IGNORE_INDEX]
    return np.bincount(valid.reshape(-1), minlength=ds.num_classes)


def save_directory_dataset(ds: DomainDataset, path) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    if ds.labels is not None:
        (path / "labels").mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ds))))
    for i in range(len(ds)):
        stem = f"{i:0{width}d}"
        rgb = np.round(ds.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(path / "images" / f"{stem}.png")
        if ds.labels is not None:
            Image.fromarray(ds.labels[i], mode="L").save(path / "labels" / f"{stem}.png")
    h, w = ds.images.shape[2:]
    manifest = {"name": ds.name, "role": ds.role, "num_classes": ds.num_classes,
                "size": [int(h), int(w)], "samples": len(ds), "split": ds.split}
    (path / "domain.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_directory_dataset(path, num_classes: Optional[int] = None) -> DomainDataset:
    """Load ``images/*.png`` and optional ``labels/*.png`` matched by stem."""
    path = Path(path)
    image_files = sorted((path / "images").glob("*.png")) if (path / "images").is_dir() else []
    if not image_files:
        raise FileNotFoundError(f"no images found in {path}")
    meta = {}
    if (path / "domain.json").exists():
        meta = json.loads((path / "domain.json").read_text())
    label_dir = path / "labels"
    images, labels = [], []
    for f in image_files:
        try:
            with Image.open(f) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise OSError(f"cannot read image {f}: {exc}") from exc
        images.append(rgb.transpose(2, 0, 1))
        if label_dir.is_dir():
            lf = label_dir / f.name
            if not lf.exists():
                raise FileNotFoundError(f"missing label file for {f.name}")
            try:
                with Image.open(lf) as im:
                    lab = np.asarray(im.convert("L"), dtype=np.uint8)
            except OSError as exc:
                raise OSError(f"cannot read label {lf}: {exc}") from exc
            if lab.shape != rgb.shape[:2]:
                raise ValueError(f"size mismatch between {f.name} and its label map")
            labels.append(lab)
    if len({im.shape for im in images}) != 1:
        raise ValueError(f"images in {path} differ in size")
    lab_arr = np.stack(labels) if labels else None
    if num_classes is None:
        num_classes = meta.get("num_classes")
    if num_classes is None:
        if lab_arr is None:
            raise ValueError(f"cannot infer the class count of unlabeled dataset {path}")
        valid = lab_arr[lab_arr != IGNORE_INDEX]
        num_classes = int(valid.max()) + 1 if valid.size else 2
    return DomainDataset(meta.get("name", path.name), meta.get("role", "target"), int(num_classes),
                         np.stack(images).astype(np.float32), lab_arr, meta.get("split", "train"))


def batch_iterator(ds: DomainDataset, batch: int, seed: int,
                   labeled: bool = True) -> Iterator[Tuple[torch.Tensor, Optional[torch.Tensor]]]:
    """Endless ``(images, labels)`` stream over fresh permutations of the dataset.

    Permutations are concatenated and cut into batches, so a batch may span
    two passes; over ``k`` full passes every sample is drawn exactly ``k``
    times.
    """
    if labeled and ds.labels is None:
        raise ValueError(f"dataset {ds.name!r} has no labels")
    if not 1 <= batch <= len(ds):
        raise ValueError(f"batch size {batch} must lie in [1, {len(ds)}]")
    rng = np.random.default_rng(seed)
    buffer = np.empty(0, dtype=np.int64)
    while True:
        while len(buffer) < batch:
            buffer = np.concatenate([buffer, rng.permutation(len(ds))])
        idx, buffer = buffer[:batch], buffer[batch:]
        x = torch.from_numpy(ds.images[idx])
        y = torch.from_numpy(ds.labels[idx].astype(np.int64)) if labeled else None
        yield x, y
