"""Slice/mask loading, splitting, batching and synthetic blob data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ImageSample:
    """One grayscale slice in [0, 1] with its binary mask."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValidationError(
                f"sample {self.id!r}: image shape {self.image.shape} != mask shape {self.mask.shape}"
            )


@dataclass
class DatasetSplit:
    train: list[ImageSample]
    test: list[ImageSample]
    seed: int
    train_fraction: float = field(default=0.0)


def _read_raster(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def _to_unit_gray(im: Image.Image) -> np.ndarray:
    """Collapse to one channel and scale by the source's nominal range."""
    if im.mode.startswith("I;16") or im.mode == "I":
        arr = np.asarray(im, dtype=np.float64) / 65535.0
    elif im.mode == "F":
        arr = np.asarray(im, dtype=np.float64)
    else:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.clip(arr, 0.0, 1.0)


def load_image(path, target_size: int | None = None) -> np.ndarray:
    """Read a grayscale raster as float32 in [0, 1], bilinearly resized."""
    arr = _to_unit_gray(_read_raster(Path(path)))
    if target_size is not None and arr.shape != (target_size, target_size):
        resized = Image.fromarray(arr.astype(np.float32), mode="F").resize(
            (target_size, target_size), Image.BILINEAR
        )
        arr = np.clip(np.asarray(resized, dtype=np.float64), 0.0, 1.0)
    return arr.astype(np.float32)


def load_mask(path, target_size: int | None = None) -> np.ndarray:
    im = _read_raster(Path(path))
    if im.mode not in ("L", "1", "F") and not im.mode.startswith("I"):
        im = im.convert("L")
    raw = np.asarray(im, dtype=np.float64)
    # masks stored as 0/1 are already binary; 0/255 (or 16-bit) get scaled
    if raw.max(initial=0.0) > 1.0:
        raw = _to_unit_gray(im)
    if target_size is not None and raw.shape != (target_size, target_size):
        raw = np.asarray(
            Image.fromarray(raw.astype(np.float32), mode="F").resize(
                (target_size, target_size), Image.NEAREST
            ),
            dtype=np.float64,
        )
    return (raw >= 0.5).astype(np.uint8)


def load_sample(image_path, mask_path, target_size: int | None = 512, sample_id: str | None = None) -> ImageSample:
    if target_size is not None and target_size < 1:
        raise ValidationError(f"target_size must be positive, got {target_size}")
    image = load_image(image_path, target_size)
    mask = load_mask(mask_path, target_size)
    if image.shape != mask.shape:
        raise ValidationError(
            f"image {image_path} has shape {image.shape} but mask {mask_path} has shape {mask.shape}"
        )
    return ImageSample(image=image, mask=mask, id=sample_id or Path(image_path).stem)


def pair_directories(image_dir, mask_dir) -> list[tuple[Path, Path, str]]:
    """Match images to masks by identical filename stem."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise OSError(f"not a directory: {d}")
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    pairs = []
    for p in sorted(image_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in masks:
            raise ValidationError(f"no mask for image {p} in {mask_dir}")
        pairs.append((p, masks[p.stem], p.stem))
    return pairs


def read_manifest(path) -> list[tuple[Path, Path, str]]:
    """Parse a tab-separated manifest: image path, mask path, id.

    Relative paths resolve against the manifest's directory. Blank lines and
    lines starting with ``#`` are skipped.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        img, msk, sid = parts
        entries.append((path.parent / img, path.parent / msk, sid.strip()))
    return entries


def write_manifest(path, entries: Sequence[tuple[object, object, str]]) -> None:
    lines = [f"{img}\t{msk}\t{sid}\n" for img, msk, sid in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_dataset(entries: Sequence[tuple[object, object, str]], target_size: int | None = 512) -> list[ImageSample]:
    return [load_sample(img, msk, target_size, sid) for img, msk, sid in entries]


def split_dataset(samples: Sequence[ImageSample], train_fraction: float, seed: int) -> DatasetSplit:
    """Deterministic disjoint train/test split.

    Samples are ordered by id before shuffling, so the result depends only on
    the id set, the seed and the fraction.
    """
    n = len(samples)
    if n < 2:
        raise ValidationError(f"need at least 2 samples to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    ids = [s.id for s in samples]
    if len(set(ids)) != n:
        raise ValidationError("sample ids are not unique")
    ordered = sorted(samples, key=lambda s: s.id)
    n_train = min(max(math.floor(train_fraction * n + 0.5), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train = [ordered[i] for i in perm[:n_train]]
    test = [ordered[i] for i in perm[n_train:]]
    return DatasetSplit(train=train, test=test, seed=seed, train_fraction=train_fraction)


def _ellipse_support(size: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def make_synthetic_dataset(count: int, size: int, seed: int) -> list[ImageSample]:
    """Noisy background with 1-3 bright elliptical blobs per slice.

    Background intensities stay below 0.45 and blob intensities above 0.55,
    so the mask is recoverable from the image by thresholding at 0.5.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if size < 32:
        raise ValidationError(f"size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        image = np.clip(0.15 + 0.08 * rng.standard_normal((size, size)), 0.0, 0.45)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
            ry, rx = rng.uniform(max(4.0, 0.06 * size), 0.16 * size, size=2)
            theta = rng.uniform(0.0, math.pi)
            level = rng.uniform(0.7, 0.95)
            blob = _ellipse_support(size, cy, cx, ry, rx, theta)
            noise = 0.04 * rng.standard_normal((size, size))
            image[blob] = np.clip(level + noise[blob], 0.55, 1.0)
            mask |= blob
        samples.append(ImageSample(image.astype(np.float32), mask.astype(np.uint8), f"synthetic-{seed}-{i:04d}"))
    return samples


def batch_iterator(
    samples: Sequence[ImageSample],
    batch_size: int,
    shuffle_seed: int | None = None,
    dtype: torch.dtype = torch.float32,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield (images, masks) tensors of shape B x 1 x H x W."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if len(samples) == 0:
        raise ValidationError("cannot batch an empty sample list")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))

    def _gen():
        for start in range(0, len(order), batch_size):
            chunk = [samples[i] for i in order[start:start + batch_size]]
            images = torch.from_numpy(np.stack([s.image for s in chunk])[:, None]).to(dtype)
            masks = torch.from_numpy(np.stack([s.mask for s in chunk])[:, None]).to(dtype)
            yield images, masks

    return _gen()
