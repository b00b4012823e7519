"""Synthetic lesion-like segmentation data, netpbm file I/O and seeded batching.

Images are binary PPM (P6) and masks binary PGM (P5, gray value = class id).
A dataset directory holds ``images/``, ``masks/`` and ``manifest.tsv`` with
lines ``index<TAB>image_path<TAB>mask_path<TAB>split`` (paths relative to the
directory).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import zoom

from .errors import ContractError, DataError, FormatError

SPLITS = ("train", "val", "test")
MANIFEST = "manifest.tsv"


# -- netpbm ---------------------------------------------------------------

def write_netpbm(path, array: np.ndarray) -> None:
    """Write ``[H, W]`` as P5 or ``[H, W, 3]`` as P6; values must fit in a byte."""
    arr = np.asarray(array)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ContractError(f"netpbm arrays must be [H, W] or [H, W, 3], got {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ContractError("netpbm values must lie in [0, 255]")
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    with open(path, "wb") as f:
        f.write(header + arr.astype(np.uint8).tobytes())


def _tokens(buf: bytes, pos: int, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"header truncated at byte {pos}")
        out.append(buf[start:pos])
    return out, pos


def read_netpbm(path) -> np.ndarray:
    """Parse a binary P5/P6 file with maxval <= 255 into a uint8 array."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0 (expected P5 or P6)")
    toks, pos = _tokens(buf, 2, 3)
    try:
        width, height, maxval = (int(t) for t in toks)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field before byte {pos}") from None
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid dimensions {width}x{height} before byte {pos}")
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (1..255) before byte {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = buf[pos:pos + expected]
    if len(raster) < expected:
        raise FormatError(f"{path}: raster truncated at byte {pos + len(raster)} "
                          f"(expected {expected} bytes from offset {pos})")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def load_pair(image_path, mask_path, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Image scaled to ``[0, 1]`` float32 ``[H, W, 3]`` and an int64 class mask ``[H, W]``."""
    image = read_netpbm(image_path)
    mask = read_netpbm(mask_path)
    if image.ndim != 3:
        raise FormatError(f"{image_path}: expected a P6 color image")
    if mask.ndim != 2:
        raise FormatError(f"{mask_path}: expected a P5 gray mask")
    if image.shape[:2] != mask.shape:
        raise DataError(f"image {image.shape[:2]} and mask {mask.shape} sizes differ")
    if num_classes is not None and mask.max(initial=0) >= num_classes:
        y, x = (int(v) for v in np.argwhere(mask >= num_classes)[0])
        raise DataError(f"{mask_path}: class {mask[y, x]} at pixel (row={y}, col={x}) "
                        f">= num_classes={num_classes}")
    return image.astype(np.float32) / 255.0, mask.astype(np.int64)


# -- synthetic generator ----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    num_images: int = 200
    num_classes: int = 2
    noise: float = 0.05
    seed: int = 0
    min_fraction: float = 0.05
    max_fraction: float = 0.6

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 32:
            raise ContractError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_classes not in (2, 3):
            raise ContractError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.num_images < 1:
            raise ContractError("num_images must be positive")


def _ellipse_inside(rng, size):
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    ry, rx = rng.uniform(0.1, 0.3, size=2) * size
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)

    def inside(y, x):
        u = (x - cx) * c + (y - cy) * s
        v = -(x - cx) * s + (y - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return inside


def _polygon_inside(rng, size):
    """Star-shaped blob with a smooth (low-harmonic) radial profile."""
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    r0 = rng.uniform(0.12, 0.28) * size
    amps = rng.uniform(0, 0.18, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)

    def inside(y, x):
        ang = np.arctan2(y - cy, x - cx)
        r = r0 * (1 + sum(a * np.cos((k + 2) * ang + p) for k, (a, p) in enumerate(zip(amps, phases))))
        return np.hypot(y - cy, x - cx) <= r
    return inside


def _coverage(inside, size: int, ss: int = 4) -> np.ndarray:
    """Fraction of ``ss x ss`` sub-pixel samples inside the shape (anti-aliasing)."""
    offs = (np.arange(ss) + 0.5) / ss
    grid = np.arange(size)
    y = (grid[:, None] + offs[None, :]).reshape(-1)
    yy, xx = np.meshgrid(y, y, indexing="ij")
    hit = inside(yy, xx).astype(np.float64)
    return hit.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _smooth_field(rng, size: int, cells: int = 8) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    return zoom(coarse, size / cells, order=1)


def synthesize_pair(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One ``(uint8 image [S, S, 3], uint8 mask [S, S])`` pair, deterministic in (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    while True:
        n_blobs = int(rng.integers(1, 4))
        alphas, classes = [], []
        for _ in range(n_blobs):
            poly = rng.random() < 0.5
            inside = (_polygon_inside if poly else _ellipse_inside)(rng, size)
            alphas.append(_coverage(inside, size))
            classes.append(2 if (poly and spec.num_classes == 3) else 1)
        mask = np.zeros((size, size), dtype=np.uint8)
        for a, k in zip(alphas, classes):
            mask[a >= 0.5] = k
        frac = (mask > 0).mean()
        if spec.min_fraction <= frac <= spec.max_fraction:
            break
    skin = np.array([0.78, 0.62, 0.52]) + rng.uniform(-0.08, 0.08, size=3)
    image = skin[None, None, :] * (1 + 0.06 * _smooth_field(rng, size)[..., None])
    for a, k in zip(alphas, classes):
        tone = np.array([0.42, 0.26, 0.18]) if k == 1 else np.array([0.30, 0.22, 0.34])
        tone = tone + rng.uniform(-0.06, 0.06, size=3)
        lesion = tone[None, None, :] * (1 + 0.12 * _smooth_field(rng, size, 16)[..., None])
        image = image * (1 - a[..., None]) + lesion * a[..., None]
    image = image + rng.normal(0, spec.noise, size=image.shape)
    image = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    return image, mask


def split_of(index: int, num_images: int) -> str:
    n_train = int(round(0.8 * num_images))
    n_val = int(round(0.1 * num_images))
    if index < n_train:
        return "train"
    return "val" if index < n_train + n_val else "test"


def generate_synthetic(spec: SyntheticSpec, out_dir, force: bool = False) -> Path:
    """Write the dataset and return the manifest path."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ContractError(f"{out} already exists and is not empty; pass --force to overwrite")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(spec.num_images):
        image, mask = synthesize_pair(spec, i)
        img_rel = f"images/img_{i:04d}.ppm"
        mask_rel = f"masks/mask_{i:04d}.pgm"
        write_netpbm(out / img_rel, image)
        write_netpbm(out / mask_rel, mask)
        lines.append(f"{i}\t{img_rel}\t{mask_rel}\t{split_of(i, spec.num_images)}\n")
    manifest = out / MANIFEST
    manifest.write_text("".join(lines))
    return manifest


# -- datasets and batching ----------------------------------------------------

@dataclass
class SegmentationBatch:
    images: np.ndarray  # [B, H, W, 3] in [0, 1]
    masks: np.ndarray   # [B, H, W] class ids
    indices: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DataError(f"images must be [B, H, W, 3], got {self.images.shape}")
        if self.masks.shape != self.images.shape[:3]:
            raise DataError(f"masks {self.masks.shape} do not match images {self.images.shape}")

    def __len__(self) -> int:
        return len(self.images)


def read_manifest(path) -> list[tuple[int, str, str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[3] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: expected index<TAB>image<TAB>mask<TAB>split")
        rows.append((int(parts[0]), parts[1], parts[2], parts[3]))
    return rows


@dataclass
class Dataset:
    images: np.ndarray
    masks: np.ndarray
    indices: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def load(cls, root, split: str | None = None, num_classes: int = 2) -> "Dataset":
        root = Path(root)
        if not (root / MANIFEST).exists():
            raise ContractError(f"no dataset manifest at {root / MANIFEST}; run 'generate' first")
        rows = [r for r in read_manifest(root / MANIFEST) if split is None or r[3] == split]
        if not rows:
            raise ContractError(f"split {split!r} of {root} is empty")
        pairs = [load_pair(root / img, root / msk, num_classes) for _, img, msk, _ in rows]
        return cls(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]),
                   np.array([r[0] for r in rows]), num_classes)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0, flip: bool = False) -> Iterator[SegmentationBatch]:
    """Yield batches in a permutation derived from ``(shuffle_seed, epoch)``.

    ``shuffle_seed=None`` keeps index order. With ``flip`` each sample is
    mirrored horizontally with probability 1/2, drawn from the same seed pair.
    The final partial batch is kept.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot iterate an empty dataset")
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    flips = np.zeros(n, dtype=bool)
    if flip:
        flips = np.random.default_rng([0 if shuffle_seed is None else shuffle_seed, epoch, 1]).random(n) < 0.5
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = dataset.images[idx].copy()
        masks = dataset.masks[idx].copy()
        f = flips[start:start + len(idx)]
        images[f] = images[f][:, :, ::-1]
        masks[f] = masks[f][:, :, ::-1]
        yield SegmentationBatch(images, masks, dataset.indices[idx])


def dataset_exists(root) -> bool:
    return os.path.exists(Path(root) / MANIFEST)
