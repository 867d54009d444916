"""IDX image/label files, the rotate+shear task transform and a synthetic digit stand-in."""
from __future__ import annotations

import gzip
import logging
import math
import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from morphcl.exceptions import IdxFormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28
PIXELS = SIDE * SIDE
MAX_SHEAR_DEG = 60.0

IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# --- IDX format ---
def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except (OSError, EOFError) as exc:
        raise IdxFormatError(f"{path}: cannot read ({exc})") from exc


def _parse_images(raw: bytes, path: Path) -> np.ndarray:
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: truncated image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
    expected = n * rows * cols
    if len(raw) - 16 < expected:
        raise IdxFormatError(f"{path}: truncated, expected {expected} pixel bytes, found {len(raw) - 16}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0


def _parse_labels(raw: bytes, path: Path) -> np.ndarray:
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) - 8 < n:
        raise IdxFormatError(f"{path}: truncated, expected {n} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path: Path, labels_path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Images as an n x (rows*cols) matrix in [0, 1] and labels as an int vector"""
    images = _parse_images(_read_bytes(images_path), images_path)
    labels = _parse_labels(_read_bytes(labels_path), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    logger.info("loaded %d images from %s", images.shape[0], images_path)
    return images, labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Path, labels_path: Path) -> None:
    """Write [0, 1] images (n x 784) and int labels as IDX files; `.gz` suffixes compress"""
    images = np.asarray(images, dtype=np.float64).reshape(-1, SIDE, SIDE)
    labels = np.asarray(labels).astype(np.uint8).reshape(-1)
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    image_bytes = struct.pack(">IIII", IMAGE_MAGIC, pixels.shape[0], SIDE, SIDE) + pixels.tobytes()
    label_bytes = struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()
    for path, payload in ((Path(images_path), image_bytes), (Path(labels_path), label_bytes)):
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".gz":
            with gzip.open(path, "wb") as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)


def find_idx(data_dir: Path, split: str = "train") -> tuple[Path, Path] | None:
    data_dir = Path(data_dir)
    found = []
    for name in IDX_NAMES[split]:
        for candidate in (data_dir / name, data_dir / f"{name}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
    return (found[0], found[1]) if len(found) == 2 else None


# --- Rotation / shear ---
def rotate_shear_matrix(theta: float, shear: bool = True) -> np.ndarray:
    """Forward (row, col) map: rotation by theta followed by a horizontal shear"""
    rad = math.radians(theta)
    rot = np.array([[math.cos(rad), -math.sin(rad)], [math.sin(rad), math.cos(rad)]])
    k = math.tan(math.radians(min(theta, MAX_SHEAR_DEG))) if shear else 0.0
    sh = np.array([[1.0, 0.0], [k, 1.0]])
    return sh @ rot


def transform_rotate_shear(images: np.ndarray, theta: float, shear: bool = True) -> np.ndarray:
    """Rotate every 28x28 image by theta degrees about its centre, then shear by the same angle"""
    if not 0.0 <= theta <= 180.0:
        raise ValueError(f"theta must lie in [0, 180], got {theta}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != PIXELS:
        raise ValueError(f"expected an n x {PIXELS} matrix, got {images.shape}")
    if theta == 0.0:
        return images.copy()

    center = np.full(2, (SIDE - 1) / 2.0)
    inverse = np.linalg.inv(rotate_shear_matrix(theta, shear))
    offset = center - inverse @ center
    out = np.empty_like(images)
    for i, img in enumerate(images.reshape(-1, SIDE, SIDE)):
        out[i] = ndimage.affine_transform(img, inverse, offset=offset, order=1, mode="constant", cval=0.0).ravel()
    return out


# --- Synthetic stand-in ---
def _prototype(digit: int) -> np.ndarray:
    rng = np.random.default_rng(10_000 + digit)
    canvas = np.zeros((SIDE, SIDE))
    rr, cc = np.mgrid[0:SIDE, 0:SIDE]
    for _ in range(3):
        (r0, c0), (r1, c1) = rng.uniform(5, 22, size=(2, 2))
        for s in np.linspace(0.0, 1.0, 24):
            r, c = r0 + s * (r1 - r0), c0 + s * (c1 - c0)
            canvas = np.maximum(canvas, np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / 2.0))
    return canvas


def synthetic_digits(n_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 28x28 digit-like images: a fixed stroke prototype per class plus shift and noise"""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for digit in range(10):
        proto = _prototype(digit)
        for _ in range(n_per_class):
            dr, dc = rng.integers(-2, 3, size=2)
            img = np.roll(proto, (dr, dc), axis=(0, 1)) + rng.normal(0.0, 0.05, size=(SIDE, SIDE))
            images.append(np.clip(img, 0.0, 1.0).ravel())
            labels.append(digit)
    order = rng.permutation(len(labels))
    return np.asarray(images)[order], np.asarray(labels, dtype=np.int64)[order]


def load_digits(data_dir: Path | None, n_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """IDX training set from `data_dir` when present, otherwise the synthetic stand-in"""
    paths = find_idx(data_dir) if data_dir is not None else None
    if paths is None:
        logger.warning("no IDX files under %s, using synthetic digits", data_dir)
        return synthetic_digits(n_per_class, seed)
    return load_idx(*paths)
