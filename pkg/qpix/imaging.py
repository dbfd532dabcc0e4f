"""
Image ingestion and pixel-layout helpers.

Images are 2-D float64 arrays of shape ``(height, width)`` with values in [0, 1].
"""

import gzip
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from common.run_utils import get_with_retry
from qpix.errors import DomainError, FormatError, LayoutError, ShapeError, TruncatedDataError

# Module-level logger
logger = logging.getLogger(__name__)

IDX_MAGIC = {"images": 0x00000803, "labels": 0x00000801}
GZIP_PREFIX = b"\x1f\x8b"

FASHION_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
FASHION_MNIST_URL = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com"
FASHION_MNIST_CLASSES = (
    "T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
    "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot",
)


@dataclass(frozen=True)
class PatchLayout:
    """``rows`` patch-rows by ``cols`` patch-columns."""

    rows: int = 1
    cols: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise LayoutError(f"Patch layout must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @classmethod
    def parse(cls, text: str) -> "PatchLayout":
        """Parse ``"RxC"`` (e.g. ``"2x4"``)."""
        rows, cols = parse_extent_pair(text)
        return cls(rows, cols)

    def patch_shape(self, height: int, width: int) -> Tuple[int, int]:
        """Return ``(patch_height, patch_width)`` for an image of the given size."""
        if height % self.rows or width % self.cols:
            raise LayoutError(
                f"Patch layout {self.rows}x{self.cols} does not divide a {height}x{width} image"
            )
        return height // self.rows, width // self.cols

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


@dataclass
class Dataset:
    """Images of shape ``(count, height, width)`` with integer labels in ``[0, num_labels)``."""

    images: np.ndarray
    labels: np.ndarray
    num_labels: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_labels):
            raise DomainError(
                f"Labels must lie in [0, {self.num_labels}); found range "
                f"[{int(self.labels.min())}, {int(self.labels.max())}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return tuple(self.images.shape[1:])


def parse_extent_pair(text: str) -> Tuple[int, int]:
    """Parse ``"AxB"`` into two positive integers."""
    match = re.fullmatch(r"\s*(\d+)\s*[xX×]\s*(\d+)\s*", text or "")
    if not match:
        raise ValueError(f"Expected a size like '32x32', got {text!r}")
    first, second = int(match.group(1)), int(match.group(2))
    if first < 1 or second < 1:
        raise ValueError(f"Extents must be positive, got {text!r}")
    return first, second


def _validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"Expected a 2-D image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise DomainError("Pixel values must lie in [0, 1]")
    return img


# --- IDX ---

def parse_idx(data: bytes, kind: str) -> np.ndarray:
    """
    Decode an IDX byte stream (optionally gzip-compressed) into a uint8 array.

    Args:
        data: Raw file contents.
        kind: ``"images"`` (magic 0x00000803) or ``"labels"`` (magic 0x00000801).

    Raises:
        FormatError: On an unknown kind or a bad magic number.
        TruncatedDataError: If the stream is shorter than its header announces.
    """
    if kind not in IDX_MAGIC:
        raise FormatError(f"Unknown IDX kind {kind!r}; expected 'images' or 'labels'")
    if data[:2] == GZIP_PREFIX:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise TruncatedDataError(f"Corrupt or truncated gzip IDX stream: {exc}") from exc
    if len(data) < 4:
        raise TruncatedDataError(f"IDX stream of {len(data)} bytes is too short for a header")

    (magic,) = struct.unpack(">I", data[:4])
    if magic != IDX_MAGIC[kind]:
        raise FormatError(f"Bad IDX magic 0x{magic:08x} for {kind}; expected 0x{IDX_MAGIC[kind]:08x}")

    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise TruncatedDataError(f"IDX header needs {header_size} bytes, stream has {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header_size])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = data[header_size:]
    if len(payload) < expected:
        raise TruncatedDataError(f"IDX payload has {len(payload)} bytes, header announces {expected}")
    if len(payload) > expected:
        logger.warning(f"IDX stream has {len(payload) - expected} trailing bytes; ignoring them")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims).copy()


def serialize_idx(array: np.ndarray, kind: str) -> bytes:
    """Encode a uint8 array as an uncompressed IDX byte stream."""
    if kind not in IDX_MAGIC:
        raise FormatError(f"Unknown IDX kind {kind!r}; expected 'images' or 'labels'")
    array = np.asarray(array, dtype=np.uint8)
    expected_ndim = IDX_MAGIC[kind] & 0xFF
    if array.ndim != expected_ndim:
        raise ShapeError(f"IDX {kind} need rank {expected_ndim}, got shape {array.shape}")
    header = struct.pack(">I", IDX_MAGIC[kind]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.tobytes(order="C")


def load_idx_file(path, kind: str) -> np.ndarray:
    """Read and decode an IDX file (plain or gzip)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"Failed to read IDX file {path}: {exc}") from exc
    try:
        return parse_idx(data, kind)
    except FormatError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def _find_idx_file(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise OSError(f"Dataset file {stem}[.gz] not found in {data_dir}")


def load_fashion_mnist(data_dir, split: str = "train", num_labels: int = 10) -> Dataset:
    """
    Load one split of Fashion-MNIST from IDX files in ``data_dir``.

    Pixels are normalized as ``byte / 255.0``.
    """
    if split not in FASHION_MNIST_FILES:
        raise ValueError(f"Unknown split {split!r}; expected 'train' or 'test'")
    data_dir = Path(data_dir)
    image_stem, label_stem = FASHION_MNIST_FILES[split]
    raw_images = load_idx_file(_find_idx_file(data_dir, image_stem), "images")
    raw_labels = load_idx_file(_find_idx_file(data_dir, label_stem), "labels")
    logger.info(f"Loaded {len(raw_labels)} {split} images of {raw_images.shape[1]}x{raw_images.shape[2]} from {data_dir}")
    return Dataset(raw_images.astype(np.float64) / 255.0, raw_labels.astype(np.int64), num_labels)


def fetch_fashion_mnist(data_dir, base_url: str = FASHION_MNIST_URL, force: bool = False) -> Tuple[List[Path], List[Path]]:
    """
    Download the four gzip IDX files into ``data_dir``.

    Requests follow the QPIX_RETRY policy. Files already present are kept unless
    ``force`` is set.

    Returns:
        ``(downloaded, skipped)`` paths.
    """
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    base_url = base_url.rstrip("/")
    downloaded, skipped = [], []
    for stems in FASHION_MNIST_FILES.values():
        for stem in stems:
            target = data_dir / f"{stem}.gz"
            if target.exists() and not force:
                skipped.append(target)
                continue
            url = f"{base_url}/{stem}.gz"
            logger.info(f"Downloading {url}")
            response = get_with_retry(url, timeout=120)
            if response.status_code != 200:
                raise OSError(f"Download of {url} failed with HTTP {response.status_code}")
            try:
                target.write_bytes(response.content)
            except OSError as exc:
                raise OSError(f"Failed to write {target}: {exc}") from exc
            downloaded.append(target)
    return downloaded, skipped


# --- Pixel geometry ---

def resize_bilinear(img: np.ndarray, new_width: int, new_height: int) -> np.ndarray:
    """
    Bilinear resize with half-pixel centers and no antialiasing.

    The source coordinate of output index ``i`` is ``(i + 0.5) * scale - 0.5``,
    clamped to the valid range.
    """
    if new_width < 1 or new_height < 1:
        raise ShapeError(f"Target size must be at least 1x1, got {new_width}x{new_height}")
    img = _validate_image(img)
    height, width = img.shape

    def sample_positions(out_size: int, in_size: int):
        scale = in_size / out_size
        src = (np.arange(out_size) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, in_size - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_size - 1)
        return lo, hi, src - lo

    y0, y1, fy = sample_positions(new_height, height)
    x0, x1, fx = sample_positions(new_width, width)
    top = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
    out = top * (1.0 - fy)[:, None] + bottom * fy[:, None]
    return np.clip(out, 0.0, 1.0)


def snake_flatten(img: np.ndarray) -> np.ndarray:
    """Flatten row 0 left to right, row 1 right to left, and so on."""
    img = np.asarray(img, dtype=np.float64)
    snake = img.copy()
    snake[1::2, :] = snake[1::2, ::-1]
    return snake.reshape(-1)


def snake_unflatten(vector: np.ndarray, width: int, height: int) -> np.ndarray:
    """Inverse of :func:`snake_flatten`."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != width * height:
        raise ShapeError(f"Cannot unflatten {vector.size} values into {height}x{width}")
    img = vector.reshape(height, width).copy()
    img[1::2, :] = img[1::2, ::-1]
    return img


def split_patches(img: np.ndarray, layout: PatchLayout) -> List[np.ndarray]:
    """Cut an image into ``layout.count`` sub-rectangles, ordered row-major over the grid."""
    img = np.asarray(img, dtype=np.float64)
    patch_height, patch_width = layout.patch_shape(*img.shape)
    return [
        img[r * patch_height:(r + 1) * patch_height, c * patch_width:(c + 1) * patch_width].copy()
        for r in range(layout.rows)
        for c in range(layout.cols)
    ]


def join_patches(patches: Sequence[np.ndarray], layout: PatchLayout) -> np.ndarray:
    """Inverse of :func:`split_patches`."""
    if len(patches) != layout.count:
        raise LayoutError(f"Layout {layout} needs {layout.count} patches, got {len(patches)}")
    rows = [np.concatenate(patches[r * layout.cols:(r + 1) * layout.cols], axis=1) for r in range(layout.rows)]
    return np.concatenate(rows, axis=0)


# --- PGM ---

def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to bytes as ``round(255 * p)``."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(255.0 * img).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    """Write a binary (P5) PGM with maxval 255."""
    pixels = quantize(img)
    try:
        PILImage.fromarray(pixels).save(path, format="PPM")
    except (OSError, ValueError) as exc:
        raise OSError(f"Failed to write PGM {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    """Read a grayscale PGM back into [0, 1] floats."""
    try:
        with PILImage.open(path) as handle:
            pixels = np.asarray(handle.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"Failed to read PGM {path}: {exc}") from exc
    return pixels / 255.0


# --- Dataset preparation ---

def prepare_dataset(
    dataset: Dataset,
    size: Optional[Tuple[int, int]] = None,
    classes: Optional[Sequence[int]] = None,
    count: Optional[int] = None,
    seed: int = 0,
) -> Dataset:
    """
    Filter classes, draw a deterministic subset and resize.

    Args:
        dataset: Source dataset.
        size: ``(width, height)`` target, or None to keep the size.
        classes: Original class ids to keep; they are relabelled ``0..len(classes)-1``.
        count: Number of images to keep (balanced draw is not attempted).
        seed: Seed of the subset permutation.
    """
    images, labels, num_labels = dataset.images, dataset.labels, dataset.num_labels
    if classes is not None:
        classes = list(classes)
        mask = np.isin(labels, classes)
        images, labels = images[mask], labels[mask]
        relabel = {original: index for index, original in enumerate(classes)}
        labels = np.array([relabel[int(label)] for label in labels], dtype=np.int64)
        num_labels = len(classes)
    if count is not None and count < len(labels):
        order = np.sort(np.random.default_rng(seed).permutation(len(labels))[:count])
        images, labels = images[order], labels[order]
    if size is not None and tuple(images.shape[1:]) != (size[1], size[0]):
        images = np.stack([resize_bilinear(img, size[0], size[1]) for img in images]) if len(images) else \
            np.zeros((0, size[1], size[0]))
    logger.debug(f"Prepared dataset: {len(labels)} images, {num_labels} labels, shape {images.shape[1:]}")
    return Dataset(np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=np.int64), num_labels)

