"""
Block pipeline — image I/O, luminance, non-overlapping patch partition and the
fold/unfold pair that moves between patch-batch and whole-image layouts.
"""
import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from coast.errors import DimensionError, FormatError
from coast.fileutil import atomic_write_bytes

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PGM_MAGIC = b"P5"
PIL_MODES = {"L": "L", "1": "L", "LA": "L", "RGB": "RGB", "RGBA": "RGB", "P": "RGB"}
IMAGE_SUFFIXES = {".pgm", ".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"}


@dataclass
class Image:
    """H×W (grayscale) or H×W×3 (RGB) intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim not in (2, 3) or (pixels.ndim == 3 and pixels.shape[2] not in (1, 3)):
            raise DimensionError(f"image must be H×W or H×W×3, got shape {pixels.shape}")
        if pixels.ndim == 3 and pixels.shape[2] == 1:
            pixels = pixels[:, :, 0]
        if pixels.size == 0:
            raise DimensionError("empty image")
        self.pixels = np.clip(pixels, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


class GridGeometry(NamedTuple):
    """Where the patches of one image sit: side, grid shape, pre-padding size."""

    side: int
    rows: int
    cols: int
    height: int
    width: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


def geometry_for(height: int, width: int, side: int) -> GridGeometry:
    if height < 1 or width < 1:
        raise DimensionError(f"empty image {height}×{width}")
    if side < 1:
        raise DimensionError(f"patch side must be >= 1, got {side}")
    return GridGeometry(side, -(-height // side), -(-width // side), height, width)


@dataclass
class PatchGrid:
    """Vectorized side×side patches in raster order over a rows×cols grid."""

    side: int
    rows: int
    cols: int
    patches: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if self.patches.shape != (self.rows * self.cols, self.side * self.side):
            raise DimensionError(
                f"grid {self.rows}×{self.cols} of side {self.side} needs patches of shape "
                f"{(self.rows * self.cols, self.side * self.side)}, got {self.patches.shape}"
            )
        if self.rows * self.side < self.height or self.cols * self.side < self.width:
            raise DimensionError("grid does not cover the original image")

    @property
    def count(self) -> int:
        return self.rows * self.cols

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.side, self.rows, self.cols, self.height, self.width)


def to_luminance(img: Image) -> Image:
    """Full-range (JPEG-style) Y of an RGB image; grayscale passes through."""
    if img.channels == 1:
        return img
    r, g, b = img.pixels[:, :, 0], img.pixels[:, :, 1], img.pixels[:, :, 2]
    wr, wg, wb = LUMA_WEIGHTS
    return Image(wr * r + wg * g + wb * b)


# ─── Partition / fold / unfold ────────────────────────────────────────────────

def partition(img: Image, side: int) -> PatchGrid:
    if side < 1:
        raise DimensionError(f"patch side must be >= 1, got {side}")
    if img.channels != 1:
        raise DimensionError("partition needs a single-channel image; call to_luminance first")
    h, w = img.height, img.width
    pad_h, pad_w = (-h) % side, (-w) % side
    padded = np.pad(img.pixels, ((0, pad_h), (0, pad_w)), mode="reflect")
    rows, cols = padded.shape[0] // side, padded.shape[1] // side
    patches = padded.reshape(rows, side, cols, side).transpose(0, 2, 1, 3).reshape(rows * cols, side * side)
    return PatchGrid(side, rows, cols, np.ascontiguousarray(patches), h, w)


def fold(batch, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """
    N_B×C×s×s feature batch (or a PatchGrid) -> 1×C×(rows·s)×(cols·s) image,
    patch k landing at grid position (k // cols, k % cols).
    """
    if isinstance(batch, PatchGrid):
        rows, cols = batch.rows, batch.cols
        batch = batch.patches.reshape(batch.count, 1, batch.side, batch.side)
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[2] != batch.shape[3]:
        raise DimensionError(f"fold expects N_B×C×s×s, got {batch.shape}")
    if rows is None or cols is None:
        raise DimensionError("fold needs the grid geometry (rows, cols)")
    nb, c, s, _ = batch.shape
    if nb != rows * cols:
        raise DimensionError(f"batch of {nb} patches does not fill a {rows}×{cols} grid")
    return batch.reshape(rows, cols, c, s, s).transpose(2, 0, 3, 1, 4).reshape(1, c, rows * s, cols * s)


def unfold(image: np.ndarray, side: int) -> np.ndarray:
    """Inverse of fold: 1×C×(rows·s)×(cols·s) -> (rows·cols)×C×s×s."""
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[0] != 1:
        raise DimensionError(f"unfold expects 1×C×H×W, got {image.shape}")
    _, c, h, w = image.shape
    if h % side or w % side:
        raise DimensionError(f"image {h}×{w} is not a whole number of {side}×{side} patches")
    rows, cols = h // side, w // side
    return image.reshape(c, rows, side, cols, side).transpose(1, 3, 0, 2, 4).reshape(rows * cols, c, side, side)


def assemble(grid: PatchGrid) -> Image:
    """Fold a patch grid back into an image cropped to its original size."""
    whole = fold(grid)[0, 0]
    return Image(whole[: grid.height, : grid.width])


# ─── Image files ──────────────────────────────────────────────────────────────

def _parse_pgm(data: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    while len(tokens) < 4:
        match = token_re.match(data, pos)
        if not match:
            raise FormatError("truncated PGM header", offset=pos)
        tokens.append(match.group(1))
        pos = match.end()
    if tokens[0] != PGM_MAGIC:
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", offset=0)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field", offset=pos) from None
    if maxval != 255:
        raise FormatError(f"unsupported PGM bit depth (maxval {maxval}); only 8-bit is supported", offset=pos)
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM size {width}×{height}", offset=pos)
    pos += 1  # single whitespace byte before the raster
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"truncated PGM raster: expected {width * height} bytes", offset=len(data))
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def read_image(path: str | Path) -> Image:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read image {path}: {e}") from None
    if data[:2] == PGM_MAGIC:
        raw = _parse_pgm(data)
    else:
        try:
            with PILImage.open(io.BytesIO(data)) as im:
                target = PIL_MODES.get(im.mode)
                if target is None:
                    raise FormatError(f"unsupported image mode {im.mode!r} in {path}; only 8-bit images are read")
                raw = np.asarray(im.convert(target), dtype=np.uint8)
        except UnidentifiedImageError:
            raise FormatError(f"unrecognized image format: {path}", offset=0) from None
    return Image(raw.astype(np.float64) / 255.0)


def _quantize(img: Image) -> np.ndarray:
    return np.clip(np.round(img.pixels * 255.0), 0, 255).astype(np.uint8)


def write_image(img: Image, path: str | Path) -> None:
    """8-bit PGM (P5) for *.pgm, PNG otherwise."""
    path = Path(path)
    raw = _quantize(img)
    if path.suffix.lower() == ".pgm":
        if img.channels != 1:
            raise FormatError("PGM output needs a single-channel image")
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        atomic_write_bytes(path, header + raw.tobytes())
        return
    buf = io.BytesIO()
    PILImage.fromarray(raw).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
    logger.debug("wrote %s (%dx%d)", path, img.width, img.height)


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
