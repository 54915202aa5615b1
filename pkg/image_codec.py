#!/usr/bin/env python3
"""
Image Codec
===========

RasterImage container plus binary PPM (P6, maxval 255) read/write.
Other formats are decoded through Pillow when it is installed.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from pipeline_errors import ImageIOError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PPM_EXTENSIONS = {'.ppm', '.pnm'}


@dataclass(frozen=True, eq=False)
class RasterImage:
    """8-bit RGB image; ``pixels`` has shape (height, width, 3), row-major."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel array shape {self.pixels.shape} does not match "
                             f"{self.width}x{self.height}x3")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"pixel dtype must be uint8, got {self.pixels.dtype}")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> 'RasterImage':
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and \
            np.array_equal(self.pixels, other.pixels)

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()


def _read_token(data: bytes, pos: int):
    """Return the next whitespace-delimited header token, skipping # comments."""
    length = len(data)
    while pos < length:
        ch = data[pos:pos + 1]
        if ch == b'#':
            while pos < length and data[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < length and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b'#':
        pos += 1
    return data[start:pos], pos


def decode_ppm(data: bytes, source: str = '<bytes>') -> RasterImage:
    """Decode a binary P6 image with maxval 255."""
    magic, pos = _read_token(data, 0)
    if magic != b'P6':
        raise ImageIOError(f"not a binary PPM (magic {magic!r})", source)
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        if not token.isdigit():
            raise ImageIOError(f"malformed PPM header token {token!r}", source)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageIOError(f"unsupported maxval {maxval}", source)
    # Exactly one whitespace byte separates the header from the raster.
    pos += 1
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise ImageIOError(f"truncated raster: {len(raster)} of {expected} bytes", source)
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()
    return RasterImage(width=width, height=height, pixels=pixels)


def encode_ppm(image: RasterImage) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode('ascii')
    return header + image.to_bytes()


def read_ppm(path: PathLike) -> RasterImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageIOError(f"cannot read image: {e}", str(path))
    return decode_ppm(data, str(path))


def write_ppm(path: PathLike, image: RasterImage) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_ppm(image))
    except OSError as e:
        raise ImageIOError(f"cannot write image: {e}", str(path))
    return path


def load_image(path: PathLike) -> RasterImage:
    """Load PPM natively, anything else through Pillow."""
    path = Path(path)
    if path.suffix.lower() in PPM_EXTENSIONS:
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ImageIOError("Pillow is required for non-PPM images", str(path))
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ImageIOError(f"cannot decode image: {e}", str(path))
    return RasterImage.from_array(pixels)


def resize_nearest(image: RasterImage, width: int, height: int) -> RasterImage:
    """Nearest-neighbour resampling (pixel centres mapped back to the source grid)."""
    if (image.width, image.height) == (width, height):
        return image
    ys = np.minimum(((np.arange(height) + 0.5) * image.height / height).astype(np.int64), image.height - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * image.width / width).astype(np.int64), image.width - 1)
    return RasterImage.from_array(image.pixels[ys][:, xs])


def to_network_input(image: RasterImage) -> np.ndarray:
    """(3, H, W) float64 array scaled to [-0.5, 0.5]."""
    return image.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0 - 0.5
