"""RGB -> grayscale -> Sobel edge chain, resizing, and model-range conversion.

Pixel math lives here in numpy; Pillow is used only as the PNG/JPEG codec.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .ndtensor import Tensor

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageDecodeError(ValueError):
    def __init__(self, source: str, reason: str):
        super().__init__(f"cannot decode image {source!r}: {reason}")
        self.source = source


@dataclass(frozen=True)
class ImageBuffer:
    """Decoded 8-bit image, ``pixels`` shaped (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"ImageBuffer needs (H, W, 1|3) pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"ImageBuffer pixels must be uint8, got {px.dtype}")

    @classmethod
    def from_array(cls, arr) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(np.ascontiguousarray(arr, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """(H, W) view of a single-channel image."""
        if self.channels != 1:
            raise ValueError("plane is only defined for single-channel images")
        return self.pixels[:, :, 0]


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def decode_image(data: Union[bytes, str], source: str = "<bytes>") -> ImageBuffer:
    """Decode PNG/JPEG bytes (or a path) into an 8-bit RGB or grayscale buffer."""
    if isinstance(data, str):
        source = data
        try:
            with open(data, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise ImageDecodeError(source, str(exc)) from exc
    try:
        with Image.open(io.BytesIO(data)) as img:
            if img.format not in ("PNG", "JPEG"):
                raise ImageDecodeError(source, f"unsupported format {img.format}")
            img.load()
            if img.mode in ("L", "1", "I;16", "I", "F"):
                arr = np.asarray(img.convert("L"))
            else:
                arr = np.asarray(img.convert("RGB"))
    except ImageDecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(source, str(exc) or type(exc).__name__) from exc
    return ImageBuffer.from_array(arr)


def encode_png(img: ImageBuffer) -> bytes:
    mode = "L" if img.channels == 1 else "RGB"
    arr = img.plane if img.channels == 1 else img.pixels
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr), mode=mode).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_png(img: ImageBuffer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(img))


def to_grayscale(rgb: ImageBuffer) -> ImageBuffer:
    """ITU-R 601 luma, rounded half-up and clamped to [0, 255]."""
    if rgb.channels == 1:
        return rgb
    px = rgb.pixels.astype(np.float64)
    luma = LUMA_WEIGHTS[0] * px[..., 0] + LUMA_WEIGHTS[1] * px[..., 1] + LUMA_WEIGHTS[2] * px[..., 2]
    return ImageBuffer.from_array(np.clip(_round_half_up(luma), 0, 255).astype(np.uint8))


def sobel_edges(gray: ImageBuffer) -> ImageBuffer:
    """Gradient magnitude of the 3x3 Sobel pair with replicate padding."""
    if gray.channels != 1:
        raise ValueError("sobel_edges needs a single-channel image")
    if gray.width < 3 or gray.height < 3:
        raise ValueError(f"sobel_edges needs at least 3x3 pixels, got {gray.width}x{gray.height}")
    src = np.pad(gray.plane.astype(np.int64), 1, mode="edge")
    h, w = gray.height, gray.width
    gx = np.zeros((h, w), dtype=np.int64)
    gy = np.zeros((h, w), dtype=np.int64)
    for u in range(3):
        for v in range(3):
            patch = src[u:u + h, v:v + w]
            gx += SOBEL_X[u, v] * patch
            gy += SOBEL_Y[u, v] * patch
    mag = np.sqrt((gx * gx + gy * gy).astype(np.float64))
    return ImageBuffer.from_array(np.clip(_round_half_up(mag), 0, 255).astype(np.uint8))


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    """Bilinear resampling with half-pixel-centre alignment (no antialiasing)."""
    if out_w < 1 or out_h < 1:
        raise ValueError("resize target must be at least 1x1")
    if (out_w, out_h) == (img.width, img.height):
        return img
    src = img.pixels.astype(np.float64)

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(img.height, out_h)
    x0, x1, fx = axis_weights(img.width, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return ImageBuffer(np.clip(_round_half_up(out), 0, 255).astype(np.uint8))


def preprocess_rgb(rgb: ImageBuffer, side: int) -> tuple:
    """Grayscale and edge images at ``side`` x ``side``.

    Edges are taken on the full-resolution grayscale image and both results
    are scaled afterwards.
    """
    gray = to_grayscale(rgb)
    edge = sobel_edges(gray)
    return resize_bilinear(gray, side, side), resize_bilinear(edge, side, side)


def to_model_range(img: ImageBuffer) -> Tensor:
    """1 x C x H x W float32 tensor with pixel p mapped to p / 127.5 - 1."""
    arr = img.pixels.astype(np.float32).transpose(2, 0, 1)[None]
    return Tensor(arr / np.float32(127.5) - np.float32(1.0))


def array_to_model_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 (..., H, W) -> float32 in [-1, 1], same shape."""
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def model_range_to_pixels(values: np.ndarray) -> np.ndarray:
    values = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return _round_half_up((values + 1.0) * 127.5).astype(np.uint8)


def from_model_range(t: Union[Tensor, np.ndarray]) -> ImageBuffer:
    """Inverse of :func:`to_model_range` for a single image (1 x C x H x W or C x H x W)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("from_model_range converts one image at a time")
        arr = arr[0]
    return ImageBuffer.from_array(model_range_to_pixels(arr).transpose(1, 2, 0))
