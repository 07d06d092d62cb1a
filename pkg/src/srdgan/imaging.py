"""Deterministic image primitives shared by the whole pipeline.

Images are float64 H x W x C arrays in [0, 1] wrapped in :class:`Image`.
Every randomized helper takes an explicit seed and is a pure function of its
arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import DimensionError, FormatError, NotFound, StateError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

# full-range BT.601 luma
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    color_space: str = "RGB"
    provenance: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionError(f"image must be HxWxC, got shape {data.shape}")
        h, w, c = data.shape
        if h < 1 or w < 1 or c not in (1, 3):
            raise DimensionError(f"invalid image shape {data.shape}")
        if self.color_space not in ("RGB", "Y"):
            raise StateError(f"unknown color space {self.color_space!r}")
        if self.color_space == "RGB" and c != 3:
            raise DimensionError("RGB image needs 3 channels")
        if self.color_space == "Y" and c != 1:
            raise DimensionError("Y image needs 1 channel")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def replace(self, data, provenance: str | None = None) -> "Image":
        return Image(data, self.color_space, self.provenance if provenance is None else provenance)


@dataclass(frozen=True)
class NoiseSpec:
    mean: float = 0.0
    std_dev: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.std_dev >= 0:
            raise ValueError("std_dev must be >= 0")


def as_image(x, color_space: str | None = None, provenance: str = "") -> Image:
    if isinstance(x, Image):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if color_space is None:
        color_space = "RGB" if arr.ndim == 3 and arr.shape[2] == 3 else "Y"
    return Image(arr, color_space, provenance)


def load_image(path) -> Image:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such image: {path}")
    with open(path, "rb") as fh:
        if fh.read(8) != PNG_MAGIC:
            raise FormatError(f"not a PNG file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"could not decode {path}")
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    else:
        raise FormatError(f"unsupported bit depth {raw.dtype} in {path}")
    if data.ndim == 2:
        return Image(data[:, :, None], "Y", str(path))
    if data.shape[2] == 4:
        data = data[:, :, :3]
    # cv2 stores BGR
    return Image(np.ascontiguousarray(data[:, :, ::-1]), "RGB", str(path))


def save_image(img: Image, path, bit_depth: int = 8) -> Path:
    if bit_depth == 8:
        raw = np.round(img.data * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        raw = np.round(img.data * 65535.0).astype(np.uint16)
    else:
        raise FormatError(f"unsupported bit depth {bit_depth}")
    if img.channels == 3:
        raw = np.ascontiguousarray(raw[:, :, ::-1])
    else:
        raw = raw[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), raw):
        raise FormatError(f"could not write {path}")
    return path


def _check_factor(factor: int):
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")


def _check_divisible(img: Image, factor: int):
    if img.height % factor or img.width % factor:
        raise DimensionError(f"image {img.height}x{img.width} not divisible by {factor}")


def nearest_downsample(img: Image, factor: int) -> Image:
    """Keep the top-left pixel of every ``factor`` x ``factor`` block."""
    _check_factor(factor)
    _check_divisible(img, factor)
    return img.replace(img.data[::factor, ::factor])


def nearest_upsample(img: Image, factor: int) -> Image:
    _check_factor(factor)
    return img.replace(np.repeat(np.repeat(img.data, factor, axis=0), factor, axis=1))


def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense (out_len, in_len) interpolation matrix.

    Pixel-center alignment and symmetric border extension, with the kernel
    stretched by the downscale ratio when shrinking.
    """
    scale = out_len / in_len
    width = 4.0
    if scale < 1 and antialias:
        kernel = lambda d: scale * cubic_kernel(scale * d)  # noqa: E731
        width /= scale
    else:
        kernel = cubic_kernel
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len)[::-1]])
    cols = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    out = np.zeros((out_len, in_len))
    rows = np.broadcast_to(np.arange(out_len)[:, None], cols.shape)
    np.add.at(out, (rows, cols), w)
    return out


def bicubic_resize(img: Image, out_h: int, out_w: int, antialias: bool = True) -> Image:
    wr = bicubic_weights(img.height, out_h, antialias)
    wc = bicubic_weights(img.width, out_w, antialias)
    out = np.einsum("ih,hwc,jw->ijc", wr, img.data, wc)
    return img.replace(np.clip(out, 0.0, 1.0))


def bicubic_downsample(img: Image, factor: int) -> Image:
    _check_factor(factor)
    _check_divisible(img, factor)
    if factor == 1:
        return img
    return bicubic_resize(img, img.height // factor, img.width // factor)


def bicubic_upsample(img: Image, factor: int) -> Image:
    _check_factor(factor)
    if factor == 1:
        return img
    return bicubic_resize(img, img.height * factor, img.width * factor)


def add_gaussian_noise(img: Image, spec: NoiseSpec) -> Image:
    if spec.std_dev == 0 and spec.mean == 0:
        return img
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(spec.mean, spec.std_dev, size=img.shape)
    return img.replace(np.clip(img.data + noise, 0.0, 1.0))


def rgb_to_y(img: Image, luma: str = "full") -> Image:
    """BT.601 luma. ``luma="studio"`` maps to the 16..235 range of 8-bit video
    conventions, which is what most published SR tables were scored on."""
    if img.color_space != "RGB":
        raise StateError(f"expected RGB image, got {img.color_space}")
    if luma == "full":
        y = img.data @ Y_WEIGHTS
    elif luma == "studio":
        y = (16.0 + img.data @ (Y_WEIGHTS * 219.0)) / 255.0
    else:
        raise ValueError(f"unknown luma range {luma!r}")
    return Image(np.clip(y, 0.0, 1.0)[:, :, None], "Y", img.provenance)


def random_crop(img: Image, size: int, seed: int) -> tuple[Image, tuple[int, int]]:
    if size < 1 or size > min(img.height, img.width):
        raise DimensionError(f"crop {size} does not fit in {img.height}x{img.width}")
    rng = np.random.default_rng(seed)
    r = int(rng.integers(0, img.height - size + 1))
    c = int(rng.integers(0, img.width - size + 1))
    return img.replace(img.data[r:r + size, c:c + size]), (r, c)
