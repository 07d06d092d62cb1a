"""Y-channel PSNR/SSIM, directory benchmarks and tiled SR inference."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .errors import DimensionError, NotFound, SpecError, ValidationError
from .imaging import (Image, as_image, bicubic_downsample, bicubic_upsample, load_image, rgb_to_y,
                      save_image)
from .networks import (L2H_GEN, NetworkState, forward_l2h, image_to_tensor, load_checkpoint,
                       module_dtype, receptive_radius, tensor_to_image)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _prepare(a, b, y_channel: bool, crop_border: int, luma: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if y_channel and a.color_space == "RGB":
        a, b = rgb_to_y(a, luma), rgb_to_y(b, luma)
    x, y = a.data, b.data
    if crop_border:
        x = x[crop_border:-crop_border, crop_border:-crop_border]
        y = y[crop_border:-crop_border, crop_border:-crop_border]
        if x.size == 0:
            raise DimensionError(f"crop_border {crop_border} removes the whole image")
    return x, y


def psnr(a, b, y_channel: bool = True, crop_border: int = 0, luma: str = "full") -> float:
    """PSNR in dB for [0, 1] data, capped at 100 dB (identical inputs)."""
    x, y = _prepare(a, b, y_channel, crop_border, luma)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel arrays over every fully-inside window."""
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(f"image {x.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, y_channel: bool = True, crop_border: int = 0, luma: str = "full") -> float:
    x, y = _prepare(a, b, y_channel, crop_border, luma)
    if np.array_equal(x, y):
        return 1.0
    return float(np.mean([ssim_map(x[:, :, c], y[:, :, c]).mean() for c in range(x.shape[2])]))


@dataclass
class MetricResult:
    psnr_db: float
    ssim: float
    per_image: list[dict] = field(default_factory=list)

    @classmethod
    def aggregate(cls, per_image: list[dict]) -> "MetricResult":
        if not per_image:
            raise ValidationError("no images to aggregate")
        return cls(float(np.mean([r["psnr"] for r in per_image])),
                   float(np.mean([r["ssim"] for r in per_image])), per_image)

    def row(self) -> str:
        """The compact ``PSNR/SSIM`` cell used in benchmark tables."""
        return f"{self.psnr_db:.2f}/{self.ssim:.4f}"

    def table(self) -> str:
        width = max([len(r["name"]) for r in self.per_image] + [len("mean")])
        lines = [f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>7}"]
        for r in self.per_image:
            lines.append(f"{r['name']:<{width}}  {r['psnr']:8.2f}  {r['ssim']:7.4f}")
        lines.append(f"{'mean':<{width}}  {self.psnr_db:8.2f}  {self.ssim:7.4f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def _png_names(d: Path) -> set[str]:
    if not d.is_dir():
        raise NotFound(f"no such directory: {d}")
    return {p.name for p in d.glob("*.png")}


def evaluate_dir(sr_dir, gt_dir, crop_border: int = 4, y_channel: bool = True,
                 luma: str = "full") -> MetricResult:
    sr_dir, gt_dir = Path(sr_dir), Path(gt_dir)
    sr_names, gt_names = _png_names(sr_dir), _png_names(gt_dir)
    unmatched = sorted(sr_names ^ gt_names)
    if unmatched:
        raise ValidationError(f"unmatched files: {', '.join(unmatched)}", unmatched)
    per_image = []
    for name in sorted(gt_names):
        sr, gt = load_image(sr_dir / name), load_image(gt_dir / name)
        per_image.append({"name": name,
                          "psnr": psnr(sr, gt, y_channel, crop_border, luma),
                          "ssim": ssim(sr, gt, y_channel, crop_border, luma)})
    return MetricResult.aggregate(per_image)


def mod_crop(img: Image, scale: int) -> Image:
    h, w = img.height - img.height % scale, img.width - img.width % scale
    return img.replace(img.data[:h, :w])


def _quantize8(img: Image) -> Image:
    return img.replace(np.round(img.data * 255.0) / 255.0)


def bicubic_benchmark(gt_dir, scale: int = 4, crop_border: int | None = None, luma: str = "full",
                      quantize: bool = False) -> MetricResult:
    """Bicubic down-then-up baseline over a directory of ground-truth PNGs.

    ``quantize`` rounds every intermediate image (and the luma plane) to the
    8-bit grid, as integer-image toolchains do; together with
    ``luma="studio"`` this is the protocol behind the usual published numbers.
    """
    gt_dir = Path(gt_dir)
    crop_border = scale if crop_border is None else crop_border
    per_image = []
    for path in sorted(gt_dir.glob("*.png")):
        gt = load_image(path)
        if gt.color_space != "RGB":
            gt = Image(np.repeat(gt.data, 3, axis=2), "RGB", gt.provenance)
        gt = mod_crop(gt, scale)
        lr = bicubic_downsample(gt, scale)
        if quantize:
            lr = _quantize8(lr)
        sr = bicubic_upsample(lr, scale)
        if quantize:
            sr = _quantize8(sr)
            sr, gt = _quantize8(rgb_to_y(sr, luma)), _quantize8(rgb_to_y(gt, luma))
        per_image.append({"name": path.name, "psnr": psnr(sr, gt, True, crop_border, luma),
                          "ssim": ssim(sr, gt, True, crop_border, luma)})
    return MetricResult.aggregate(per_image)


# ---------------------------------------------------------------- inference


def _tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    if tile >= length:
        return [0]
    step = max(tile - overlap, 1)
    starts = list(range(0, length - tile + 1, step))
    if starts[-1] + tile < length:
        starts.append(length - tile)
    return starts


def _ramp(length: int, ramp: int, at_start: bool, at_end: bool) -> torch.Tensor:
    w = torch.ones(length, dtype=torch.float64)
    ramp = min(ramp, length)
    if ramp > 0:
        r = (torch.arange(ramp, dtype=torch.float64) + 0.5) / ramp
        if at_start:
            w[:ramp] = torch.minimum(w[:ramp], r)
        if at_end:
            w[length - ramp:] = torch.minimum(w[length - ramp:], r.flip(0))
    return w


@torch.no_grad()
def tiled_forward(state: NetworkState, x: torch.Tensor, tile_size: int, tile_pad: int | None = None,
                  overlap: int | None = None) -> torch.Tensor:
    """Run the SR generator tile by tile and feather the tiles together.

    Each tile is fed ``tile_pad`` pixels of extra context per side; with the
    default pad (the network's receptive radius) every tile reproduces the
    untiled output, so the linear blend over the ``overlap`` band is seamless.
    """
    s = state.spec.scale_factor
    pad = receptive_radius(state.spec) if tile_pad is None else tile_pad
    overlap = max(tile_size // 8, 1) if overlap is None else overlap
    _, c, h, w = x.shape
    out = torch.zeros(1, state.spec.out_channels, h * s, w * s, dtype=torch.float64)
    weight = torch.zeros(1, 1, h * s, w * s, dtype=torch.float64)
    for y0 in _tile_starts(h, tile_size, overlap):
        for x0 in _tile_starts(w, tile_size, overlap):
            y1, x1 = min(y0 + tile_size, h), min(x0 + tile_size, w)
            cy0, cx0 = max(y0 - pad, 0), max(x0 - pad, 0)
            cy1, cx1 = min(y1 + pad, h), min(x1 + pad, w)
            o = state.module(x[:, :, cy0:cy1, cx0:cx1]).double()
            o = o[:, :, (y0 - cy0) * s:(y1 - cy0) * s, (x0 - cx0) * s:(x1 - cx0) * s]
            wy = _ramp((y1 - y0) * s, overlap * s, y0 > 0, y1 < h)
            wx = _ramp((x1 - x0) * s, overlap * s, x0 > 0, x1 < w)
            m = (wy[:, None] * wx[None, :])[None, None]
            out[:, :, y0 * s:y1 * s, x0 * s:x1 * s] += o * m
            weight[:, :, y0 * s:y1 * s, x0 * s:x1 * s] += m
    return out / weight


def _l2h_state(checkpoint) -> NetworkState:
    if isinstance(checkpoint, NetworkState):
        if checkpoint.spec.kind != L2H_GEN:
            raise SpecError(f"expected an {L2H_GEN} network, got {checkpoint.spec.kind}")
        return checkpoint
    return load_checkpoint(checkpoint, kind=L2H_GEN)


def _infer_one(state: NetworkState, img: Image, tile_size: int | None, tile_pad: int | None) -> Image:
    if img.color_space != "RGB":
        img = Image(np.repeat(img.data, 3, axis=2), "RGB", img.provenance)
    if not tile_size:
        with torch.no_grad():
            return forward_l2h(state, img)
    x = image_to_tensor(img, module_dtype(state.module))
    return tensor_to_image(tiled_forward(state, x, tile_size, tile_pad), provenance="l2h")


def sr_infer(checkpoint, source, tile_size: int | None = None, tile_pad: int | None = None,
             out_dir=None):
    """Super-resolve an Image, a PNG path or a directory of PNGs.

    Outputs are clamped to [0, 1]; with ``out_dir`` they are also written as
    8-bit PNGs under the input file names. A directory returns a list of
    (name, Image) pairs.
    """
    state = _l2h_state(checkpoint)
    if isinstance(source, Image):
        sr = _infer_one(state, source, tile_size, tile_pad)
        if out_dir is not None:
            save_image(sr, Path(out_dir) / "sr.png")
        return sr
    source = Path(source)
    if source.is_dir():
        results = []
        for path in sorted(source.glob("*.png")):
            sr = _infer_one(state, load_image(path), tile_size, tile_pad)
            if out_dir is not None:
                save_image(sr, Path(out_dir) / path.name)
            results.append((path.name, sr))
        return results
    sr = _infer_one(state, load_image(source), tile_size, tile_pad)
    if out_dir is not None:
        save_image(sr, Path(out_dir) / source.name)
    return sr
