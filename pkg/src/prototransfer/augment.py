"""Random image transformation pipelines.

Images are numpy arrays [C,H,W], float32, values in [0,1]; every
transform preserves that range (clamping where needed). Transforms are
pure given an explicit numpy Generator, so identical streams reproduce
identical outputs regardless of execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel centers."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"resize target {out_h}x{out_w} is empty")
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[None, :, None]
    wx = (xs - x0).astype(np.float32)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p10 = img[:, y1][:, :, x0]
    p11 = img[:, y1][:, :, x1]
    top = p00 + wx * (p01 - p00)
    bot = p10 + wx * (p11 - p10)
    return (top + wy * (bot - top)).astype(np.float32)


def random_resized_crop(img, scale_range, ratio_range, out_size: int, rng) -> np.ndarray:
    """Sample an area fraction and aspect ratio, crop, resize bilinearly.

    Ten placement attempts, then a centered crop with the aspect ratio
    clamped into range.
    """
    c, h, w = img.shape
    if out_size < 1:
        raise GeometryError(f"crop output size {out_size} is empty")
    lo, hi = scale_range
    if not (0 < lo <= hi <= 1.0):
        raise ContractError(f"random_resized_crop: scale range {scale_range} not within (0,1]")
    area = h * w
    for _ in range(10):
        frac = rng.uniform(lo, hi)
        ratio = rng.uniform(*ratio_range)
        cw = int(round(math.sqrt(area * frac * ratio)))
        ch = int(round(math.sqrt(area * frac / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top : top + ch, left : left + cw]
            return bilinear_resize(crop, out_size, out_size)
    # fallback: centered, aspect clamped into range
    in_ratio = w / h
    if in_ratio < min(ratio_range):
        cw, ch = w, min(h, int(round(w / min(ratio_range))))
    elif in_ratio > max(ratio_range):
        cw, ch = min(w, int(round(h * max(ratio_range)))), h
    else:
        cw, ch = w, h
    top = (h - ch) // 2
    left = (w - cw) // 2
    return bilinear_resize(img[:, top : top + ch, left : left + cw], out_size, out_size)


def flip_h(img, p: float, rng) -> np.ndarray:
    if rng.random() < p:
        return img[:, :, ::-1].copy()
    return img


def flip_v(img, p: float, rng) -> np.ndarray:
    if rng.random() < p:
        return img[:, ::-1, :].copy()
    return img


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    hue = np.zeros_like(maxc)
    nz = delta > 0
    d = np.maximum(delta, 1e-12)
    rc = (maxc - r) / d
    gc = (maxc - g) / d
    bc = (maxc - b) / d
    hue = np.where(nz & (maxc == r), bc - gc, hue)
    hue = np.where(nz & (maxc == g) & (maxc != r), 2.0 + rc - bc, hue)
    hue = np.where(nz & (maxc == b) & (maxc != r) & (maxc != g), 4.0 + gc - rc, hue)
    hue = (hue / 6.0) % 1.0
    return np.stack([hue, s, v]).astype(np.float32)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(np.float32)


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img[0]
    return np.tensordot(LUMA, img, axes=1)


def color_jitter(img, brightness, contrast, saturation, hue, p: float, rng) -> np.ndarray:
    """Brightness/contrast/saturation/hue jitter in random order.

    Factors are uniform in [max(0, 1-s), 1+s]; the hue shift is uniform
    in [-hue, +hue]. Grayscale inputs get brightness/contrast only.
    """
    if rng.random() >= p:
        return img
    gray = img.shape[0] == 1
    ops = ["brightness", "contrast"] if gray else ["brightness", "contrast", "saturation", "hue"]
    order = rng.permutation(len(ops))
    out = img
    for k in order:
        op = ops[k]
        if op == "brightness":
            f = rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)
            out = _clamp01(out * np.float32(f))
        elif op == "contrast":
            f = rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)
            anchor = np.float32(_luma(out).mean())
            out = _clamp01(anchor + np.float32(f) * (out - anchor))
        elif op == "saturation":
            f = rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)
            g = _luma(out)[None]
            out = _clamp01(g + np.float32(f) * (out - g))
        else:
            shift = rng.uniform(-hue, hue)
            hsv = rgb_to_hsv(out)
            hsv[0] = (hsv[0] + np.float32(shift)) % 1.0
            out = _clamp01(hsv_to_rgb(hsv))
    return out.astype(np.float32)


def random_grayscale(img, p: float, rng) -> np.ndarray:
    if rng.random() < p and img.shape[0] == 3:
        g = _luma(img)
        return np.repeat(g[None], 3, axis=0).astype(np.float32)
    return img


def gaussian_blur(img, sigma_range, rng) -> np.ndarray:
    """Separable Gaussian, radius ceil(3*sigma), reflect padding."""
    sigma = float(rng.uniform(*sigma_range))
    radius = math.ceil(3.0 * sigma)
    if sigma <= 0 or radius < 1:
        return img
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    kernel = (kernel / kernel.sum()).astype(np.float32)
    c, h, w = img.shape
    pad = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    rowsum = np.zeros_like(img)
    for k in range(2 * radius + 1):
        rowsum += kernel[k] * pad[:, k : k + h, :]
    pad = np.pad(rowsum, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = np.zeros_like(img)
    for k in range(2 * radius + 1):
        out += kernel[k] * pad[:, :, k : k + w]
    return _clamp01(out)


def pixel_dropout(img, p_apply: float, drop_rate: float, rng) -> np.ndarray:
    """With probability p_apply, zero each pixel independently."""
    if rng.random() >= p_apply:
        return img
    keep = rng.random(img.shape[1:]) >= drop_rate
    return (img * keep[None]).astype(np.float32)


def random_erasing(img, scale_range, ratio_range, rng) -> np.ndarray:
    """Zero one rectangle whose area fraction lies in scale_range.

    Candidates whose rounded area falls outside the requested fraction
    range are rejected; after 10 failed attempts the image is returned
    unchanged.
    """
    c, h, w = img.shape
    area = h * w
    for _ in range(10):
        frac = rng.uniform(*scale_range)
        ratio = rng.uniform(*ratio_range)
        ew = int(round(math.sqrt(area * frac * ratio)))
        eh = int(round(math.sqrt(area * frac / ratio)))
        if ew < 1 or eh < 1 or ew > w or eh > h:
            continue
        if not (scale_range[0] <= ew * eh / area <= scale_range[1]):
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out = img.copy()
        out[:, top : top + eh, left : left + ew] = 0.0
        return out
    return img


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Resize:
    out_size: int

    def __call__(self, img, rng):
        return bilinear_resize(img, self.out_size, self.out_size)

    def params(self):
        return {"out_size": self.out_size}


@dataclass(frozen=True)
class RandomResizedCrop:
    scale: tuple[float, float]
    ratio: tuple[float, float]
    out_size: int

    def __call__(self, img, rng):
        return random_resized_crop(img, self.scale, self.ratio, self.out_size, rng)

    def params(self):
        return {"scale": list(self.scale), "ratio": list(self.ratio), "out_size": self.out_size}


@dataclass(frozen=True)
class RandomHorizontalFlip:
    p: float = 0.5

    def __call__(self, img, rng):
        return flip_h(img, self.p, rng)

    def params(self):
        return {"p": self.p}


@dataclass(frozen=True)
class RandomVerticalFlip:
    p: float = 0.5

    def __call__(self, img, rng):
        return flip_v(img, self.p, rng)

    def params(self):
        return {"p": self.p}


@dataclass(frozen=True)
class ColorJitter:
    brightness: float
    contrast: float
    saturation: float
    hue: float
    p: float = 1.0

    def __call__(self, img, rng):
        return color_jitter(img, self.brightness, self.contrast, self.saturation, self.hue, self.p, rng)

    def params(self):
        return {
            "brightness": self.brightness,
            "contrast": self.contrast,
            "saturation": self.saturation,
            "hue": self.hue,
            "p": self.p,
        }


@dataclass(frozen=True)
class RandomGrayscale:
    p: float = 0.2

    def __call__(self, img, rng):
        return random_grayscale(img, self.p, rng)

    def params(self):
        return {"p": self.p}


@dataclass(frozen=True)
class GaussianBlur:
    sigma: tuple[float, float]

    def __call__(self, img, rng):
        return gaussian_blur(img, self.sigma, rng)

    def params(self):
        return {"sigma": list(self.sigma)}


@dataclass(frozen=True)
class PixelDropout:
    p: float
    drop_rate: float = 0.5

    def __call__(self, img, rng):
        return pixel_dropout(img, self.p, self.drop_rate, rng)

    def params(self):
        return {"p": self.p, "drop_rate": self.drop_rate}


@dataclass(frozen=True)
class RandomErasing:
    scale: tuple[float, float]
    ratio: tuple[float, float]

    def __call__(self, img, rng):
        return random_erasing(img, self.scale, self.ratio, rng)

    def params(self):
        return {"scale": list(self.scale), "ratio": list(self.ratio)}


class AugmentationPipeline:
    """Ordered transforms with a fixed channel count and output size."""

    def __init__(self, transforms, channels: int, out_size: int | None, name: str = "custom"):
        self.transforms = tuple(transforms)
        self.channels = channels
        self.out_size = out_size
        self.name = name

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if img.ndim != 3 or img.shape[0] != self.channels:
            raise ContractError(
                f"pipeline {self.name!r} expects {self.channels}-channel [C,H,W] images, "
                f"got shape {tuple(img.shape)}"
            )
        out = img
        for t in self.transforms:
            out = t(out, rng)
        if self.out_size is not None and out.shape[1:] != (self.out_size, self.out_size):
            out = bilinear_resize(out, self.out_size, self.out_size)
        return out

    def spec(self) -> list[dict]:
        return [{"transform": _TRANSFORM_NAMES[type(t)], "params": t.params()} for t in self.transforms]


def apply_pipeline(pipeline: AugmentationPipeline, img, rng) -> np.ndarray:
    return pipeline.apply(img, rng)


def omniglot_pipeline(out_size: int = 28) -> AugmentationPipeline:
    return AugmentationPipeline(
        [
            Resize(out_size),
            RandomResizedCrop(scale=(0.6, 1.0), ratio=(3 / 4, 4 / 3), out_size=out_size),
            RandomHorizontalFlip(0.5),
            RandomVerticalFlip(0.5),
            PixelDropout(p=0.3, drop_rate=0.5),
            RandomErasing(scale=(0.02, 0.33), ratio=(0.3, 3.3)),
        ],
        channels=1,
        out_size=out_size,
        name="omniglot",
    )


def mini_pipeline(out_size: int = 84) -> AugmentationPipeline:
    return AugmentationPipeline(
        [
            RandomResizedCrop(scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3), out_size=out_size),
            RandomHorizontalFlip(0.5),
            RandomVerticalFlip(0.5),
            ColorJitter(brightness=0.4, contrast=0.4, saturation=0.4, hue=0.2, p=0.8),
            RandomGrayscale(0.2),
        ],
        channels=3,
        out_size=out_size,
        name="mini",
    )


def cdfsl_pipeline(out_size: int = 224) -> AugmentationPipeline:
    return AugmentationPipeline(
        [
            RandomResizedCrop(scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3), out_size=out_size),
            RandomHorizontalFlip(0.5),
            ColorJitter(brightness=0.8, contrast=0.8, saturation=0.8, hue=0.2, p=0.8),
            RandomGrayscale(0.2),
            GaussianBlur(sigma=(0.1, 0.2)),
        ],
        channels=3,
        out_size=out_size,
        name="cdfsl",
    )


def synthetic_pipeline(out_size: int = 16) -> AugmentationPipeline:
    """Mild grayscale menu for the synthetic latent-class generator."""
    return AugmentationPipeline(
        [
            RandomResizedCrop(scale=(0.6, 1.0), ratio=(3 / 4, 4 / 3), out_size=out_size),
            PixelDropout(p=0.3, drop_rate=0.5),
            RandomErasing(scale=(0.02, 0.2), ratio=(0.3, 3.3)),
        ],
        channels=1,
        out_size=out_size,
        name="synthetic",
    )


def identity_pipeline(channels: int, out_size: int | None = None) -> AugmentationPipeline:
    return AugmentationPipeline([], channels=channels, out_size=out_size, name="identity")


PRESETS = {
    "omniglot": omniglot_pipeline,
    "mini": mini_pipeline,
    "cdfsl": cdfsl_pipeline,
    "synthetic": synthetic_pipeline,
}

_TRANSFORM_TYPES = {
    "resize": Resize,
    "random_resized_crop": RandomResizedCrop,
    "flip_h": RandomHorizontalFlip,
    "flip_v": RandomVerticalFlip,
    "color_jitter": ColorJitter,
    "random_grayscale": RandomGrayscale,
    "gaussian_blur": GaussianBlur,
    "pixel_dropout": PixelDropout,
    "random_erasing": RandomErasing,
}
_TRANSFORM_NAMES = {v: k for k, v in _TRANSFORM_TYPES.items()}


def pipeline_from_preset(name: str, channels: int, out_size: int | None = None) -> AugmentationPipeline:
    if name in ("identity", "none"):
        return identity_pipeline(channels, out_size)
    if name not in PRESETS:
        raise ContractError(f"unknown augmentation preset {name!r}; choose from {sorted(PRESETS)}")
    pipe = PRESETS[name]() if out_size is None else PRESETS[name](out_size)
    if pipe.channels != channels:
        raise ContractError(
            f"preset {name!r} is defined for {pipe.channels}-channel images, dataset has {channels}"
        )
    return pipe


def pipeline_from_spec(entries: list[dict], channels: int, out_size: int | None) -> AugmentationPipeline:
    """Build a custom pipeline from ordered {transform, params} entries."""
    transforms = []
    for entry in entries:
        kind = entry.get("transform")
        if kind not in _TRANSFORM_TYPES:
            raise ContractError(f"unknown transform {kind!r}; choose from {sorted(_TRANSFORM_TYPES)}")
        params = dict(entry.get("params", {}))
        for key in ("scale", "ratio", "sigma"):
            if key in params:
                params[key] = tuple(params[key])
        try:
            transforms.append(_TRANSFORM_TYPES[kind](**params))
        except TypeError as e:
            raise ContractError(f"bad params for transform {kind!r}: {e}") from e
    return AugmentationPipeline(transforms, channels=channels, out_size=out_size)
