"""Pluggable single-image Gaussian denoisers and the 3-D median baseline.

Every denoiser is pure, deterministic, preserves constants, and uses
reflected boundaries. Coefficient images handed over by the subspace
pipeline go through :func:`denoise_scaled`, which maps them to the [0, 255]
range the built-in parameter defaults are tuned for and inverts the map
afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .stack import ImageStack

_SQRT2 = np.sqrt(2.0)

KINDS = ("identity", "gaussian-blur", "median2d", "wavelet-soft", "nlmeans")

_CLI_ALIASES = {
    "identity": "identity",
    "blur": "gaussian-blur",
    "gaussian-blur": "gaussian-blur",
    "median2d": "median2d",
    "wavelet": "wavelet-soft",
    "wavelet-soft": "wavelet-soft",
    "nlmeans": "nlmeans",
}


@dataclass(frozen=True)
class DenoiserSpec:
    """Which denoiser to run and its parameters.

    Only the fields relevant to ``kind`` are used: radius for gaussian-blur,
    window for median2d, levels for wavelet-soft, patch/search/h_factor for
    nlmeans.
    """

    kind: str = "nlmeans"
    radius: int = 3
    window: int = 3
    levels: int = 3
    patch: int = 7
    search: int = 21
    h_factor: float = 0.55

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        for name in ("radius", "window", "patch", "search"):
            val = getattr(self, name)
            if val < 1 or val % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {val}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.h_factor > 0:
            raise ValueError("h_factor must be > 0")

    def cli_string(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "gaussian-blur":
            return f"blur:{self.radius}"
        if self.kind == "median2d":
            return f"median2d:{self.window}"
        if self.kind == "wavelet-soft":
            return f"wavelet:{self.levels}"
        return f"nlmeans:{self.patch},{self.search},{self.h_factor:g}"


def default_denoiser() -> DenoiserSpec:
    return DenoiserSpec(kind="nlmeans", patch=7, search=21, h_factor=0.55)


def parse_denoiser(text: str) -> DenoiserSpec:
    """Parse the compact CLI form, e.g. ``nlmeans:7,21,0.55`` or ``wavelet:3``."""
    name, _, rest = text.strip().partition(":")
    kind = _CLI_ALIASES.get(name.lower())
    if kind is None:
        raise ValueError(f"unknown denoiser {name!r}")
    args = [a for a in rest.split(",") if a] if rest else []
    try:
        if kind == "identity":
            if args:
                raise ValueError("identity takes no parameters")
            return DenoiserSpec(kind="identity")
        if kind == "gaussian-blur":
            return DenoiserSpec(kind=kind, radius=int(args[0]) if args else 3)
        if kind == "median2d":
            return DenoiserSpec(kind=kind, window=int(args[0]) if args else 3)
        if kind == "wavelet-soft":
            return DenoiserSpec(kind=kind, levels=int(args[0]) if args else 3)
        patch = int(args[0]) if len(args) > 0 else 7
        search = int(args[1]) if len(args) > 1 else 21
        h_factor = float(args[2]) if len(args) > 2 else 0.55
        return DenoiserSpec(kind="nlmeans", patch=patch, search=search,
                            h_factor=h_factor)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"bad denoiser spec {text!r}: {exc}") from exc


def _gaussian_blur(img, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * (radius / 2.0) ** 2))
    kernel /= kernel.sum()
    out = ndimage.convolve1d(img, kernel, axis=0, mode="reflect")
    return ndimage.convolve1d(out, kernel, axis=1, mode="reflect")


def _haar_forward(img, levels):
    """Orthonormal separable Haar transform; odd extents are duplicate-padded
    per level and the original shapes kept for exact inversion."""
    a = np.asarray(img, dtype=np.float64)
    details = []
    for _ in range(levels):
        h, w = a.shape
        if min(h, w) < 2:
            break
        if h % 2:
            a = np.vstack([a, a[-1:]])
        if w % 2:
            a = np.hstack([a, a[:, -1:]])
        lo = (a[0::2] + a[1::2]) / _SQRT2
        hi = (a[0::2] - a[1::2]) / _SQRT2
        ll = (lo[:, 0::2] + lo[:, 1::2]) / _SQRT2
        lh = (lo[:, 0::2] - lo[:, 1::2]) / _SQRT2
        hl = (hi[:, 0::2] + hi[:, 1::2]) / _SQRT2
        hh = (hi[:, 0::2] - hi[:, 1::2]) / _SQRT2
        details.append(((h, w), (lh, hl, hh)))
        a = ll
    return a, details


def _haar_inverse(approx, details):
    a = approx
    for (h, w), (lh, hl, hh) in reversed(details):
        h2, w2 = a.shape
        lo = np.empty((h2, 2 * w2))
        hi = np.empty((h2, 2 * w2))
        lo[:, 0::2] = (a + lh) / _SQRT2
        lo[:, 1::2] = (a - lh) / _SQRT2
        hi[:, 0::2] = (hl + hh) / _SQRT2
        hi[:, 1::2] = (hl - hh) / _SQRT2
        out = np.empty((2 * h2, 2 * w2))
        out[0::2] = (lo + hi) / _SQRT2
        out[1::2] = (lo - hi) / _SQRT2
        a = out[:h, :w]
    return a


def _soft(c, t):
    return np.sign(c) * np.maximum(np.abs(c) - t, 0.0)


def _wavelet_soft(img, sigma, levels):
    approx, details = _haar_forward(img, levels)
    if sigma > 0:
        details = [
            (shape, tuple(_soft(band, sigma * np.sqrt(2.0 * np.log(band.size)))
                          for band in bands))
            for shape, bands in details
        ]
    return _haar_inverse(approx, details)


def _nlmeans(img, sigma, patch, search, h_factor):
    if sigma <= 0:
        return img.copy()
    pr = patch // 2
    sr = search // 2
    pad = pr + sr
    padded = np.pad(img, pad, mode="reflect")
    h, w = img.shape
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    h2 = (h_factor * sigma) ** 2
    offset = 2.0 * sigma * sigma * patch * patch
    # Patch SSDs for all pixels at one candidate shift, via a box filter over
    # the squared shifted difference; margins stay valid thanks to the pad.
    base = padded[sr:sr + h + 2 * pr, sr:sr + w + 2 * pr]
    for dy in range(-sr, sr + 1):
        for dx in range(-sr, sr + 1):
            cand = padded[sr + dy:sr + dy + h + 2 * pr,
                          sr + dx:sr + dx + w + 2 * pr]
            diff2 = (base - cand) ** 2
            d2 = ndimage.uniform_filter(diff2, size=patch)[pr:pr + h, pr:pr + w]
            d2 *= patch * patch
            weight = np.exp(-np.maximum(0.0, d2 - offset) / h2)
            num += weight * cand[pr:pr + h, pr:pr + w]
            den += weight
    return num / den


def denoise_image(img, sigma: float, spec: DenoiserSpec) -> np.ndarray:
    """Denoise a 2-D image under additive Gaussian noise of std ``sigma``.

    The identity kind returns the input bit-exactly; all kinds are
    deterministic and keep the image dimensions.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if spec.kind == "identity":
        return img
    if spec.kind == "gaussian-blur":
        return _gaussian_blur(img, spec.radius)
    if spec.kind == "median2d":
        return ndimage.median_filter(img, size=spec.window, mode="reflect")
    if spec.kind == "wavelet-soft":
        return _wavelet_soft(img, sigma, spec.levels)
    return _nlmeans(img, sigma, spec.patch, spec.search, spec.h_factor)


def denoise_scaled(img, sigma: float, spec: DenoiserSpec) -> np.ndarray:
    """Denoise after an affine rescale to [0, 255], then invert the map.

    The built-in parameter defaults assume the 8-bit-like range; sigma is
    rescaled by the same factor. Constant images pass through unchanged.
    """
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min())
    hi = float(img.max())
    span = hi - lo
    if span <= 0:
        return img.copy()
    scale = 255.0 / span
    out = denoise_image((img - lo) * scale, sigma * scale, spec)
    return out / scale + lo


def medfilt3(stack: ImageStack, window: int) -> ImageStack:
    """Per-voxel median over a window^3 neighborhood with reflected boundaries."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if window > min(stack.width, stack.height, stack.frames):
        raise ValueError(
            f"window {window} exceeds stack dimensions "
            f"{stack.width}x{stack.height}x{stack.frames}"
        )
    if window == 1:
        return stack
    data = ndimage.median_filter(stack.data, size=window, mode="reflect")
    return ImageStack(width=stack.width, height=stack.height, data=data,
                      energies=stack.energies, peak=stack.peak)
