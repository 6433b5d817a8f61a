"""Image-stack container types, raw float32 file I/O, and noise estimation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

_MAD_TO_STD = 0.6744897501960817  # Phi^-1(3/4), MAD of a Gaussian
# std gain of (x - 3x3 mean of x) for i.i.d. noise: sqrt((8/9)^2 + 8/81) = sqrt(8)/3
_HIGHPASS_GAIN = np.sqrt(8.0) / 3.0

DTYPE_TAG = "f32le"


@dataclass
class ImageStack:
    """A width x height x frames raster of real-valued images.

    ``data`` is stored frame-major with shape (frames, height, width),
    row-major within each frame. Values are nominally in [0, peak] with
    peak defaulting to the 8-bit-style 255.0. ``energies`` is an optional
    strictly increasing list of photon energies (eV), one per frame.

    Instances are treated as immutable; all operations return new stacks.
    """

    width: int
    height: int
    data: np.ndarray
    energies: np.ndarray | None = None
    peak: float = 255.0

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width < 1 or self.height < 1:
            raise ValueError("stack must be at least 1x1 pixels")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            if data.size % (self.width * self.height):
                raise ValueError(
                    f"flat data of {data.size} values does not tile "
                    f"{self.width}x{self.height} frames"
                )
            data = data.reshape(-1, self.height, self.width)
        if data.ndim != 3 or data.shape[1:] != (self.height, self.width):
            raise ValueError(
                f"data shape {data.shape} does not match frames x "
                f"{self.height} x {self.width}"
            )
        if data.shape[0] < 1:
            raise ValueError("stack needs at least one frame")
        if not np.all(np.isfinite(data)):
            raise ValueError("stack contains non-finite values")
        self.data = data
        if self.energies is not None:
            energies = np.asarray(self.energies, dtype=np.float64)
            if energies.shape != (data.shape[0],):
                raise ValueError(
                    f"{energies.size} energies for {data.shape[0]} frames"
                )
            if not np.all(np.diff(energies) > 0):
                raise ValueError("energies must be strictly increasing")
            self.energies = energies
        self.peak = float(self.peak)
        if not (np.isfinite(self.peak) and self.peak > 0):
            raise ValueError("peak must be positive and finite")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_frames(cls, frames, energies=None, peak=255.0):
        """Build a stack from a (frames, height, width) array."""
        arr = np.asarray(frames, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("expected a (frames, height, width) array")
        return cls(width=arr.shape[2], height=arr.shape[1], data=arr,
                   energies=energies, peak=peak)


@dataclass(frozen=True)
class NoiseModel:
    """Noise standard deviation plus how it was obtained."""

    sigma: float
    source: str  # "given" or "estimated"

    def __post_init__(self):
        if self.source not in ("given", "estimated"):
            raise ValueError(f"unknown noise source {self.source!r}")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError("sigma must be finite and >= 0")


def container_paths(path) -> tuple[Path, Path]:
    """Resolve a container prefix or member file to (sidecar, payload)."""
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".f32")


def sidecar_dict(width, height, frames, peak=255.0, energies=None) -> dict:
    d = {
        "width": int(width),
        "height": int(height),
        "frames": int(frames),
        "dtype": DTYPE_TAG,
        "peak": float(peak),
    }
    if energies is not None:
        d["energies"] = [float(e) for e in energies]
    return d


def write_sidecar(path: Path, meta: dict) -> None:
    path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def read_sidecar(path: Path) -> dict:
    meta = json.loads(path.read_text(encoding="utf-8"))
    for key in ("width", "height", "frames", "dtype"):
        if key not in meta:
            raise ValueError(f"sidecar {path} is missing field {key!r}")
    if meta["dtype"] != DTYPE_TAG:
        raise ValueError(f"unsupported dtype {meta['dtype']!r} (expected {DTYPE_TAG!r})")
    return meta


def save_stack(stack: ImageStack, path) -> None:
    """Write a stack as a JSON sidecar plus a raw little-endian float32 payload.

    The payload is frame-major, row-major within each frame. Identical
    stacks produce byte-identical files.
    """
    sidecar, payload = container_paths(path)
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    meta = sidecar_dict(stack.width, stack.height, stack.frames,
                        stack.peak, stack.energies)
    write_sidecar(sidecar, meta)
    payload.write_bytes(stack.data.astype("<f4").tobytes())


def load_stack(path) -> ImageStack:
    """Load a stack container written by :func:`save_stack`."""
    sidecar, payload = container_paths(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar}")
    if not payload.exists():
        raise FileNotFoundError(f"missing payload {payload}")
    meta = read_sidecar(sidecar)
    width, height, frames = meta["width"], meta["height"], meta["frames"]
    expected = width * height * frames
    raw = np.fromfile(payload, dtype="<f4")
    if raw.size != expected:
        raise ValueError(
            f"payload {payload} holds {raw.size} values but the header "
            f"declares {width}x{height}x{frames} = {expected}"
        )
    return ImageStack(
        width=width,
        height=height,
        data=raw.astype(np.float64).reshape(frames, height, width),
        energies=meta.get("energies"),
        peak=meta.get("peak", 255.0),
    )


def to_matrix(stack: ImageStack) -> np.ndarray:
    """Reshape a stack to its (width*height, frames) matrix.

    Column t is frame t flattened row-major.
    """
    return stack.data.reshape(stack.frames, -1).T


def from_matrix(matrix, width, height, energies=None, peak=255.0) -> ImageStack:
    """Inverse of :func:`to_matrix`."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != width * height:
        raise ValueError(
            f"matrix shape {m.shape} does not match {width}x{height} pixels"
        )
    data = np.ascontiguousarray(m.T).reshape(m.shape[1], height, width)
    return ImageStack(width=width, height=height, data=data,
                      energies=energies, peak=peak)


def frame_noise_sigma(frame: np.ndarray) -> float:
    """Robust noise std of one frame from the MAD of a 3x3 high-pass residual."""
    resid = (frame - ndimage.uniform_filter(frame, size=3, mode="reflect")).ravel()
    mad = np.median(np.abs(resid - np.median(resid)))
    return float(mad / _MAD_TO_STD / _HIGHPASS_GAIN)


def estimate_noise_sigma(stack: ImageStack) -> NoiseModel:
    """Estimate the additive Gaussian noise level of a stack.

    Per frame, the pixelwise difference against a 3x3 local mean is reduced
    by a median absolute deviation and rescaled by the stencil's noise gain;
    frames are aggregated by the median. Robust to structured signal, exact
    zero on constant stacks.
    """
    if stack.width * stack.height < 16:
        raise ValueError("noise estimation needs at least 16 pixels per frame")
    sigmas = np.array([frame_noise_sigma(f) for f in stack.data])
    return NoiseModel(sigma=float(np.median(sigmas)), source="estimated")
