"""Seeded synthesis of ground-truth multi-energy stacks: label maps,
spectrum assignment, amplitude modulation, Gaussian noise, jitter motion,
and energy subsampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .registration import translate_image
from .stack import ImageStack
from .xanesfit import ChemicalMap, SpectrumLibrary, load_library

_MORPHOLOGY_SEED = 20240811
_MORPHOLOGY_BASE = 256

LABEL_SOURCES = ("image-quantiles", "voronoi")
AMPLITUDE_SOURCES = ("uniform", "image")

_BUILTIN_ENERGIES = np.linspace(8180.0, 8562.0, 117)
_BUILTIN_EDGES = (8320.0, 8350.0, 8380.0, 8410.0, 8440.0)
_BUILTIN_STATES = (2.0, 2.5, 3.0, 3.5, 4.0)
_BUILTIN_RISE = (8280.0, 8480.0)
_BUILTIN_WIDTH = 12.0


def builtin_library() -> SpectrumLibrary:
    """Five smooth nickel-valence-like reference spectra on a 117-point
    8180..8562 eV axis.

    Each reference is a rescaled logistic rise: exactly 0 below the rise
    interval, exactly 1 above it, with edge positions strictly increasing
    in state value. Stand-ins for measured references; only their ordering
    and self-consistency are meaningful.
    """
    e = _BUILTIN_ENERGIES
    a, b = _BUILTIN_RISE
    refs = np.zeros((e.size, len(_BUILTIN_EDGES)))
    for j, center in enumerate(_BUILTIN_EDGES):
        lo = 1.0 / (1.0 + np.exp(-(a - center) / _BUILTIN_WIDTH))
        hi = 1.0 / (1.0 + np.exp(-(b - center) / _BUILTIN_WIDTH))
        sig = 1.0 / (1.0 + np.exp(-(e - center) / _BUILTIN_WIDTH))
        refs[:, j] = np.clip((sig - lo) / (hi - lo), 0.0, 1.0)
        refs[e <= a, j] = 0.0
        refs[e >= b, j] = 1.0
    labels = [f"ni{v:.1f}" for v in _BUILTIN_STATES]
    return SpectrumLibrary(energies=e, references=refs,
                           states=np.array(_BUILTIN_STATES), labels=labels)


def builtin_morphology(width: int, height: int) -> np.ndarray:
    """The built-in grayscale morphology image, resampled to any size.

    A fixed-seed smoothed random field generated once at 256x256 and
    bilinearly resampled, normalized to [0, 1]. Deterministic everywhere.
    """
    rng = np.random.default_rng(_MORPHOLOGY_SEED)
    base = ndimage.gaussian_filter(rng.standard_normal(
        (_MORPHOLOGY_BASE, _MORPHOLOGY_BASE)), 12.0, mode="wrap")
    base += 0.5 * ndimage.gaussian_filter(rng.standard_normal(
        (_MORPHOLOGY_BASE, _MORPHOLOGY_BASE)), 4.0, mode="wrap")
    base -= base.min()
    base /= base.max()
    if (height, width) == base.shape:
        return base
    yy = np.linspace(0.0, _MORPHOLOGY_BASE - 1.0, height)
    xx = np.linspace(0.0, _MORPHOLOGY_BASE - 1.0, width)
    grid = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(base, grid, order=1, mode="reflect")


@dataclass
class PhantomSpec:
    """Seeded recipe for one synthetic ground-truth stack."""

    width: int = 128
    height: int = 128
    label_source: str = "image-quantiles"
    amplitude_source: str = "uniform"
    label_image: np.ndarray | None = None  # grayscale; None -> built-in morphology
    library: SpectrumLibrary = field(default_factory=builtin_library)
    sigma: float = 0.0
    jitter_amplitude: int = 0
    sampling_fraction: float = 1.0
    seed: int = 0
    name: str = "phantom"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("phantom must be at least 1x1")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.label_source!r}")
        if self.amplitude_source not in AMPLITUDE_SOURCES:
            raise ValueError(f"unknown amplitude source {self.amplitude_source!r}")
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError("sigma must be finite and >= 0")
        if self.jitter_amplitude < 0:
            raise ValueError("jitter amplitude must be >= 0")
        if not 0.0 < self.sampling_fraction <= 1.0:
            raise ValueError("sampling fraction must lie in (0, 1]")
        frames = int(np.ceil(self.sampling_fraction * self.library.energies.size))
        if frames < 8:
            raise ValueError(
                f"sampling fraction {self.sampling_fraction} keeps only "
                f"{frames} frames; need at least 8")
        if self.label_image is not None:
            img = np.asarray(self.label_image, dtype=np.float64)
            if img.shape != (self.height, self.width):
                raise ValueError("label image shape must match the phantom size")
            self.label_image = img


@dataclass
class PhantomTruth:
    """Everything needed to score reconstructions of a phantom."""

    clean: ImageStack             # un-jittered noiseless stack, same frames as output
    labels: np.ndarray            # (height, width) int phase indices
    truth_map: ChemicalMap        # label-derived state map
    shifts: np.ndarray            # (frames, 2) applied integer (dx, dy) per frame


def _label_map(spec: PhantomSpec, base_image) -> np.ndarray:
    p = spec.library.size
    if spec.label_source == "voronoi":
        rng = np.random.default_rng([spec.seed, 0])
        pts = rng.uniform([0, 0], [spec.height, spec.width], size=(p, 2))
        yy, xx = np.mgrid[0:spec.height, 0:spec.width]
        d2 = ((yy[..., None] - pts[:, 0]) ** 2
              + (xx[..., None] - pts[:, 1]) ** 2)
        return np.argmin(d2, axis=-1)
    cuts = np.quantile(base_image, [i / p for i in range(1, p)])
    return np.searchsorted(cuts, base_image, side="right")


def generate(spec: PhantomSpec) -> tuple[ImageStack, PhantomTruth]:
    """Synthesize a noisy stack and its ground truth.

    Clean frame t, pixel q is 255 * amplitude(q) * reference[label(q)](t),
    clipped to [0, 255]. Noise, jitter translations (frame 0 unshifted,
    components uniform in [-a, a]) and energy subsampling are all drawn from
    seed-derived independent streams, so output is fully deterministic.
    """
    lib = spec.library
    base = spec.label_image
    if base is None:
        base = builtin_morphology(spec.width, spec.height)
    labels = _label_map(spec, base)
    if spec.amplitude_source == "uniform":
        amp = np.ones((spec.height, spec.width))
    else:
        lo, hi = base.min(), base.max()
        span = hi - lo if hi > lo else 1.0
        amp = 0.2 + 0.8 * (base - lo) / span
    t_full = lib.energies.size
    clean = 255.0 * amp.ravel()[None, :] * lib.references[:, labels.ravel()]
    clean = np.clip(clean, 0.0, 255.0).reshape(t_full, spec.height, spec.width)

    if spec.sigma > 0:
        rng_noise = np.random.default_rng([spec.seed, 1])
        noisy = clean + spec.sigma * rng_noise.standard_normal(clean.shape)
    else:
        noisy = clean.copy()

    shifts = np.zeros((t_full, 2), dtype=int)
    if spec.jitter_amplitude > 0:
        rng_jitter = np.random.default_rng([spec.seed, 2])
        a = spec.jitter_amplitude
        shifts[1:] = rng_jitter.integers(-a, a + 1, size=(t_full - 1, 2))
        for t in range(1, t_full):
            dx, dy = shifts[t]
            if dx or dy:
                noisy[t] = translate_image(noisy[t], dx, dy)

    if spec.sampling_fraction < 1.0:
        keep = int(np.ceil(spec.sampling_fraction * t_full))
        rng_sample = np.random.default_rng([spec.seed, 3])
        idx = np.sort(rng_sample.choice(t_full, size=keep, replace=False))
    else:
        idx = np.arange(t_full)

    energies = lib.energies[idx]
    noisy_stack = ImageStack(width=spec.width, height=spec.height,
                             data=noisy[idx], energies=energies)
    clean_stack = ImageStack(width=spec.width, height=spec.height,
                             data=clean[idx], energies=energies)
    truth_map = ChemicalMap(values=lib.states[labels],
                            residual=np.zeros_like(labels, dtype=np.float64),
                            valid=np.ones_like(labels, dtype=bool),
                            mode="phase-fit")
    truth = PhantomTruth(clean=clean_stack, labels=labels,
                         truth_map=truth_map, shifts=shifts[idx])
    return noisy_stack, truth


def subsample_energies(stack: ImageStack, fraction: float, seed: int) -> ImageStack:
    """Keep a seeded random subset of ceil(fraction * frames) frames, sorted
    by energy. ``fraction`` = 1 returns the stack unchanged."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return stack
    keep = int(np.ceil(fraction * stack.frames))
    if keep < 8:
        raise ValueError(f"subsampling keeps only {keep} frames; need at least 8")
    rng = np.random.default_rng([seed, 3])
    idx = np.sort(rng.choice(stack.frames, size=keep, replace=False))
    energies = stack.energies[idx] if stack.energies is not None else None
    return ImageStack(width=stack.width, height=stack.height,
                      data=stack.data[idx], energies=energies, peak=stack.peak)


# --- JSON spec files (CLI) ---------------------------------------------------

def spec_to_json_dict(spec: PhantomSpec) -> dict:
    d = {
        "name": spec.name,
        "width": spec.width,
        "height": spec.height,
        "labels": spec.label_source,
        "amplitude": spec.amplitude_source,
        "sigma": spec.sigma,
        "jitter": spec.jitter_amplitude,
        "fraction": spec.sampling_fraction,
        "seed": spec.seed,
        "library": "builtin",
    }
    return d


def spec_from_json_dict(d: dict, base_dir: Path | None = None) -> PhantomSpec:
    lib_field = d.get("library", "builtin")
    if lib_field == "builtin":
        lib = builtin_library()
    else:
        base = base_dir or Path(".")
        lib = load_library(base / lib_field["csv"], base / lib_field["states"])
    return PhantomSpec(
        width=int(d.get("width", 128)),
        height=int(d.get("height", 128)),
        label_source=d.get("labels", "image-quantiles"),
        amplitude_source=d.get("amplitude", "uniform"),
        library=lib,
        sigma=float(d.get("sigma", 0.0)),
        jitter_amplitude=int(d.get("jitter", 0)),
        sampling_fraction=float(d.get("fraction", 1.0)),
        seed=int(d.get("seed", 0)),
        name=d.get("name", "phantom"),
    )


def load_spec(path) -> PhantomSpec:
    path = Path(path)
    return spec_from_json_dict(json.loads(path.read_text(encoding="utf-8")),
                               base_dir=path.parent)


def demo_spec() -> PhantomSpec:
    """The shipped demo phantom recipe (48x48, built-in library, sigma 60)."""
    from importlib.resources import files

    text = files("txmsum.data").joinpath("demo_phantom.json").read_text("utf-8")
    return spec_from_json_dict(json.loads(text))
