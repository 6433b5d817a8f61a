"""The end-to-end subspace denoiser: factorize the stack matrix, select the
retained rank by unbiased risk minimization, denoise each retained spatial
coefficient image, and reconstruct against the fixed temporal basis."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoisers import DenoiserSpec, default_denoiser, denoise_scaled
from .stack import (ImageStack, container_paths, frame_noise_sigma, from_matrix,
                    read_sidecar, sidecar_dict, to_matrix, write_sidecar)
from .subspace import (SubspaceDecomposition, SureReport, ThresholdConfig,
                       _randomized_from_columns, randomized_svd, select_rank,
                       svd_thin)


@dataclass(frozen=True)
class RandomizedConfig:
    """Randomized factorization parameters (rank, oversampling, power
    iterations, seed)."""

    rank: int
    oversample: int = 10
    power_iters: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.rank < 8:
            raise ValueError("randomized rank must be >= 8 (plausible rank ceiling)")
        if self.oversample < 0 or self.power_iters < 0:
            raise ValueError("oversample and power_iters must be >= 0")

    def cli_string(self) -> str:
        return f"rsvd:{self.rank},{self.oversample},{self.power_iters},{self.seed}"


@dataclass
class SumConfig:
    """Pipeline configuration: inner denoiser, rank selection, noise level
    (None = estimate), and factorization (None = exact SVD)."""

    denoiser: DenoiserSpec = field(default_factory=default_denoiser)
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig.sure_auto)
    sigma: float | None = None
    randomized: RandomizedConfig | None = None


@dataclass
class SumReport:
    """What one pipeline run selected and how long it took."""

    selected_k: int
    selected_delta: float
    sigma: float
    sigma_source: str
    empty_subspace: bool
    coeff_seconds: list[float]
    total_seconds: float
    denoiser: str
    factorization: str
    selection: SureReport | None = None

    def to_dict(self) -> dict:
        d = {
            "selected_k": int(self.selected_k),
            "selected_delta": float(self.selected_delta),
            "sigma": float(self.sigma),
            "sigma_source": self.sigma_source,
            "empty_subspace": bool(self.empty_subspace),
            "coeff_seconds": [float(t) for t in self.coeff_seconds],
            "total_seconds": float(self.total_seconds),
            "denoiser": self.denoiser,
            "factorization": self.factorization,
        }
        if self.selection is not None:
            d["sure"] = self.selection.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _resolve_sigma(cfg: SumConfig, frames) -> tuple[float, str]:
    """Noise level from the config or a per-frame median estimate."""
    if cfg.sigma is not None:
        if not (np.isfinite(cfg.sigma) and cfg.sigma >= 0):
            raise ValueError("sigma must be finite and >= 0")
        return float(cfg.sigma), "given"
    sigmas = [frame_noise_sigma(f) for f in frames]
    return float(np.median(sigmas)), "estimated"


def _denoise_coefficients(dec: SubspaceDecomposition, k, sigma, spec,
                          width, height):
    """Denoise the k leading spatial coefficient images u_i * s_i.

    The coefficient noise is Gaussian with the stack's own std because the
    temporal factors are orthonormal, so sigma passes straight through.
    """
    coeff = np.empty((width * height, k))
    times = []
    for i in range(k):
        tic = time.perf_counter()
        img = (dec.u[:, i] * dec.s[i]).reshape(height, width)
        coeff[:, i] = denoise_scaled(img, sigma, spec).ravel()
        times.append(time.perf_counter() - tic)
    return coeff, times


def sum_denoise(stack: ImageStack, cfg: SumConfig | None = None
                ) -> tuple[ImageStack, SumReport]:
    """Denoise a stack by subspace modeling.

    Steps: reshape to the pixels x frames matrix, factorize (exact or
    randomized SVD), select the retained rank, denoise each retained
    spatial coefficient image at the stack's noise level, reconstruct.
    A selected rank of zero yields the zero stack with the report's
    ``empty_subspace`` flag set.
    """
    if cfg is None:
        cfg = SumConfig()
    t_start = time.perf_counter()
    sigma, source = _resolve_sigma(cfg, stack.data)
    a = to_matrix(stack)
    if cfg.randomized is None:
        dec = svd_thin(a)
        fact = "exact"
    else:
        r = cfg.randomized
        dec = randomized_svd(a, r.rank, r.oversample, r.power_iters, r.seed)
        fact = r.cli_string()
    sel = select_rank(dec, sigma, cfg.threshold)
    k = sel.selected_k
    times: list[float] = []
    if k == 0:
        xhat = np.zeros_like(a)
    else:
        coeff, times = _denoise_coefficients(dec, k, sigma, cfg.denoiser,
                                             stack.width, stack.height)
        if cfg.randomized is None:
            xhat = coeff @ dec.v[:, :k].T
        else:
            # per-frame products keep the randomized path bit-identical to
            # the streaming variant
            vk = np.ascontiguousarray(dec.v[:, :k])
            xhat = np.empty_like(a)
            for t in range(stack.frames):
                xhat[:, t] = coeff @ vk[t]
    out = from_matrix(xhat, stack.width, stack.height,
                      energies=stack.energies, peak=stack.peak)
    report = SumReport(selected_k=k, selected_delta=sel.selected_delta,
                       sigma=sigma, sigma_source=source,
                       empty_subspace=sel.empty_subspace,
                       coeff_seconds=times,
                       total_seconds=time.perf_counter() - t_start,
                       denoiser=cfg.denoiser.cli_string(),
                       factorization=fact, selection=sel)
    return out, report


def _file_columns(payload: Path, npix: int, frames: int, block_frames: int):
    with open(payload, "rb") as fh:
        for start in range(0, frames, block_frames):
            count = min(block_frames, frames - start)
            raw = np.fromfile(fh, dtype="<f4", count=count * npix)
            if raw.size != count * npix:
                raise ValueError(f"payload {payload} truncated at frame {start}")
            block = raw.astype(np.float64).reshape(count, npix)
            for i in range(count):
                yield start + i, block[i]


def sum_denoise_streaming(input_path, output_path, cfg: SumConfig,
                          block_frames: int = 16) -> tuple[Path, SumReport]:
    """Streaming variant of :func:`sum_denoise` for stacks larger than memory.

    Requires a randomized factorization. The stack matrix is visited in
    frame blocks read straight from the container payload; peak memory is
    one (pixels x (rank + oversample)) workspace plus a frame block. Output
    is bit-identical to the in-memory randomized path regardless of
    ``block_frames``.
    """
    if cfg.randomized is None:
        raise ValueError("streaming denoising requires a randomized factorization")
    t_start = time.perf_counter()
    sidecar, payload = container_paths(input_path)
    meta = read_sidecar(sidecar)
    width, height, frames = meta["width"], meta["height"], meta["frames"]
    npix = width * height
    if block_frames < 1:
        raise ValueError("block_frames must be >= 1")

    if cfg.sigma is not None:
        sigma, source = _resolve_sigma(cfg, ())
    else:
        sigmas = [frame_noise_sigma(col.reshape(height, width))
                  for _, col in _file_columns(payload, npix, frames, block_frames)]
        sigma, source = float(np.median(sigmas)), "estimated"

    r = cfg.randomized

    def make_pass():
        return _file_columns(payload, npix, frames, block_frames)

    dec = _randomized_from_columns(make_pass, npix, frames, r.rank,
                                   r.oversample, r.power_iters, r.seed)
    sel = select_rank(dec, sigma, cfg.threshold)
    k = sel.selected_k
    times: list[float] = []
    out_sidecar, out_payload = container_paths(output_path)
    out_sidecar.parent.mkdir(parents=True, exist_ok=True)
    write_sidecar(out_sidecar, sidecar_dict(width, height, frames,
                                            meta.get("peak", 255.0),
                                            meta.get("energies")))
    if k == 0:
        zero = np.zeros(npix, dtype="<f4").tobytes()
        with open(out_payload, "wb") as fh:
            for _ in range(frames):
                fh.write(zero)
    else:
        coeff, times = _denoise_coefficients(dec, k, sigma, cfg.denoiser,
                                             width, height)
        vk = np.ascontiguousarray(dec.v[:, :k])
        with open(out_payload, "wb") as fh:
            for t in range(frames):
                fh.write((coeff @ vk[t]).astype("<f4").tobytes())
    report = SumReport(selected_k=k, selected_delta=sel.selected_delta,
                       sigma=sigma, sigma_source=source,
                       empty_subspace=sel.empty_subspace,
                       coeff_seconds=times,
                       total_seconds=time.perf_counter() - t_start,
                       denoiser=cfg.denoiser.cli_string(),
                       factorization=r.cli_string(), selection=sel)
    return out_sidecar.with_suffix(""), report
