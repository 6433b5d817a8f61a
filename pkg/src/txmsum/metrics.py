"""Evaluation criteria: frame PSNR, spectrum PSNR, and map correlation."""

from __future__ import annotations

import numpy as np

from .stack import ImageStack
from .xanesfit import ChemicalMap

PSNR_CAP_DB = 100.0  # assigned to zero-MSE frames/spectra so averages stay finite


def _check_dims(est: ImageStack, gt: ImageStack):
    if (est.width, est.height, est.frames) != (gt.width, gt.height, gt.frames):
        raise ValueError(
            f"dimension mismatch: {est.width}x{est.height}x{est.frames} vs "
            f"{gt.width}x{gt.height}x{gt.frames}")


def _mean_psnr(mse, peak):
    vals = np.where(mse > 0,
                    10.0 * np.log10(peak * peak / np.where(mse > 0, mse, 1.0)),
                    PSNR_CAP_DB)
    return float(vals.mean())


def fpsnr(est: ImageStack, gt: ImageStack, peak: float | None = None) -> float:
    """Mean over frames of the per-frame PSNR in dB."""
    _check_dims(est, gt)
    peak = gt.peak if peak is None else float(peak)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    err = est.data - gt.data
    mse = np.mean(err * err, axis=(1, 2))
    return _mean_psnr(mse, peak)


def spsnr(est: ImageStack, gt: ImageStack, peak: float | None = None) -> float:
    """Mean over pixels of the per-spectrum PSNR in dB."""
    _check_dims(est, gt)
    peak = gt.peak if peak is None else float(peak)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    err = est.data - gt.data
    mse = np.mean(err * err, axis=0)
    return _mean_psnr(mse, peak)


def map_correlation(a: ChemicalMap, b: ChemicalMap) -> float:
    """Pearson correlation over the intersection of the valid masks."""
    if a.values.shape != b.values.shape:
        raise ValueError("maps differ in shape")
    valid = a.valid & b.valid
    if int(valid.sum()) < 2:
        raise ValueError("need at least 2 mutually valid pixels")
    x = a.values[valid]
    y = b.values[valid]
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(xc @ xc))
    sy = float(np.sqrt(yc @ yc))
    if sx == 0 or sy == 0:
        raise ValueError("degenerate (constant) map: correlation undefined")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))
