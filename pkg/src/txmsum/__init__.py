"""Subspace-model denoising, phantom simulation, and chemical-map fitting
for multi-energy X-ray microscopy image stacks."""

from .denoisers import (DenoiserSpec, default_denoiser, denoise_image,
                        denoise_scaled, medfilt3, parse_denoiser)
from .metrics import fpsnr, map_correlation, spsnr
from .phantom import (PhantomSpec, PhantomTruth, builtin_library,
                      builtin_morphology, demo_spec, generate,
                      subsample_energies)
from .pipeline import (RandomizedConfig, SumConfig, SumReport, sum_denoise,
                       sum_denoise_streaming)
from .registration import correct_jitter, estimate_shift, translate_image
from .stack import (ImageStack, NoiseModel, estimate_noise_sigma, from_matrix,
                    load_stack, save_stack, to_matrix)
from .subspace import (SubspaceDecomposition, SureReport, ThresholdConfig,
                       randomized_svd, select_rank, sure_hard_threshold,
                       svd_thin, truncate)
from .xanesfit import (ChemicalMap, FlatSpectrumError, NoEdgeError, PhaseFit,
                       SpectrumLibrary, chemical_map, edge_position,
                       fit_phase_fractions, load_library, load_map,
                       normalize_spectrum, render_map_png, save_library,
                       save_map)

__version__ = "0.1.0"

__all__ = [
    "ChemicalMap", "DenoiserSpec", "FlatSpectrumError", "ImageStack",
    "NoEdgeError", "NoiseModel", "PhantomSpec", "PhantomTruth", "PhaseFit",
    "RandomizedConfig", "SpectrumLibrary", "SubspaceDecomposition",
    "SumConfig", "SumReport", "SureReport", "ThresholdConfig",
    "builtin_library", "builtin_morphology", "chemical_map", "correct_jitter",
    "default_denoiser", "demo_spec", "denoise_image", "denoise_scaled",
    "edge_position", "estimate_noise_sigma", "estimate_shift",
    "fit_phase_fractions", "fpsnr", "from_matrix", "generate", "load_library",
    "load_map", "load_stack", "map_correlation", "medfilt3",
    "normalize_spectrum", "parse_denoiser", "randomized_svd", "render_map_png",
    "save_library", "save_map", "save_stack", "select_rank", "spsnr",
    "subsample_energies", "sum_denoise", "sum_denoise_streaming",
    "sure_hard_threshold", "svd_thin", "to_matrix", "translate_image",
    "truncate",
]
