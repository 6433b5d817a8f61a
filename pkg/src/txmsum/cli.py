"""Command-line surface: phantom simulation, denoising, chemical-map
fitting, jitter correction, metrics, and benchmark sweeps.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .denoisers import DenoiserSpec, medfilt3, parse_denoiser
from .metrics import fpsnr, map_correlation, spsnr
from .phantom import PhantomSpec, generate, load_spec, spec_from_json_dict
from .pipeline import RandomizedConfig, SumConfig, sum_denoise, sum_denoise_streaming
from .registration import correct_jitter
from .stack import ImageStack, from_matrix, load_stack, save_stack
from .subspace import ThresholdConfig
from .xanesfit import (ChemicalMap, chemical_map, default_windows, edge_position,
                       load_library, load_map, render_map_png, save_map,
                       _normalize_matrix)

_FIT_MODES = {"edge": "edge-position", "phase": "phase-fit"}


class UsageError(ValueError):
    """Malformed flag values; maps to exit code 1."""

SWEEP_COLUMNS = ["name", "seed", "sigma", "jitter", "fraction", "method",
                 "order", "fpsnr_db", "spsnr_db", "correlation", "runtime_s",
                 "selected_k", "error"]


def _parse_rank(text: str) -> ThresholdConfig:
    if text == "auto":
        return ThresholdConfig.sure_auto()
    return ThresholdConfig.fixed_rank(int(text))


def _parse_sigma(text: str) -> float | None:
    if text == "auto":
        return None
    return float(text)


def _parse_factorization(text: str) -> RandomizedConfig | None:
    if text == "exact":
        return None
    name, _, rest = text.partition(":")
    if name != "rsvd":
        raise ValueError(f"unknown factorization {text!r}")
    parts = [p for p in rest.split(",") if p]
    if not parts:
        raise ValueError("rsvd needs at least a rank, e.g. rsvd:32")
    vals = [int(p) for p in parts]
    return RandomizedConfig(rank=vals[0],
                            oversample=vals[1] if len(vals) > 1 else 10,
                            power_iters=vals[2] if len(vals) > 2 else 2,
                            seed=vals[3] if len(vals) > 3 else 0)


def _windows_from_fractions(energies, fractions: str):
    parts = fractions.split(",")
    if len(parts) != 2:
        raise ValueError("--windows expects pre,post fractions, e.g. 0.15,0.15")
    pre_f, post_f = float(parts[0]), float(parts[1])
    if not (0 < pre_f < 1 and 0 < post_f < 1):
        raise ValueError("window fractions must lie in (0, 1)")
    lo, hi = float(energies[0]), float(energies[-1])
    span = hi - lo
    return (lo, lo + pre_f * span), (hi - post_f * span, hi)


def _save_labels(labels: np.ndarray, path) -> None:
    h, w = labels.shape
    save_stack(from_matrix(labels.reshape(-1, 1).astype(np.float64), w, h), path)


def _write_shifts_csv(shifts: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "dx", "dy"])
        for t, (dx, dy) in enumerate(shifts):
            writer.writerow([t, int(dx), int(dy)])


def cmd_simulate(args) -> int:
    spec = load_spec(args.spec)
    noisy, truth = generate(spec)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_stack(noisy, f"{prefix}_noisy")
    save_stack(truth.clean, f"{prefix}_clean")
    truth_dir = Path(f"{prefix}_truth")
    truth_dir.mkdir(parents=True, exist_ok=True)
    _save_labels(truth.labels, truth_dir / "label_map")
    save_map(truth.truth_map, truth_dir / "gt_map")
    _write_shifts_csv(truth.shifts, truth_dir / "shifts.csv")
    print(f"wrote {prefix}_noisy, {prefix}_clean, {truth_dir}/")
    return 0


def _denoise_config(args) -> SumConfig:
    try:
        denoiser = parse_denoiser(args.denoiser)
        if args.method == "svd":
            denoiser = DenoiserSpec(kind="identity")
        return SumConfig(denoiser=denoiser,
                         threshold=_parse_rank(args.rank),
                         sigma=_parse_sigma(args.sigma),
                         randomized=_parse_factorization(args.factorization))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_denoise(args) -> int:
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.method == "medfilt3":
        stack = load_stack(args.input)
        tic = time.perf_counter()
        result = medfilt3(stack, args.window)
        save_stack(result, out)
        report = {"method": "medfilt3", "window": args.window,
                  "total_seconds": time.perf_counter() - tic}
        Path(f"{out}_report.json").write_text(
            json.dumps(report, indent=2) + "\n", encoding="utf-8")
        print(f"wrote {out} (medfilt3 window {args.window})")
        return 0
    cfg = _denoise_config(args)
    if args.streaming:
        _, report = sum_denoise_streaming(args.input, out, cfg,
                                          block_frames=args.block_frames)
    else:
        stack = load_stack(args.input)
        result, report = sum_denoise(stack, cfg)
        save_stack(result, out)
    Path(f"{out}_report.json").write_text(report.to_json(), encoding="utf-8")
    if report.empty_subspace:
        print("warning: empty subspace selected (k = 0); output is the zero stack",
              file=sys.stderr)
    print(f"wrote {out} (k = {report.selected_k}, sigma = {report.sigma:.4g} "
          f"[{report.sigma_source}])")
    return 0


def cmd_fit(args) -> int:
    stack = load_stack(args.input)
    if stack.energies is None:
        raise ValueError("input stack has no energy axis")
    lib = load_library(args.library, args.states)
    pre, post = _windows_from_fractions(stack.energies, args.windows)
    cmap = chemical_map(stack, lib, mode=_FIT_MODES[args.mode],
                        pre_edge=pre, post_edge=post)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_map(cmap, out)
    render_map_png(cmap, f"{out}.png")
    print(f"wrote {out} ({cmap.mode}, {cmap.valid.mean():.1%} valid)")
    return 0


def cmd_register(args) -> int:
    stack = load_stack(args.input)
    corrected, shifts = correct_jitter(stack)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stack(corrected, out)
    shifts_path = args.shifts or f"{out}_shifts.csv"
    _write_shifts_csv(shifts, shifts_path)
    print(f"wrote {out} and {shifts_path}")
    return 0


def cmd_metrics(args) -> int:
    result: dict = {}
    if args.est and args.gt:
        est = load_stack(args.est)
        gt = load_stack(args.gt)
        peak = args.peak if args.peak is not None else gt.peak
        result["fpsnr_db"] = fpsnr(est, gt, peak)
        result["spsnr_db"] = spsnr(est, gt, peak)
    if args.est_map and args.gt_map:
        result["correlation"] = map_correlation(load_map(args.est_map),
                                                load_map(args.gt_map))
    if not result:
        raise ValueError("nothing to compute: give --est/--gt and/or "
                         "--est-map/--gt-map")
    text = json.dumps(result, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


# --- sweep -------------------------------------------------------------------

def _edge_truth_map(truth, lib, energies, pre, post) -> ChemicalMap:
    """Label-derived edge-position map consistent with chemical_map's
    normalization of the library on the current axis."""
    lib = lib.resample(energies)
    refs_norm, _, _ = _normalize_matrix(lib.references, energies, pre, post)
    edges = np.array([edge_position(refs_norm[:, j], energies)
                      for j in range(lib.size)])
    return ChemicalMap(values=edges[truth.labels],
                       residual=np.zeros_like(truth.labels, dtype=np.float64),
                       valid=np.ones_like(truth.labels, dtype=bool),
                       mode="edge-position")


def _run_sweep_cell(config: dict, cell: tuple) -> dict:
    seed, sigma, jitter, fraction, method, order = cell
    row = {"name": config.get("name", "phantom"), "seed": seed, "sigma": sigma,
           "jitter": jitter, "fraction": fraction, "method": method,
           "order": order, "fpsnr_db": "", "spsnr_db": "", "correlation": "",
           "runtime_s": "", "selected_k": "", "error": ""}
    try:
        base = dict(config.get("phantom", {}))
        base.update({"sigma": sigma, "jitter": jitter, "fraction": fraction,
                     "seed": seed, "name": config.get("name", "phantom")})
        spec = spec_from_json_dict(base, base_dir=Path(config.get("_base_dir", ".")))
        noisy, truth = generate(spec)
        sigma_cfg = None if config.get("sigma_mode", "given") == "auto" else sigma
        denoiser = parse_denoiser(config.get("denoiser", "nlmeans:7,21,0.55"))
        if method == "svd":
            denoiser = DenoiserSpec(kind="identity")
        report = None
        tic = time.perf_counter()

        def run_denoise(stack: ImageStack) -> ImageStack:
            nonlocal report
            if method == "noisy":
                return stack
            if method == "medfilt3":
                return medfilt3(stack, int(config.get("medfilt_window", 3)))
            out, report = sum_denoise(stack, SumConfig(denoiser=denoiser,
                                                       sigma=sigma_cfg))
            return out

        if order == "register-first":
            registered, _ = correct_jitter(noisy)
            est = run_denoise(registered)
        elif order == "denoise-first":
            est = run_denoise(noisy)
            est, _ = correct_jitter(est)
        elif order == "none":
            est = run_denoise(noisy)
        else:
            raise ValueError(f"unknown order {order!r}")
        runtime = time.perf_counter() - tic

        fit_mode = _FIT_MODES[config.get("fit_mode", "phase")]
        pre, post = default_windows(noisy.energies)
        est_map = chemical_map(est, spec.library, mode=fit_mode,
                               pre_edge=pre, post_edge=post)
        if fit_mode == "edge-position":
            gt_map = _edge_truth_map(truth, spec.library, noisy.energies, pre, post)
        else:
            gt_map = truth.truth_map
        row["fpsnr_db"] = f"{fpsnr(est, truth.clean):.4f}"
        row["spsnr_db"] = f"{spsnr(est, truth.clean):.4f}"
        row["correlation"] = f"{map_correlation(est_map, gt_map):.6f}"
        row["runtime_s"] = f"{runtime:.4f}"
        if report is not None:
            row["selected_k"] = report.selected_k
            if config.get("sure_curve") and config.get("_out_stem"):
                tag = (f"{row['name']}_seed{seed}_s{sigma:g}_a{jitter}"
                       f"_f{fraction:g}_{method}_{order}")
                Path(f"{config['_out_stem']}_sure_{tag}.json").write_text(
                    report.selection.to_json(), encoding="utf-8")
    except Exception as exc:  # cell failures are rows, not fatal
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def cmd_sweep(args) -> int:
    config_path = Path(args.config)
    config = json.loads(config_path.read_text(encoding="utf-8"))
    config["_base_dir"] = str(config_path.parent)
    out_csv = Path(args.output)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    config["_out_stem"] = str(out_csv.with_suffix(""))
    cells = list(itertools.product(
        config.get("seeds", [0]),
        config.get("sigmas", [0.0]),
        config.get("jitter_amplitudes", [0]),
        config.get("sampling_fractions", [1.0]),
        config.get("methods", ["sum"]),
        config.get("orders", ["none"]),
    ))
    jobs = int(args.jobs or config.get("jobs", 1))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, itertools.repeat(config), cells))
    else:
        rows = [_run_sweep_cell(config, cell) for cell in cells]
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    failed = sum(1 for r in rows if r["error"])
    print(f"wrote {out_csv}: {len(rows)} cells, {failed} failed")
    return 0


# --- entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="txmsum",
                     description="Subspace-model denoising and chemical mapping "
                                 "for multi-energy X-ray image stacks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a phantom from a JSON spec")
    p.add_argument("spec", help="phantom spec JSON file")
    p.add_argument("out_prefix", help="output prefix for noisy/clean/truth files")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("denoise", help="denoise a stack")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--method", choices=["sum", "svd", "medfilt3"], default="sum")
    p.add_argument("--denoiser", default="nlmeans:7,21,0.55",
                   help="inner denoiser, e.g. nlmeans:7,21,0.55 wavelet:3 "
                        "median2d:3 blur:3 identity")
    p.add_argument("--rank", default="auto", help="'auto' or a fixed rank")
    p.add_argument("--sigma", default="auto", help="'auto' or a noise std value")
    p.add_argument("--factorization", default="exact",
                   help="'exact' or rsvd:k[,p,q,seed]")
    p.add_argument("--window", type=int, default=3, help="medfilt3 window")
    p.add_argument("--streaming", action="store_true",
                   help="frame-block streaming (needs rsvd factorization)")
    p.add_argument("--block-frames", type=int, default=16)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("fit", help="fit a per-pixel chemical map")
    p.add_argument("input")
    p.add_argument("library", help="reference spectra CSV (energy,<label>,...)")
    p.add_argument("states", help="label -> state value JSON")
    p.add_argument("output")
    p.add_argument("--mode", choices=["edge", "phase"], default="phase")
    p.add_argument("--windows", default="0.15,0.15",
                   help="pre,post edge window fractions of the energy axis")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("register", help="rigid jitter correction")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--shifts", help="shifts CSV path (default <output>_shifts.csv)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("metrics", help="frame/spectrum PSNR and map correlation")
    p.add_argument("--est", help="estimated stack")
    p.add_argument("--gt", help="ground-truth stack")
    p.add_argument("--est-map", help="estimated chemical-map prefix")
    p.add_argument("--gt-map", help="ground-truth chemical-map prefix")
    p.add_argument("--peak", type=float, help="PSNR peak (default: gt sidecar)")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sweep", help="run a benchmark grid to CSV")
    p.add_argument("config", help="sweep config JSON")
    p.add_argument("output", help="output CSV")
    p.add_argument("--jobs", type=int, help="parallel cells (default: config)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
