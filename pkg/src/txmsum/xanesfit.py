"""Spectrum normalization, reference-based phase fitting, edge-position
extraction, and per-pixel chemical-map construction."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stack import ImageStack, container_paths, from_matrix, load_stack, save_stack

MAX_REFERENCES = 8


class FlatSpectrumError(ValueError):
    """Raised when a spectrum has no usable edge step."""


class NoEdgeError(ValueError):
    """Raised when a spectrum never crosses the half-step level upward."""


@dataclass
class SpectrumLibrary:
    """Reference absorption spectra with their chemical-state values."""

    energies: np.ndarray    # (points,) strictly increasing, eV
    references: np.ndarray  # (points, refs)
    states: np.ndarray      # (refs,) e.g. Ni valence per reference
    labels: list[str]

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=np.float64)
        self.references = np.asarray(self.references, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.references.ndim != 2:
            raise ValueError("references must be a (points, refs) matrix")
        t, p = self.references.shape
        if p < 1:
            raise ValueError("library needs at least one reference")
        if self.energies.shape != (t,):
            raise ValueError("energy axis does not match references")
        if not np.all(np.diff(self.energies) > 0):
            raise ValueError("energies must be strictly increasing")
        if not np.all(np.isfinite(self.references)):
            raise ValueError("references contain non-finite values")
        if self.states.shape != (p,) or len(self.labels) != p:
            raise ValueError("states/labels do not match reference count")

    @property
    def size(self) -> int:
        return self.references.shape[1]

    def resample(self, energies) -> "SpectrumLibrary":
        """Linear-interpolate the references onto a new energy axis."""
        energies = np.asarray(energies, dtype=np.float64)
        if np.array_equal(energies, self.energies):
            return self
        refs = np.column_stack([
            np.interp(energies, self.energies, self.references[:, j])
            for j in range(self.size)
        ])
        return SpectrumLibrary(energies=energies, references=refs,
                               states=self.states, labels=list(self.labels))


@dataclass
class ChemicalMap:
    """Per-pixel scalar chemical map plus fit diagnostics.

    ``mode`` is "edge-position" (values in eV) or "phase-fit" (values are
    fitted state values). ``valid`` marks pixels whose fit succeeded;
    invalid pixels hold 0 in ``values``.
    """

    values: np.ndarray
    residual: np.ndarray
    valid: np.ndarray
    mode: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.residual = np.asarray(self.residual, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError("map values must be 2-D")
        if self.residual.shape != self.values.shape or self.valid.shape != self.values.shape:
            raise ValueError("map fields must share one shape")
        if self.mode not in ("edge-position", "phase-fit"):
            raise ValueError(f"unknown map mode {self.mode!r}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PhaseFit:
    """Simplex-constrained least-squares fit of one spectrum."""

    weights: np.ndarray
    state: float
    residual: float
    nonunique: bool


def default_windows(energies) -> tuple[tuple[float, float], tuple[float, float]]:
    """Pre-edge = first 15% of the energy axis, post-edge = last 15%.

    Counted in samples (at least 2 per window) so sparsely subsampled axes
    still get usable windows; on uniform axes this matches a 15% energy span.
    """
    energies = np.asarray(energies, dtype=np.float64)
    n = energies.size
    k = max(2, int(np.ceil(0.15 * n)))
    return ((float(energies[0]), float(energies[k - 1])),
            (float(energies[n - k]), float(energies[-1])))


def _window_indices(energies, window):
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"degenerate window {window}")
    idx = np.flatnonzero((energies >= lo) & (energies <= hi))
    if idx.size < 2:
        raise ValueError(f"window {window} contains fewer than 2 samples")
    return idx


def _fit_window_lines(y, energies, window):
    """Least-squares line per column of y over the window; returns the
    evaluator pieces (slope, intercept, center)."""
    idx = _window_indices(energies, window)
    e = energies[idx]
    center = e.mean()
    x = e - center
    sxx = float(x @ x)
    yw = y[idx]
    slope = (x @ yw) / sxx
    intercept = yw.mean(axis=0)
    return slope, intercept, center


def _normalize_matrix(y, energies, pre_edge, post_edge):
    """Normalize each column of y: subtract the pre-edge line, divide by the
    edge step, i.e. the (post-edge minus pre-edge) line difference evaluated
    at the midpoint between the two windows.

    Returns (normalized, step, flat) where flat marks columns with no usable
    step; those columns are left unscaled.
    """
    if not pre_edge[1] < post_edge[0]:
        raise ValueError("pre-edge window must lie entirely below the post-edge window")
    pre_s, pre_i, pre_c = _fit_window_lines(y, energies, pre_edge)
    post_s, post_i, post_c = _fit_window_lines(y, energies, post_edge)
    mid = 0.5 * (pre_edge[1] + post_edge[0])
    step = (post_i + post_s * (mid - post_c)) - (pre_i + pre_s * (mid - pre_c))
    scale = np.maximum(np.abs(y).max(axis=0), 1.0)
    flat = np.abs(step) <= 1e-12 * scale
    pre_line = pre_i[None, :] + pre_s[None, :] * (energies - pre_c)[:, None]
    normalized = (y - pre_line) / np.where(flat, 1.0, step)[None, :]
    return normalized, step, flat


def normalize_spectrum(raw, energies, pre_edge=None, post_edge=None) -> np.ndarray:
    """Normalize one spectrum to ~0 in the pre-edge window and ~1 past the edge.

    Fits a least-squares line in each window, subtracts the pre-edge line and
    divides by the edge step. Invariant to affine rescaling of the input.
    """
    raw = np.asarray(raw, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    if raw.shape != energies.shape:
        raise ValueError("spectrum and energy axis differ in length")
    if pre_edge is None or post_edge is None:
        d_pre, d_post = default_windows(energies)
        pre_edge = pre_edge or d_pre
        post_edge = post_edge or d_post
    normalized, _, flat = _normalize_matrix(raw[:, None], energies, pre_edge, post_edge)
    if flat[0]:
        raise FlatSpectrumError("spectrum has no edge step in the given windows")
    return normalized[:, 0]


def _edge_positions_matrix(spec, energies):
    """Energy of the first upward 0.5 crossing per column, linearly
    interpolated; returns (positions, found)."""
    below = spec < 0.5
    up = below[:-1] & ~below[1:]
    found = up.any(axis=0)
    first = np.argmax(up, axis=0)
    cols = np.arange(spec.shape[1])
    s0 = spec[first, cols]
    s1 = spec[first + 1, cols]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (0.5 - s0) / (s1 - s0)
    pos = energies[first] + frac * (energies[first + 1] - energies[first])
    pos = np.where(found, pos, 0.0)
    return pos, found


def edge_position(spec, energies) -> float:
    """Energy of the first upward 0.5 crossing of a normalized spectrum."""
    spec = np.asarray(spec, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    if spec.shape != energies.shape:
        raise ValueError("spectrum and energy axis differ in length")
    pos, found = _edge_positions_matrix(spec[:, None], energies)
    if not found[0]:
        raise NoEdgeError("spectrum never crosses 0.5 upward")
    return float(pos[0])


def _simplex_lstsq(refs, y):
    """Exact nonnegative sum-to-one least squares by active-set enumeration.

    Solves min ||refs @ w - y||^2 with w >= 0, sum(w) = 1 for every column
    of y at once. Each support set is solved through its KKT system (one
    small matrix shared by all pixels); singular supports fall back to the
    minimal-norm solution and flag non-uniqueness.

    Returns (weights (refs, cols), sse (cols,), nonunique (cols,)).
    """
    t, p = refs.shape
    if p > MAX_REFERENCES:
        raise ValueError(f"at most {MAX_REFERENCES} references supported, got {p}")
    ncol = y.shape[1]
    gram = refs.T @ refs
    rty = refs.T @ y
    yy = np.einsum("tc,tc->c", y, y)
    best = np.full(ncol, np.inf)
    weights = np.zeros((p, ncol))
    nonunique = np.zeros(ncol, dtype=bool)
    for size in range(1, p + 1):
        for support in itertools.combinations(range(p), size):
            s = list(support)
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = gram[np.ix_(s, s)]
            kkt[:size, size] = 1.0
            kkt[size, :size] = 1.0
            rhs = np.vstack([rty[s], np.ones(ncol)])
            singular = False
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
                singular = True
            ws = sol[:size]
            feasible = (ws >= -1e-12).all(axis=0)
            obj = (yy - 2.0 * np.einsum("sc,sc->c", ws, rty[s])
                   + np.einsum("sc,st,tc->c", ws, gram[np.ix_(s, s)], ws))
            with np.errstate(invalid="ignore"):
                margin = np.where(np.isfinite(best),
                                  best - 1e-9 * (1.0 + np.abs(best)), np.inf)
            improve = feasible & (obj < margin)
            # a tie at the optimum with materially different weights means
            # the minimizer is not unique (rank-deficient reference matrix)
            tie = (feasible & ~improve & np.isfinite(best)
                   & (obj <= best + 1e-9 * (1.0 + np.abs(best))))
            if np.any(tie):
                cols = np.flatnonzero(tie)
                full = np.zeros((p, cols.size))
                full[np.ix_(s, range(cols.size))] = ws[:, cols]
                differs = np.abs(full - weights[:, cols]).max(axis=0) > 1e-8
                nonunique[cols] |= differs
            if np.any(improve):
                cols = np.flatnonzero(improve)
                best[cols] = obj[cols]
                weights[:, cols] = 0.0
                weights[np.ix_(s, cols)] = ws[:, cols]
                nonunique[cols] = singular
    return weights, np.maximum(best, 0.0), nonunique


def fit_phase_fractions(spec, lib: SpectrumLibrary, energies=None) -> PhaseFit:
    """Fit a normalized spectrum as a convex mixture of the library references.

    The weights minimize the squared misfit subject to w >= 0 and sum(w) = 1
    (solved exactly); the fitted state is the weight-averaged state value.
    Pass ``energies`` to resample the library onto the spectrum's axis first.
    """
    spec = np.asarray(spec, dtype=np.float64)
    if energies is not None:
        lib = lib.resample(energies)
    if spec.shape != (lib.energies.size,):
        raise ValueError("spectrum length does not match the library axis")
    w, sse, nonuniq = _simplex_lstsq(lib.references, spec[:, None])
    return PhaseFit(weights=w[:, 0],
                    state=float(lib.states @ w[:, 0]),
                    residual=float(np.sqrt(sse[0] / spec.size)),
                    nonunique=bool(nonuniq[0]))


def chemical_map(stack: ImageStack, lib: SpectrumLibrary, mode="phase-fit",
                 pre_edge=None, post_edge=None) -> ChemicalMap:
    """Per-pixel chemical map of a stack with an energy axis.

    Each pixel spectrum is normalized, then either its edge position is
    extracted or it is fitted against the library references (normalized
    with the same windows, after resampling onto the stack's axis). Pixels
    with no edge step, or no upward crossing in edge mode, are marked
    invalid; more than 50% invalid pixels is a hard failure.
    """
    if stack.energies is None:
        raise ValueError("chemical mapping needs a stack with an energy axis")
    if mode not in ("edge-position", "phase-fit"):
        raise ValueError(f"unknown map mode {mode!r}")
    energies = stack.energies
    if pre_edge is None or post_edge is None:
        d_pre, d_post = default_windows(energies)
        pre_edge = pre_edge or d_pre
        post_edge = post_edge or d_post
    y = stack.data.reshape(stack.frames, -1)
    normalized, _, flat = _normalize_matrix(y, energies, pre_edge, post_edge)
    npix = y.shape[1]
    residual = np.zeros(npix)
    if mode == "edge-position":
        values, found = _edge_positions_matrix(normalized, energies)
        valid = found & ~flat
    else:
        lib = lib.resample(energies)
        refs_norm, _, ref_flat = _normalize_matrix(lib.references, energies,
                                                   pre_edge, post_edge)
        if np.any(ref_flat):
            raise FlatSpectrumError(
                "a library reference has no edge step in the given windows")
        w, sse, _ = _simplex_lstsq(refs_norm, normalized)
        values = lib.states @ w
        residual = np.sqrt(sse / energies.size)
        valid = ~flat
    invalid_frac = 1.0 - valid.mean()
    if invalid_frac > 0.5:
        raise ValueError(
            f"{invalid_frac:.0%} of pixels failed to fit; input unusable")
    values = np.where(valid, values, 0.0)
    shape = (stack.height, stack.width)
    return ChemicalMap(values=values.reshape(shape),
                       residual=residual.reshape(shape),
                       valid=valid.reshape(shape), mode=mode)


# --- container I/O -----------------------------------------------------------

def save_library(lib: SpectrumLibrary, csv_path, states_path) -> None:
    """Write a library as ``energy,<label>,...`` CSV plus a label->state JSON."""
    lines = ["energy," + ",".join(lib.labels)]
    for i in range(lib.energies.size):
        row = [repr(float(lib.energies[i]))]
        row += [repr(float(v)) for v in lib.references[i]]
        lines.append(",".join(row))
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    states = {label: float(state) for label, state in zip(lib.labels, lib.states)}
    Path(states_path).write_text(json.dumps(states, indent=2) + "\n",
                                 encoding="utf-8")


def load_library(csv_path, states_path) -> SpectrumLibrary:
    """Load a library saved by :func:`save_library`."""
    text = Path(csv_path).read_text(encoding="utf-8").strip().splitlines()
    header = [h.strip() for h in text[0].split(",")]
    if not header or header[0] != "energy":
        raise ValueError(f"{csv_path}: first CSV column must be 'energy'")
    labels = header[1:]
    rows = np.array([[float(v) for v in line.split(",")] for line in text[1:]])
    states_map = json.loads(Path(states_path).read_text(encoding="utf-8"))
    missing = [l for l in labels if l not in states_map]
    if missing:
        raise ValueError(f"states file lacks entries for {missing}")
    return SpectrumLibrary(energies=rows[:, 0], references=rows[:, 1:],
                           states=np.array([states_map[l] for l in labels]),
                           labels=labels)


def save_map(cmap: ChemicalMap, prefix) -> None:
    """Write a chemical map as value/residual/valid stack containers plus a
    ``<prefix>_fit.json`` stats file."""
    prefix = Path(prefix)
    h, w = cmap.values.shape

    def one(arr, path):
        save_stack(from_matrix(arr.reshape(-1, 1).astype(np.float64), w, h), path)

    one(cmap.values, prefix)
    one(cmap.residual, prefix.parent / (prefix.name + "_residual"))
    one(cmap.valid.astype(np.float64), prefix.parent / (prefix.name + "_valid"))
    valid_res = cmap.residual[cmap.valid]
    stats = {
        "mode": cmap.mode,
        "valid_fraction": float(cmap.valid.mean()),
        "residual_mean": float(valid_res.mean()) if valid_res.size else 0.0,
        "residual_max": float(valid_res.max()) if valid_res.size else 0.0,
    }
    (prefix.parent / (prefix.name + "_fit.json")).write_text(
        json.dumps(stats, indent=2) + "\n", encoding="utf-8")


def load_map(prefix) -> ChemicalMap:
    """Load a chemical map written by :func:`save_map`."""
    prefix = Path(prefix)
    values = load_stack(prefix).data[0]
    residual = load_stack(prefix.parent / (prefix.name + "_residual")).data[0]
    valid = load_stack(prefix.parent / (prefix.name + "_valid")).data[0] > 0.5
    meta_path = prefix.parent / (prefix.name + "_fit.json")
    mode = "phase-fit"
    if meta_path.exists():
        mode = json.loads(meta_path.read_text(encoding="utf-8")).get("mode", mode)
    return ChemicalMap(values=values, residual=residual, valid=valid, mode=mode)


# Perceptually-ordered dark-to-bright colormap anchors (interpolated to 256
# entries); invalid pixels render black.
_CMAP_ANCHORS = np.array([
    (0.267, 0.005, 0.329), (0.283, 0.141, 0.458), (0.254, 0.265, 0.530),
    (0.207, 0.372, 0.553), (0.164, 0.471, 0.558), (0.128, 0.567, 0.551),
    (0.135, 0.659, 0.518), (0.267, 0.749, 0.441), (0.478, 0.821, 0.318),
    (0.741, 0.873, 0.150), (0.993, 0.906, 0.144),
])


def colormap_lut() -> np.ndarray:
    """The fixed 256 x 3 uint8 lookup table used for all map renders."""
    xs = np.linspace(0.0, 1.0, _CMAP_ANCHORS.shape[0])
    grid = np.linspace(0.0, 1.0, 256)
    lut = np.column_stack([
        np.interp(grid, xs, _CMAP_ANCHORS[:, c]) for c in range(3)
    ])
    return np.round(lut * 255.0).astype(np.uint8)


def render_map_png(cmap: ChemicalMap, path, vmin=None, vmax=None) -> None:
    """Render a chemical map to an 8-bit PNG with the fixed colormap."""
    from PIL import Image

    vals = cmap.values
    finite = vals[cmap.valid]
    if vmin is None:
        vmin = float(finite.min()) if finite.size else 0.0
    if vmax is None:
        vmax = float(finite.max()) if finite.size else 1.0
    span = vmax - vmin if vmax > vmin else 1.0
    norm = np.clip((vals - vmin) / span, 0.0, 1.0)
    idx = np.round(norm * 255.0).astype(np.uint8)
    rgb = colormap_lut()[idx]
    rgb[~cmap.valid] = 0
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
