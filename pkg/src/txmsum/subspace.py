"""Thin and randomized SVD of stack matrices, singular-value hard
thresholding, and unbiased-risk-based selection of the retained rank."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Use the n x n Gram eigendecomposition instead of LAPACK's full SVD once the
# matrix is this many times taller than wide; stack matrices are ~1000x taller.
_GRAM_RATIO = 4

_TIE_REL = 1e-9  # singular values closer than this (relative) count as tied


@dataclass
class SubspaceDecomposition:
    """Orthonormal spatial/temporal factors and singular values.

    ``u`` is (rows, r) with orthonormal columns, ``v`` is (cols, r) with
    orthonormal columns and ``s`` is non-increasing and non-negative, so the
    source matrix is approximately u @ diag(s) @ v.T. ``full_rank`` is
    min(rows, cols) of the source matrix and ``total_energy`` its squared
    Frobenius norm; both let risk estimates account for a truncated tail
    when r < full_rank (randomized factorizations).
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    total_energy: float
    full_rank: int

    @property
    def rank(self) -> int:
        return self.s.size

    @property
    def is_exact(self) -> bool:
        return self.rank == self.full_rank


@dataclass(frozen=True)
class ThresholdConfig:
    """How to pick the retained subspace: automatic risk minimization,
    a fixed rank, or a fixed singular-value threshold."""

    mode: str = "sure-auto"
    rank: int | None = None
    delta: float | None = None

    def __post_init__(self):
        if self.mode not in ("sure-auto", "fixed-rank", "fixed-threshold"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if self.mode == "fixed-rank":
            if self.rank is None or self.rank < 1:
                raise ValueError("fixed-rank mode needs rank >= 1")
        if self.mode == "fixed-threshold":
            if self.delta is None or self.delta < 0:
                raise ValueError("fixed-threshold mode needs delta >= 0")

    @classmethod
    def sure_auto(cls) -> "ThresholdConfig":
        return cls(mode="sure-auto")

    @classmethod
    def fixed_rank(cls, rank: int) -> "ThresholdConfig":
        return cls(mode="fixed-rank", rank=int(rank))

    @classmethod
    def fixed_threshold(cls, delta: float) -> "ThresholdConfig":
        return cls(mode="fixed-threshold", delta=float(delta))


@dataclass
class SureReport:
    """Risk curve over candidate thresholds and the selected operating point."""

    deltas: np.ndarray
    sure: np.ndarray
    selected_delta: float
    selected_k: int
    empty_subspace: bool = False
    mode: str = "sure-auto"
    true_mse: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {
            "delta": [float(x) for x in np.atleast_1d(self.deltas)],
            "sure": [float(x) for x in np.atleast_1d(self.sure)],
            "selected_delta": float(self.selected_delta),
            "selected_k": int(self.selected_k),
            "empty_subspace": bool(self.empty_subspace),
            "mode": self.mode,
        }
        if self.true_mse is not None:
            d["true_mse"] = [float(x) for x in np.atleast_1d(self.true_mse)]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _fix_signs(u, v):
    """Make the largest-magnitude entry of each u column positive (and flip
    the matching v column), so factorizations are reproducible."""
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    return u * signs, v * signs


def _svd_via_gram(a):
    # cols x cols eigendecomposition, then recover u from a thin QR of A V;
    # much cheaper than gesdd when rows >> cols.
    g = a.T @ a
    w, vecs = np.linalg.eigh(g)
    order = np.argsort(w)[::-1]
    w = w[order]
    vecs = np.ascontiguousarray(vecs[:, order])
    s = np.sqrt(np.clip(w, 0.0, None))
    q, r = np.linalg.qr(a @ vecs)
    u = q * np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return u, s, vecs


def svd_thin(a) -> SubspaceDecomposition:
    """Exact thin SVD with a deterministic sign convention.

    Factorization failures from the underlying solver are raised, never
    silently truncated.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite values")
    m, n = a.shape
    energy = float(np.vdot(a, a))
    if m >= _GRAM_RATIO * n:
        u, s, v = _svd_via_gram(a)
    else:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        v = vt.T
    u, v = _fix_signs(u, v)
    return SubspaceDecomposition(u=u, s=s, v=np.ascontiguousarray(v),
                                 total_energy=energy, full_rank=min(m, n))


def truncate(dec: SubspaceDecomposition, k: int) -> np.ndarray:
    """Rank-k reconstruction: sum of the k leading singular triplets."""
    if not 1 <= k <= dec.rank:
        raise ValueError(f"rank {k} outside 1..{dec.rank}")
    return (dec.u[:, :k] * dec.s[:k]) @ dec.v[:, :k].T


def _spread_ties(s):
    """Push tied singular values apart before divergence evaluation.

    The divergence has removable singularities at repeated values; enforce
    a minimum descending gap of _TIE_REL * s_max.
    """
    s = np.asarray(s, dtype=np.float64).copy()
    if s.size < 2:
        return s
    tol = _TIE_REL * max(float(s[0]), 1e-300)
    for i in range(1, s.size):
        if s[i] > s[i - 1] - tol:
            s[i] = s[i - 1] - tol
    return s


def sure_hard_threshold(s, m, n, sigma, delta, *, full_rank=None,
                        total_energy=None) -> float:
    """Unbiased estimate of E||xhat - x||_F^2 for hard thresholding at delta.

    ``s`` are the observed singular values of an m x n matrix with i.i.d.
    Gaussian noise of std ``sigma``; the estimator keeps components with
    singular value above ``delta``. The divergence of the spectral hard
    threshold has the closed form

        div = sum_{s_i > delta} (1 + |m - n|)
              + 2 * sum_{s_i > delta} sum_{j != i} s_i^2 / (s_i^2 - s_j^2)

    and the risk estimate is -m*n*sigma^2 + sum_{s_i <= delta} s_i^2
    + 2*sigma^2*div. When only the leading part of the spectrum is known
    (``full_rank``/``total_energy`` from a truncated factorization), the
    unseen tail is treated as zero singular values carrying the residual
    energy.

    ``delta`` must not coincide with any singular value; the candidate grid
    used by :func:`select_rank` guarantees that.
    """
    s = np.asarray(s, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sure needs sigma > 0; use fixed-rank selection instead")
    r_avail = s.size
    r_full = r_avail if full_rank is None else int(full_rank)
    n_tail = r_full - r_avail
    tail_energy = 0.0
    if total_energy is not None:
        tail_energy = max(0.0, float(total_energy) - float(np.sum(s * s)))
    keep = s > delta
    k = int(np.count_nonzero(keep))
    resid = float(np.sum(s[~keep] ** 2)) + tail_energy
    pair_sum = 0.0
    if k:
        sp = _spread_ties(s)
        s2 = sp * sp
        diff = s2[keep][:, None] - s2[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = s2[keep][:, None] / diff
        ratio[~np.isfinite(ratio)] = 0.0  # the j == i cells
        pair_sum = float(ratio.sum()) + k * n_tail
    div = k * (1.0 + abs(m - n)) + 2.0 * pair_sum
    return float(-m * n * sigma**2 + resid + 2.0 * sigma**2 * div)


def _candidate_grid(s):
    """Ascending candidate thresholds: midpoints between consecutive distinct
    singular values, plus one point below the minimum and one above the
    maximum. Never lands on a singular value."""
    s = np.asarray(s, dtype=np.float64)
    smax = float(s[0]) if s.size else 0.0
    tol = _TIE_REL * max(smax, 1e-300)
    distinct = [float(s[0])] if s.size else []
    for x in s[1:]:
        if distinct[-1] - x >= tol:
            distinct.append(float(x))
    asc = distinct[::-1]
    lo = 0.5 * asc[0] if asc[0] > 0 else -tol
    hi = 1.5 * asc[-1] if asc[-1] > 0 else 1.0
    mids = [0.5 * (a + b) for a, b in zip(asc[:-1], asc[1:])]
    return np.array([lo] + mids + [hi])


def _true_mse_curve(dec, ground_truth, grid):
    x = np.asarray(ground_truth, dtype=np.float64)
    proj = dec.u.T @ x                      # r x cols
    diag = np.einsum("rt,tr->r", proj, dec.v)  # u_k' X v_k per component
    x_energy = float(np.vdot(x, x))
    s2 = dec.s**2
    mse = np.empty(grid.size)
    for i, delta in enumerate(grid):
        keep = dec.s > delta
        mse[i] = x_energy + float(np.sum(s2[keep])) - 2.0 * float(
            np.sum(dec.s[keep] * diag[keep]))
    return mse


def select_rank(dec: SubspaceDecomposition, sigma: float,
                cfg: ThresholdConfig | None = None,
                ground_truth=None) -> SureReport:
    """Pick the retained rank for a decomposition.

    In ``sure-auto`` mode the risk estimate is evaluated on the candidate
    grid and the minimizing threshold returned, ties broken toward the
    larger threshold (smaller rank). ``ground_truth`` (test use) adds the
    true MSE curve over the same grid to the report.
    """
    if cfg is None:
        cfg = ThresholdConfig.sure_auto()
    s = dec.s
    r = s.size
    if cfg.mode == "fixed-rank":
        k = cfg.rank
        if not 1 <= k <= r:
            raise ValueError(f"fixed rank {k} outside 1..{r}")
        delta = 0.5 * (s[k - 1] + s[k]) if k < r else 0.5 * s[k - 1]
        return SureReport(deltas=np.array([]), sure=np.array([]),
                          selected_delta=float(delta), selected_k=int(k),
                          empty_subspace=False, mode=cfg.mode)
    if cfg.mode == "fixed-threshold":
        k = int(np.count_nonzero(s > cfg.delta))
        return SureReport(deltas=np.array([]), sure=np.array([]),
                          selected_delta=float(cfg.delta), selected_k=k,
                          empty_subspace=(k == 0), mode=cfg.mode)
    m = dec.u.shape[0]
    n = dec.v.shape[0]
    grid = _candidate_grid(s)
    sure = np.array([
        sure_hard_threshold(s, m, n, sigma, d, full_rank=dec.full_rank,
                            total_energy=dec.total_energy)
        for d in grid
    ])
    pick = int(np.flatnonzero(sure == sure.min())[-1])  # ties -> larger delta
    delta = float(grid[pick])
    k = int(np.count_nonzero(s > delta))
    true_mse = None
    if ground_truth is not None:
        true_mse = _true_mse_curve(dec, ground_truth, grid)
    return SureReport(deltas=grid, sure=sure, selected_delta=delta,
                      selected_k=k, empty_subspace=(k == 0),
                      mode=cfg.mode, true_mse=true_mse)


def _randomized_from_columns(make_pass, m, n, k, p, q, seed) -> SubspaceDecomposition:
    """Randomized range-finder SVD fed by a column iterator factory.

    ``make_pass()`` must return a fresh iterator of (t, column) pairs in
    index order; it is consumed 2*q + 2 times. All cross-column reductions
    run one column at a time in index order, so the result is bit-identical
    however the columns are produced (in memory, or streamed from disk in
    any block size).
    """
    if k < 1:
        raise ValueError("target rank must be >= 1")
    if p < 0 or q < 0:
        raise ValueError("oversampling and power iterations must be >= 0")
    l = k + p
    if l > min(m, n):
        raise ValueError(f"k + p = {l} exceeds min(m, n) = {min(m, n)}")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((n, l))
    y = np.zeros((m, l))
    tmp = np.empty((m, l))
    energy = 0.0
    for t, col in make_pass():
        energy += float(col @ col)
        np.multiply(col[:, None], omega[t], out=tmp)
        y += tmp
    for _ in range(q):
        qmat, _ = np.linalg.qr(y)
        z = np.empty((n, l))
        for t, col in make_pass():
            z[t] = col @ qmat
        y = np.zeros((m, l))
        for t, col in make_pass():
            np.multiply(col[:, None], z[t], out=tmp)
            y += tmp
    qmat, _ = np.linalg.qr(y)
    qt = np.ascontiguousarray(qmat.T)
    b = np.empty((l, n))
    for t, col in make_pass():
        b[:, t] = qt @ col
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = qmat @ np.ascontiguousarray(ub[:, :k])
    v = np.ascontiguousarray(vt[:k].T)
    u, v = _fix_signs(u, v)
    return SubspaceDecomposition(u=u, s=s[:k].copy(), v=v,
                                 total_energy=energy, full_rank=min(m, n))


def randomized_svd(a, k, p=10, q=2, seed=0) -> SubspaceDecomposition:
    """Seeded randomized rank-k SVD (range finder with power iterations)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    m, n = a.shape

    def make_pass():
        return ((t, np.ascontiguousarray(a[:, t])) for t in range(n))

    return _randomized_from_columns(make_pass, m, n, k, p, q, seed)
