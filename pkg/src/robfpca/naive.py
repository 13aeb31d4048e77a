"""Naive robust functional PCA for complete data, and the classical baseline.

The naive estimator cleans each curve with a robust smoother, computes
ordinary robust principal components of the cleaned curves, smooths the
directions in a B-spline basis chosen by GCV and orthonormalizes them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from robfpca import robust
from robfpca.data import LongitudinalDataset
from robfpca.model import FpcaModel
from robfpca.smoothing import LoessConfig, gcv_knot_count, make_basis, robust_loess_1d, smooth_with_basis

CLEAN_C = 4.0


class IncompleteDataError(ValueError):
    """The estimator needs complete data."""


def _require_complete(data: LongitudinalDataset, name):
    if not data.is_complete:
        raise IncompleteDataError(
            f"the {name} estimator needs complete data ({data.n_observed} of "
            f"{data.n * data.p} cells observed); use the mm estimator for incomplete data"
        )


@dataclass(frozen=True)
class CleanedMatrix:
    """Cleaned curves with the local centers (n x p) and row scales (n) used."""

    values: np.ndarray
    row_center: np.ndarray
    row_scale: np.ndarray


def clean_rows(data: LongitudinalDataset, c=CLEAN_C, span=0.3, degree=2):
    """Shrink each curve toward its robust Loess fit with the bisquare psi.

    ``x~_ij = mu~_ij + s_i psi((x_ij - mu~_ij) / s_i)`` where ``mu~_i`` is the
    robust Loess fit of row ``i`` and ``s_i`` the tau-scale of its
    residuals. Rows with ``s_i = 0`` are returned unchanged.
    """
    _require_complete(data, "naive")
    X = np.asarray(data.values, dtype=float)
    centers = robust_loess_1d(data.grid, X, LoessConfig(span=span, degree=degree))
    if centers.ndim == 1:
        centers = centers[None, :]
    R = X - centers
    scales = np.array([robust.tau_scale(r).value for r in R])
    cleaned = X.copy()
    ok = scales > 0
    s = scales[ok, None]
    cleaned[ok] = centers[ok] + s * robust.psi_bisquare(R[ok] / s, c)
    return CleanedMatrix(cleaned, centers, scales)


def _weighted_subspace(X, w, q):
    sw = w.sum()
    center = w @ X / sw
    Xc = X - center
    C = (Xc * w[:, None]).T @ Xc / sw
    p = C.shape[0]
    _, vecs = linalg.eigh(C, subset_by_index=[p - q, p - 1])
    return center, vecs[:, ::-1]


def _residual_norms(X, center, V):
    Xc = X - center
    return np.linalg.norm(Xc - (Xc @ V) @ V.T, axis=1)


def _spatial_median(X, tol=1e-10, max_iter=500):
    m = np.median(X, axis=0)
    for _ in range(max_iter):
        d = np.linalg.norm(X - m, axis=1)
        d = np.maximum(d, 1e-12 * max(1.0, float(np.max(d))))
        w = 1.0 / d
        m_new = w @ X / w.sum()
        if np.linalg.norm(m_new - m) <= tol * (1.0 + np.linalg.norm(m)):
            return m_new
        m = m_new
    return m


def _starts(X, q):
    center = X.mean(axis=0)
    yield center, _weighted_subspace(X, np.ones(X.shape[0]), q)[1]
    med = _spatial_median(X)
    Z = X - med
    norms = np.linalg.norm(Z, axis=1)
    Z = Z[norms > 0] / norms[norms > 0, None]
    if Z.shape[0] > q:
        _, vecs = _weighted_subspace(np.vstack([Z, -Z]), np.ones(2 * Z.shape[0]), q)
        yield med, vecs


def _mscale(r):
    return robust.m_scale(r, robust.SCALE_DELTA, robust.SCALE_C).value


@dataclass
class SmPcaResult:
    center: np.ndarray
    directions: np.ndarray
    scores: np.ndarray
    unexplained_ratio: float
    scale_trace: list
    converged: bool


def sm_robust_pca(X, q, tol=1e-6, max_iter=100):
    """Principal subspace minimizing the bisquare M-scale of residual norms.

    Iteratively reweighted PCA with weights ``W(r_i / S)``: each step does
    a weighted mean and weighted covariance eigendecomposition. Since
    ``rho(sqrt(u))`` is concave the M-scale never increases. Two starts
    are run (classical PCA and spherical PCA around the spatial median)
    and the one with the smaller final scale is kept.

    Returns
    -------
    SmPcaResult
        ``unexplained_ratio = S(r^(q)) / S(r^(0))`` with
        ``r^(0)_i = ||x_i - center||``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if not 1 <= q < n:
        raise ValueError("need 1 <= q < n")
    q = min(q, p)
    best = None
    floor = 1e-12 * max(_mscale(np.linalg.norm(X - np.median(X, axis=0), axis=1)), 1e-300)
    for center, V in _starts(X, q):
        r = _residual_norms(X, center, V)
        S = _mscale(r)
        trace = [S]
        converged = S == 0.0
        for _ in range(max_iter):
            if S == 0.0:
                break
            w = robust.weight_bisquare(r / S, robust.SCALE_C)
            if w.sum() <= 0:
                break
            c_new, V_new = _weighted_subspace(X, w, q)
            r_new = _residual_norms(X, c_new, V_new)
            S_new = _mscale(r_new)
            if S_new > S:
                # increase only from rounding near an exact fit
                converged = S <= floor or S_new - S <= tol * S
                break
            center, V, r = c_new, V_new, r_new
            trace.append(S_new)
            rel = (S - S_new) / S
            S = S_new
            if rel < tol:
                converged = True
                break
        if best is None or S < best[2]:
            best = (center, V, S, trace, converged)
    center, V, S, trace, converged = best
    if not converged:
        warnings.warn("S-M principal components did not converge; returning the best iterate",
                      RuntimeWarning, stacklevel=2)
    s0 = _mscale(np.linalg.norm(X - center, axis=1))
    ratio = S / s0 if s0 > 0 else 0.0
    scores = (X - center) @ V
    return SmPcaResult(center, V, scores, float(ratio), trace, converged)


def orthonormalize(alpha, H):
    """Gram-Schmidt on the columns of ``H = B @ alpha`` (alpha is m x q), carried to ``alpha``."""
    Q, R = np.linalg.qr(H)
    sign = np.sign(np.diag(R))
    sign[sign == 0] = 1.0
    Q, R = Q * sign, R * sign[:, None]
    if np.any(np.abs(np.diag(R)) <= 1e-12 * np.abs(R).max()):
        raise ValueError("smoothed directions are linearly dependent")
    return linalg.solve_triangular(R, alpha.T, trans="T").T, Q


def fit_naive(data: LongitudinalDataset, q=2, knot_candidates=None, c=CLEAN_C, span=0.3):
    """Naive estimator: clean, robust PCA, spline smoothing, orthonormalization.

    Scores are bisquare regressions (tuning ``c``) of each original curve on
    the final directions.
    """
    _require_complete(data, "naive")
    grid = np.asarray(data.grid, dtype=float)
    cleaned = clean_rows(data, c=c, span=span)
    sm = sm_robust_pca(cleaned.values, q)
    nk = gcv_knot_count(grid, sm.directions, knot_candidates)
    basis = make_basis(grid, n_knots=nk)
    coef, H = smooth_with_basis(basis, sm.directions)
    alpha, E = orthonormalize(coef, H)
    alpha = alpha.T
    E = basis.B @ alpha.T
    Z = np.asarray(data.values) - sm.center
    scores = robust.bisquare_regression_rows(E, Z, c=c)
    bad = ~np.all(np.isfinite(scores), axis=1)
    if bad.any():
        scores[bad] = Z[bad] @ E
    return FpcaModel(
        grid=grid.copy(),
        mu=sm.center,
        directions=E,
        scores=scores,
        estimator="naive",
        alpha=alpha,
        knots=np.asarray(basis.knots, dtype=float).copy(),
        degree=basis.degree,
        explained=float(np.clip(1.0 - sm.unexplained_ratio, 0.0, 1.0)),
        case_ids=tuple(data.case_ids),
        flags={"n_knots": int(nk), "sm_converged": bool(sm.converged), "sm_iterations": len(sm.scale_trace) - 1},
    )


def fit_classical(data: LongitudinalDataset, q=2):
    """Column-mean center, leading right singular vectors, least-squares scores."""
    _require_complete(data, "classical")
    X = np.asarray(data.values, dtype=float)
    n, p = X.shape
    if not 1 <= q <= min(n, p):
        raise ValueError(f"q must lie in [1, {min(n, p)}]")
    mu = X.mean(axis=0)
    Xc = X - mu
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    E = Vt[:q].T.copy()
    for k in range(q):
        E[:, k] = _orient(E[:, k])
    total = float(np.sum(s**2))
    return FpcaModel(
        grid=np.asarray(data.grid, dtype=float).copy(),
        mu=mu,
        directions=E,
        scores=Xc @ E,
        estimator="classical",
        explained=float(np.sum(s[:q] ** 2) / total) if total > 0 else float("nan"),
        case_ids=tuple(data.case_ids),
    )


def _orient(v):
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v
