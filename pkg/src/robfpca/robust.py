"""Scalar robust building blocks.

Bisquare rho/psi/weight family, M-estimators of location and scale, the
tau-scale, the Qn scale of Rousseeuw and Croux, Gnanadesikan-Kettenring
pairwise covariances, L1 regression and bisquare regression M-estimates.

Conventions used throughout the package:

* ``rho`` is the *normalized* bisquare, ``rho(t) = 1 - (1 - (t/c)^2)^3`` for
  ``|t| <= c`` and 1 beyond, so that ``rho(inf) = 1``.
* ``psi(t) = t (1 - (t/c)^2)^2`` is ``(c^2 / 6) rho'(t)``; it has unit slope
  at the origin.
* ``W(t) = psi(t) / t = (1 - (t/c)^2)^2`` with ``W(0) = 1``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

MAD_CONSTANT = 1.4826

#: Tuning for the M-location (95% Gaussian efficiency).
LOCATION_C = 4.685
#: M-scale with breakdown 0.5, consistent at the Gaussian.
SCALE_C = 1.548
SCALE_DELTA = 0.5
#: Second rho of the tau-scale.
TAU_C2 = 6.08

QN_CONSTANT = 2.2219
# Finite-sample factors for n = 2..9 (Croux and Rousseeuw, 1992).
_QN_SMALL = {2: 0.399, 3: 0.994, 4: 0.512, 5: 0.844, 6: 0.611, 7: 0.857, 8: 0.669, 9: 0.872}
_QN_BRUTE_MAX = 3000


class RankDeficientError(ValueError):
    """Raised when a regression design does not have full column rank."""

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


@dataclass(frozen=True)
class RobustScaleResult:
    value: float
    n_used: int

    def __float__(self):
        return float(self.value)


def _check_finite(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("bisquare functions need finite arguments")
    return t


def rho_bisquare(t, c):
    """Normalized bisquare rho, vectorized. Values lie in [0, 1]."""
    u = np.minimum(np.abs(np.asarray(t, dtype=float)) / c, 1.0) ** 2
    return 1.0 - (1.0 - u) ** 3


def psi_bisquare(t, c):
    t = np.asarray(t, dtype=float)
    u = (t / c) ** 2
    return np.where(u < 1.0, t * (1.0 - u) ** 2, 0.0)


def weight_bisquare(t, c):
    u = (np.asarray(t, dtype=float) / c) ** 2
    return np.where(u < 1.0, (1.0 - u) ** 2, 0.0)


def bisquare(t, c):
    """Evaluate ``(rho, psi, weight)`` of the bisquare family at ``t``.

    Raises ``ValueError`` for non-finite ``t`` or non-positive ``c``.
    """
    if not c > 0:
        raise ValueError("tuning constant must be positive")
    t = _check_finite(t)
    return rho_bisquare(t, c), psi_bisquare(t, c), weight_bisquare(t, c)


def _finite_sample(xs, min_n, what):
    x = np.asarray(xs, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size < min_n:
        raise ValueError(f"{what} needs at least {min_n} finite values, got {x.size}")
    return x


def mad(xs, center=None):
    """Normalized median absolute deviation."""
    x = np.asarray(xs, dtype=float)
    if center is None:
        center = np.median(x)
    return MAD_CONSTANT * float(np.median(np.abs(x - center)))


def m_location(xs, c=LOCATION_C, tol=1e-10, max_iter=200):
    """Bisquare M-estimator of location with the normalized MAD as auxiliary scale.

    Solved by iterative reweighting started at the median. Returns the
    median when the MAD is zero.
    """
    x = _finite_sample(xs, 1, "m_location")
    med = float(np.median(x))
    s = mad(x, med)
    if s == 0.0:
        return med
    m = med
    for _ in range(max_iter):
        w = weight_bisquare((x - m) / s, c)
        m_new = float(np.sum(w * x) / np.sum(w))
        if abs(m_new - m) <= tol * s:
            return m_new
        m = m_new
    return m


def m_scale(xs, delta=SCALE_DELTA, c=SCALE_C):
    """Bisquare M-scale: the ``s`` solving ``mean(rho(x / s)) = delta``.

    The values are used as given (no centering). Returns zero when the
    fraction of non-zero values does not exceed ``delta``.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    x = np.abs(_finite_sample(xs, 2, "m_scale"))
    n = x.size
    if np.count_nonzero(x) <= delta * n:
        return RobustScaleResult(0.0, n)

    def excess(s):
        return float(np.mean(rho_bisquare(x / s, c))) - delta

    # bracket: rho(x/s) <= (x/s)^2 * 3/c^2 * ... use crude geometric search
    hi = float(np.max(x)) / c * 10.0
    while excess(hi) > 0:
        hi *= 2.0
    lo = hi
    while excess(lo) < 0:
        lo /= 2.0
    s = optimize.brentq(excess, lo, hi, xtol=1e-14 * hi, rtol=4 * np.finfo(float).eps)
    return RobustScaleResult(float(s), n)


@functools.cache
def _tau_constant():
    # Gaussian consistency factor for the tau-scale.
    def expected_rho(s, cc):
        f = lambda z: rho_bisquare(z / s, cc) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        return integrate.quad(f, -np.inf, np.inf, limit=200)[0]

    s_inf = optimize.brentq(lambda s: expected_rho(s, SCALE_C) - SCALE_DELTA, 0.1, 10.0, xtol=1e-14)
    return 1.0 / (s_inf**2 * expected_rho(s_inf, TAU_C2))


def tau_scale(xs):
    """Tau-scale of a sample centered at its median.

    ``tau^2 = s^2 * mean(rho_2(x / s)) * kappa`` where ``s`` is the bisquare
    M-scale (``delta = 0.5``, ``c = 1.548``), ``rho_2`` is the bisquare with
    ``c = 6.08`` and ``kappa`` makes the estimate consistent at the normal.
    """
    x = _finite_sample(xs, 2, "tau_scale")
    x = x - np.median(x)
    s = m_scale(x).value
    if s == 0.0:
        return RobustScaleResult(0.0, x.size)
    tau = s * math.sqrt(float(np.mean(rho_bisquare(x / s, TAU_C2))) * _tau_constant())
    return RobustScaleResult(tau, x.size)


def qn_factor(n):
    """Consistency factor (asymptotic constant times small-sample correction)."""
    if n <= 9:
        return QN_CONSTANT * _QN_SMALL[n]
    if n % 2:
        return QN_CONSTANT * n / (n + 1.4)
    return QN_CONSTANT * n / (n + 3.8)


def qn_order(n):
    h = n // 2 + 1
    return h * (h - 1) // 2


def _row_bounds(x, v):
    # for each i: first j such that fl(x[j] - x[i]) > v, searched over j > i
    n = x.size
    idx = np.arange(n)
    g = np.searchsorted(x, x + v, side="right")
    g = np.clip(g, idx + 1, n)
    for _ in range(n):
        up = (g < n) & (x[np.minimum(g, n - 1)] - x <= v)
        if not up.any():
            break
        g = g + up
    for _ in range(n):
        down = (g > idx + 1) & (x[np.maximum(g - 1, 0)] - x > v)
        if not down.any():
            break
        g = g - down
    return g


def _qn_raw_large(x, k):
    # exact k-th smallest pairwise difference of sorted x by bisection on the value
    n = x.size
    idx = np.arange(n)
    lo, hi = -1.0, float(x[-1] - x[0])
    g_lo = idx + 1
    g_hi = _row_bounds(x, hi)
    c_lo = 0
    while True:
        if int(np.sum(g_hi - g_lo)) <= 4 * n or np.nextafter(lo, np.inf) >= hi:
            break
        mid = 0.5 * (lo + hi)
        g_mid = _row_bounds(x, mid)
        c_mid = int(np.sum(g_mid - idx - 1))
        if c_mid >= k:
            hi, g_hi = mid, g_mid
        else:
            lo, g_lo, c_lo = mid, g_mid, c_mid
    if np.nextafter(lo, np.inf) >= hi and int(np.sum(g_hi - g_lo)) > 4 * n:
        return hi
    cand = np.concatenate([x[g_lo[i]:g_hi[i]] - x[i] for i in range(n) if g_hi[i] > g_lo[i]])
    return float(np.partition(cand, k - c_lo - 1)[k - c_lo - 1])


def qn_raw(xs):
    """Raw Qn: the ``C(h, 2)``-th smallest of the pairwise distances, ``h = n//2 + 1``."""
    x = np.sort(_finite_sample(xs, 2, "qn_scale"))
    n = x.size
    k = qn_order(n)
    if n <= _QN_BRUTE_MAX:
        i, j = np.triu_indices(n, 1)
        d = x[j] - x[i]
        return float(np.partition(d, k - 1)[k - 1])
    return _qn_raw_large(x, k)


def qn_raw_rows(samples):
    """Raw Qn of each row of a 2-D array (all rows share the same length)."""
    x = np.sort(np.asarray(samples, dtype=float), axis=1)
    r, n = x.shape
    if n < 2:
        raise ValueError("Qn needs at least 2 values")
    k = qn_order(n)
    # in a sorted row x[i + l] - x[i] grows with the lag l, so the smallest
    # lags holding k pairs bound the answer and larger lags can be skipped
    # once no difference there is below the bound (ties cannot change it)
    lag0, count = 0, 0
    while count < k:
        lag0 += 1
        count += n - lag0
    # doubling the minimal lag gives a tight bound for typical samples
    lag0 = min(n - 1, 2 * lag0)
    parts = [x[:, l:] - x[:, :-l] for l in range(1, lag0 + 1)]
    d = np.concatenate(parts, axis=1)
    out = np.partition(d, k - 1, axis=1)[:, k - 1]
    if lag0 < n - 1:
        nxt = x[:, lag0 + 1:] - x[:, :-(lag0 + 1)]
        redo = np.flatnonzero(nxt.min(axis=1) < out)
        if redo.size:
            xs = x[redo]
            d = np.concatenate([xs[:, l:] - xs[:, :-l] for l in range(1, n)], axis=1)
            out[redo] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def qn_scale(xs):
    """Qn scale estimator of Rousseeuw and Croux, consistent at the normal."""
    x = _finite_sample(xs, 2, "qn_scale")
    return RobustScaleResult(qn_raw(x) * qn_factor(x.size), x.size)


def gk_covariance(x, y, scale: Optional[Callable] = None):
    """Gnanadesikan-Kettenring covariance ``(S(x+y)^2 - S(x-y)^2) / 4``.

    Pairs with a non-finite member are dropped. Returns ``nan`` (a missing
    entry) when fewer than three complete pairs remain.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    ok = np.isfinite(x) & np.isfinite(y)
    if np.count_nonzero(ok) < 3:
        return float("nan")
    x, y = x[ok], y[ok]
    if scale is None:
        scale = qn_scale
    s_plus = float(scale(x + y))
    s_minus = float(scale(x - y))
    return 0.25 * (s_plus**2 - s_minus**2)


def weighted_median(values, weights):
    """Minimizer of ``sum(w * |v - b|)``; the midpoint is returned on exact ties."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    cw = np.cumsum(w)
    half = 0.5 * cw[-1]
    i = int(np.searchsorted(cw, half, side="left"))
    if cw[i] == half and i + 1 < v.size:
        return 0.5 * (v[i] + v[i + 1])
    return float(v[i])


def _check_rank(design):
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    tol = max(design.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if s.size < design.shape[1] or s[-1] <= tol:
        raise RankDeficientError("design matrix is rank deficient", null_direction=vt[-1])


def l1_regression(design, y, max_iter=200, tol=1e-10):
    """Least absolute deviations regression of ``y`` on the columns of ``design``.

    No intercept is added. A single column is solved exactly through a
    weighted median; wider designs use iteratively reweighted least squares
    with residuals floored at ``1e-9`` times the response magnitude.
    """
    d = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    n, k = d.shape
    if n != y.size:
        raise ValueError("design rows and response length differ")
    if n < k:
        raise ValueError("fewer observations than coefficients")
    _check_rank(d)
    if k == 1:
        h = d[:, 0]
        nz = h != 0
        return np.array([weighted_median(y[nz] / h[nz], np.abs(h[nz]))])
    floor = 1e-9 * max(float(np.max(np.abs(y))), np.finfo(float).tiny)
    b = np.linalg.lstsq(d, y, rcond=None)[0]
    for _ in range(max_iter):
        r = y - d @ b
        sw = 1.0 / np.sqrt(np.maximum(np.abs(r), floor))
        b_new = np.linalg.lstsq(d * sw[:, None], y * sw, rcond=None)[0]
        done = np.linalg.norm(b_new - b) <= tol * (1.0 + np.linalg.norm(b))
        b = b_new
        if done:
            break
    return b


def bisquare_regression_m(design, y, c=4.0, init=None, tol=1e-8, max_iter=100, full_output=False):
    """Regression M-estimate with bisquare loss and fixed residual scale.

    The scale is the normalized MAD of the residuals from ``init`` (L1 fit by
    default) and is held fixed while the coefficients are iterated by
    reweighted least squares. When that scale is zero, ``init`` is returned.

    With ``full_output=True`` also returns a dict holding the objective
    trace ``sum(rho(r / s))``, the scale and the iteration count.
    """
    d = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    b = l1_regression(d, y) if init is None else np.asarray(init, dtype=float).copy()
    r = y - d @ b
    s = MAD_CONSTANT * float(np.median(np.abs(r)))
    info = {"scale": s, "objective": [], "iterations": 0}
    if s == 0.0:
        return (b, info) if full_output else b
    info["objective"].append(float(np.sum(rho_bisquare(r / s, c))))
    for it in range(max_iter):
        w = weight_bisquare(r / s, c)
        sw = np.sqrt(w)
        b_new = np.linalg.lstsq(d * sw[:, None], y * sw, rcond=None)[0]
        r = y - d @ b_new
        info["objective"].append(float(np.sum(rho_bisquare(r / s, c))))
        info["iterations"] = it + 1
        done = np.linalg.norm(b_new - b) < tol * max(np.linalg.norm(b), np.finfo(float).tiny)
        b = b_new
        if done:
            break
    return (b, info) if full_output else b


def _masked_solve(design, weights, Y):
    # per-row weighted least squares sharing one design; rows whose normal
    # matrix is singular come back as NaN
    A = np.einsum("rj,ja,jb->rab", weights, design, design)
    rhs = np.einsum("rj,rj,ja->ra", weights, Y, design)
    diag = np.prod(np.diagonal(A, axis1=1, axis2=2), axis=1)
    ok = (diag > 0) & (np.linalg.det(A) > 1e-12 * np.where(diag > 0, diag, 1.0))
    out = np.full(rhs.shape, np.nan)
    if np.any(ok):
        out[ok] = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
    return out


def l1_regression_rows(design, Y, mask=None, max_iter=200, tol=1e-10):
    """Row-wise L1 regressions ``Y[r, J_r] ~ design[J_r]`` over the observed cells ``J_r``.

    Uses the same algorithm as :func:`l1_regression` (exact weighted median
    for one column, reweighted least squares otherwise). Rows whose design
    restricted to ``J_r`` is rank deficient are returned as NaN.
    """
    E = np.asarray(design, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    Y = np.asarray(Y, dtype=float)
    mask = np.isfinite(Y) if mask is None else np.asarray(mask, dtype=bool)
    Yz = np.where(mask, Y, 0.0)
    k = E.shape[1]
    if k == 1:
        out = np.full((Y.shape[0], 1), np.nan)
        for r in range(Y.shape[0]):
            h, y = E[mask[r], 0], Yz[r, mask[r]]
            nz = h != 0
            if np.any(nz):
                out[r, 0] = weighted_median(y[nz] / h[nz], np.abs(h[nz]))
        return out
    m = mask.astype(float)
    b = _masked_solve(E, m, Yz)
    floor = 1e-9 * np.maximum(np.max(np.abs(Yz), axis=1), np.finfo(float).tiny)
    active = np.all(np.isfinite(b), axis=1)
    for _ in range(max_iter):
        if not np.any(active):
            break
        bb = b[active]
        r = Yz[active] - bb @ E.T
        w = m[active] / np.maximum(np.abs(r), floor[active, None])
        b_new = _masked_solve(E, w, Yz[active])
        bad = ~np.all(np.isfinite(b_new), axis=1)
        b_new[bad] = bb[bad]
        step = np.linalg.norm(b_new - bb, axis=1)
        done = (step <= tol * (1.0 + np.linalg.norm(bb, axis=1))) | bad
        b[active] = b_new
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    return b


def bisquare_regression_rows(design, Y, mask=None, c=4.0, init=None, tol=1e-8, max_iter=100):
    """Row-wise version of :func:`bisquare_regression_m` over observed cells.

    Rows with a zero residual scale keep their initial coefficients; rows
    whose initial fit is undefined stay NaN.
    """
    E = np.asarray(design, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    Y = np.asarray(Y, dtype=float)
    mask = np.isfinite(Y) if mask is None else np.asarray(mask, dtype=bool)
    Yz = np.where(mask, Y, 0.0)
    m = mask.astype(float)
    b = l1_regression_rows(E, Yz, mask) if init is None else np.array(init, dtype=float)
    R = Yz - b @ E.T
    absr = np.where(mask, np.abs(R), np.nan)
    s = MAD_CONSTANT * np.nanmedian(absr, axis=1)
    active = np.isfinite(s) & (s > 0) & np.all(np.isfinite(b), axis=1)
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        w = m[idx] * weight_bisquare(R[idx] / s[idx, None], c)
        bb = b[idx]
        b_new = _masked_solve(E, w, Yz[idx])
        bad = ~np.all(np.isfinite(b_new), axis=1)
        b_new[bad] = bb[bad]
        step = np.linalg.norm(b_new - bb, axis=1)
        done = (step < tol * np.maximum(np.linalg.norm(bb, axis=1), np.finfo(float).tiny)) | bad
        b[idx] = b_new
        R[idx] = Yz[idx] - b_new @ E.T
        active[idx[done]] = False
    return b
