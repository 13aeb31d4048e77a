"""Robust functional principal components by sequential MM fitting.

Components are fitted one at a time. Each one minimizes a bounded-rho
criterion ``sum sigma_j^2 rho((y_ij - mu_j - beta_i h(t_j)) / sigma_j)`` over
the observed cells by weighted alternating regressions, where ``h`` lies in
a cubic B-spline space and ``sigma_j`` are smooth local residual scales.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from robfpca import robust
from robfpca.data import LongitudinalDataset
from robfpca.model import FpcaModel
from robfpca.smoothing import (
    LoessConfig,
    SplineBasis,
    loess_2d,
    make_basis,
    robust_loess_1d,
    smooth_with_basis,
)

RHO_CHOICES = ("bisquare", "quadratic")


class TooManyComponentsError(ValueError):
    """More components were requested than the spline basis can hold."""


class DegenerateComponentError(RuntimeError):
    """The component collapsed (all scores zero or a null direction)."""


@dataclass(frozen=True)
class MmConfig:
    """Settings of :func:`fit_mm`.

    Parameters
    ----------
    q : int
        Number of components. When ``target_explained`` is set it is the
        maximum number of components instead.
    target_explained : float, optional
        Stop adding components once the explained proportion reaches this.
    knot_divisor : int
        ``K`` in the knot rule ``floor(p / K)`` interior knots.
    n_knots : int, optional
        Explicit interior-knot count, overriding ``knot_divisor``.
    rho : {"bisquare", "quadratic"}
        Loss of the fitting criterion. ``"quadratic"`` gives least squares
        (and a least-squares final adjustment).
    rho_c : float
        Bisquare tuning of the fitting criterion.
    final_c : float
        Bisquare tuning of the final score regressions.
    """

    q: int = 2
    target_explained: Optional[float] = None
    knot_divisor: int = 6
    n_knots: Optional[int] = None
    rho: str = "bisquare"
    rho_c: float = 3.44
    final_c: float = 4.0
    max_outer_iterations: int = 50
    tolerance: float = 1e-6
    overlap_threshold: int = 10
    loess_span: float = 0.3
    loess2d_span: float = 0.5
    final_adjustment: bool = True

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be at least 1")
        if self.target_explained is not None and not 0.0 < self.target_explained < 1.0:
            raise ValueError("target_explained must lie in (0, 1)")
        if self.rho not in RHO_CHOICES:
            raise ValueError(f"rho must be one of {RHO_CHOICES}")
        if self.rho_c <= 0 or self.final_c <= 0:
            raise ValueError("tuning constants must be positive")
        if self.max_outer_iterations < 1 or self.tolerance < 0:
            raise ValueError("bad iteration controls")


class _Loss:
    # rho and IRLS weight of scaled residuals
    def __init__(self, kind="bisquare", c=3.44):
        self.kind = kind
        self.c = c

    def rho(self, t):
        if self.kind == "quadratic":
            return t * t
        return robust.rho_bisquare(t, self.c)

    def weight(self, t):
        if self.kind == "quadratic":
            return np.ones_like(t)
        return robust.weight_bisquare(t, self.c)


def _loss(config: MmConfig):
    return _Loss(config.rho, config.rho_c)


def _as_arrays(residuals, mask):
    y = np.asarray(residuals, dtype=float)
    mask = np.isfinite(y) if mask is None else np.asarray(mask, dtype=bool)
    return np.where(mask, y, 0.0), mask


def _criterion(Y, mask, scales, loss):
    r = Y / scales
    return float(np.sum(scales**2 * np.where(mask, loss.rho(r), 0.0)))


def unexplained_variance(residuals, scales, mask=None, rho="bisquare", c=3.44):
    """Average of ``sigma_j^2 rho(r_ij / sigma_j)`` over the observed cells."""
    Y, mask = _as_arrays(residuals, mask)
    scales = np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise ValueError("scales must be strictly positive")
    return _criterion(Y, mask, scales, _Loss(rho, c)) / mask.sum()


def _column_values(Y, mask, j):
    return Y[mask[:, j], j]


def _smooth_profile(grid, values, ok, span):
    if ok.sum() < 3:
        raise ValueError("too few grid points with enough observations for the Loess smoother")
    return robust_loess_1d(grid[ok], values[ok], LoessConfig(span=span), at=grid)


def _floored(sigma, raw, ok):
    med = float(np.median(raw[ok]))
    floor = 1e-3 * med
    if floor <= 0:
        # every column scale is zero; keep scales positive
        floor = np.finfo(float).eps * max(1.0, float(np.max(np.abs(raw[ok]), initial=0.0)))
    return np.maximum(sigma, floor)


def _column_scales(grid, Y, mask, span):
    # tau-scale per column with >= 2 observations, then smoothed and floored
    p = grid.size
    ok = mask.sum(axis=0) >= 2
    s = np.zeros(p)
    for j in np.flatnonzero(ok):
        s[j] = robust.tau_scale(_column_values(Y, mask, j)).value
    return _floored(_smooth_profile(grid, s, ok, span), s, ok)


def local_location_scale(data: LongitudinalDataset, span=0.3):
    """Smooth robust location ``mu0`` and scale ``sigma0`` across the grid.

    Column M-locations are smoothed by robust Loess, column tau-scales of
    the centered values likewise; scales are floored at ``1e-3`` times the
    median raw scale. Columns with fewer than two observations get values
    from the smoother only.
    """
    Y, mask = _as_arrays(data.values, data.mask)
    grid = np.asarray(data.grid, dtype=float)
    ok = mask.sum(axis=0) >= 2
    m = np.zeros(grid.size)
    for j in np.flatnonzero(ok):
        m[j] = robust.m_location(_column_values(Y, mask, j))
    mu0 = _smooth_profile(grid, m, ok, span)
    sigma0 = _column_scales(grid, np.where(mask, Y - mu0, 0.0), mask, span)
    return mu0, sigma0


def robust_pairwise_covariance(residuals, mask=None, min_pairs=3):
    """Gnanadesikan-Kettenring covariances with the Qn scale for all column pairs.

    Returns ``(sigma, counts)``; entries with fewer than ``min_pairs``
    jointly observed cases are NaN.
    """
    Y, mask = _as_arrays(residuals, mask)
    p = Y.shape[1]
    mf = mask.astype(np.int64)
    counts = mf.T @ mf
    sigma = np.full((p, p), np.nan)
    iu, ju = np.triu_indices(p)
    by_count = {}
    for k, l in zip(iu, ju):
        c = counts[k, l]
        if c >= min_pairs:
            by_count.setdefault(int(c), []).append((k, l))
    for c, pairs in by_count.items():
        pairs = np.array(pairs)
        plus = np.empty((len(pairs), c))
        minus = np.empty((len(pairs), c))
        for r, (k, l) in enumerate(pairs):
            both = mask[:, k] & mask[:, l]
            a, b = Y[both, k], Y[both, l]
            plus[r] = a + b
            minus[r] = a - b
        f = robust.qn_factor(c)
        sp = f * robust.qn_raw_rows(plus)
        sm = f * robust.qn_raw_rows(minus)
        diag = pairs[:, 0] == pairs[:, 1]
        # S(2x) = 2 S(x) and S(0) = 0 make the diagonal exactly Qn(x)^2
        val = np.where(diag, (0.5 * sp) ** 2, 0.25 * (sp**2 - sm**2))
        sigma[pairs[:, 0], pairs[:, 1]] = val
        sigma[pairs[:, 1], pairs[:, 0]] = val
    return sigma, counts


def _orient(v):
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def init_direction(residuals, basis: SplineBasis, mask=None, overlap_threshold=10,
                   previous=None, span2d=0.5):
    """Deterministic starting direction from a robust pairwise covariance.

    The leading eigenvector of the (completed, if needed) Gnanadesikan-
    Kettenring matrix, restricted to the orthogonal complement of the
    columns of ``previous``, is smoothed in the spline basis.

    Returns
    -------
    alpha : ndarray, shape (m,)
        Spline coefficients of the unit-norm direction.
    h : ndarray, shape (p,)
        The direction on the grid.
    """
    Y, mask = _as_arrays(residuals, mask)
    sigma, counts = robust_pairwise_covariance(Y, mask)
    available = np.isfinite(sigma)
    if not available.any():
        raise ValueError("no pair of grid points has enough joint observations")
    if available.all() and counts.min() >= overlap_threshold:
        S = 0.5 * (sigma + sigma.T)
    else:
        S = loess_2d(sigma, available, span=span2d)
    if previous is not None and np.size(previous):
        P = np.asarray(previous, dtype=float).reshape(S.shape[0], -1)
        S = S - P @ (P.T @ S)
        S = S - (S @ P) @ P.T
        S = 0.5 * (S + S.T)
    _, vecs = linalg.eigh(S, subset_by_index=[S.shape[0] - 1, S.shape[0] - 1])
    e = _orient(vecs[:, 0])
    alpha, h = smooth_with_basis(basis, e)
    norm = float(np.linalg.norm(h))
    if norm == 0:
        raise DegenerateComponentError("initial direction vanishes after smoothing")
    return alpha / norm, h / norm


def init_scores(residuals, h, mask=None):
    """Per-case L1 regression (no intercept) of the residuals on ``h``."""
    Y, mask = _as_arrays(residuals, mask)
    h = np.asarray(h, dtype=float)
    beta = np.zeros(Y.shape[0])
    for i in range(Y.shape[0]):
        hv = h[mask[i]]
        nz = hv != 0
        if nz.any():
            yv = Y[i, mask[i]][nz]
            beta[i] = robust.weighted_median(yv / hv[nz], np.abs(hv[nz]))
    return beta


@dataclass
class ComponentFit:
    alpha: np.ndarray
    beta: np.ndarray
    mu_update: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def h(self, basis):
        return basis.B @ self.alpha


def _solve_alpha(B, d, rhs):
    A = B.T @ (d[:, None] * B)
    try:
        c, low = linalg.cho_factor(A, check_finite=False)
        return linalg.cho_solve((c, low), rhs, check_finite=False)
    except linalg.LinAlgError:
        return linalg.lstsq(A, rhs, check_finite=False)[0]


def fit_component(residuals, scales, basis: SplineBasis, init_alpha, init_beta,
                  config: MmConfig = MmConfig(), mask=None, check_descent=True):
    """Minimize the one-component criterion by weighted alternating regressions.

    Each sweep fixes ``w_ij = W(r_ij / sigma_j)`` at the current fit and then
    updates the center, the scores and the spline coefficients in turn.
    With weights frozen inside a sweep every step minimizes a quadratic
    majorizer of the criterion, so the criterion cannot increase.

    Returns a :class:`ComponentFit` whose ``h = B @ alpha`` has unit norm.
    ``trace`` holds the criterion before the first sweep and after each one.
    """
    Y, mask = _as_arrays(residuals, mask)
    scales = np.asarray(scales, dtype=float)
    if np.any(scales <= 0):
        raise ValueError("scales must be strictly positive")
    loss = _loss(config)
    B = basis.B
    mf = mask.astype(float)
    alpha = np.array(init_alpha, dtype=float)
    beta = np.array(init_beta, dtype=float)
    h = B @ alpha
    mu = np.zeros(Y.shape[1])

    def resid(mu, beta, h):
        return np.where(mask, Y - mu - np.outer(beta, h), 0.0)

    R = resid(mu, beta, h)
    f = _criterion(R, mask, scales, loss)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, config.max_outer_iterations + 1):
        w = mf * loss.weight(R / scales)
        bh = np.outer(beta, h)
        sw = w.sum(axis=0)
        mu_new = np.where(sw > 0, (w * (Y - bh)).sum(axis=0) / np.where(sw > 0, sw, 1.0), mu)
        Z = Y - mu_new
        den = (w * h**2).sum(axis=1)
        beta_new = np.where(den > 0, (w * Z * h).sum(axis=1) / np.where(den > 0, den, 1.0), beta)
        if not np.any(beta_new):
            raise DegenerateComponentError("degenerate component: all scores are zero")
        d = (w * beta_new[:, None] ** 2).sum(axis=0)
        rhs = B.T @ (w * Z * beta_new[:, None]).sum(axis=0)
        if not np.any(d):
            raise DegenerateComponentError("degenerate component: singular coefficient equations")
        alpha_new = _solve_alpha(B, d, rhs)
        h_new = B @ alpha_new
        R_new = resid(mu_new, beta_new, h_new)
        f_new = _criterion(R_new, mask, scales, loss)
        if check_descent and f_new > f * (1 + 1e-10) + 1e-300:
            raise AssertionError(f"criterion increased at sweep {it}: {f} -> {f_new}")
        trace.append(f_new)
        mu, beta, alpha, h, R = mu_new, beta_new, alpha_new, h_new, R_new
        decrease = f - f_new
        f = f_new
        if decrease <= config.tolerance * f or f == 0.0:
            converged = True
            break
    norm = float(np.linalg.norm(h))
    if norm == 0:
        raise DegenerateComponentError("degenerate component: direction vanished")
    return ComponentFit(alpha / norm, beta * norm, mu, trace, it, converged)


def _knots_basis(data, config):
    return make_basis(data.grid, knot_divisor=config.knot_divisor, n_knots=config.n_knots)


def fit_mm(data: LongitudinalDataset, config: MmConfig = MmConfig()):
    """Fit the MM functional principal-component model.

    Parameters
    ----------
    data : LongitudinalDataset
        Complete or incomplete data on a common grid.
    config : MmConfig

    Returns
    -------
    FpcaModel
        With orthonormal directions, the variance trace ``V_0..V_q`` and
        (unless disabled) adjusted scores.
    """
    basis = _knots_basis(data, config)
    if config.q > basis.m:
        raise TooManyComponentsError(f"q={config.q} exceeds the number of basis functions m={basis.m}")
    loss = _loss(config)
    grid = np.asarray(data.grid, dtype=float)
    mask = np.asarray(data.mask)
    mu, sigma = local_location_scale(data, span=config.loess_span)
    Y = np.where(mask, data.values - mu, 0.0)
    N = mask.sum()
    sigmas = [sigma]
    trace = [_criterion(Y, mask, sigma, loss) / N]
    alphas, hs, betas = [], [], []
    iterations = []
    sweep_traces = []
    flags = {}
    q_max = min(config.q, basis.m)
    for k in range(q_max):
        prev = np.column_stack(hs) if hs else None
        try:
            a0, h0 = init_direction(Y, basis, mask, config.overlap_threshold, prev, config.loess2d_span)
            b0 = init_scores(Y, h0, mask)
            comp = fit_component(Y, sigma, basis, a0, b0, config, mask)
        except DegenerateComponentError as exc:
            if not alphas:
                raise
            warnings.warn(f"stopping after {k} components: {exc}", RuntimeWarning, stacklevel=2)
            flags["stopped_early"] = str(exc)
            break
        h = comp.h(basis)
        Y = np.where(mask, Y - comp.mu_update - np.outer(comp.beta, h), 0.0)
        mu = mu + comp.mu_update
        alpha, beta = comp.alpha, comp.beta
        if hs:
            H = np.column_stack(hs)
            coef = H.T @ h
            h = h - H @ coef
            alpha = alpha - coef @ np.array(alphas)
            for l in range(len(hs)):
                # keep fitted values unchanged
                betas[l] = betas[l] + coef[l] * beta
            norm = float(np.linalg.norm(h))
            if norm < 1e-8:
                warnings.warn(f"component {k + 1} lies in the span of earlier ones; stopping",
                              RuntimeWarning, stacklevel=2)
                flags["stopped_early"] = "dependent component"
                break
            h, alpha, beta = h / norm, alpha / norm, beta * norm
        alphas.append(alpha)
        hs.append(h)
        betas.append(beta)
        iterations.append(comp.iterations)
        sweep_traces.append([float(v) for v in comp.trace])
        sigma = _column_scales(grid, Y, mask, config.loess_span)
        sigmas.append(sigma)
        trace.append(_criterion(Y, mask, sigma, loss) / N)
        if config.target_explained is not None and trace[0] > 0:
            if 1.0 - trace[-1] / trace[0] >= config.target_explained:
                break
    alpha = np.array(alphas)
    flags["iterations"] = iterations
    flags["criterion_traces"] = sweep_traces
    model = FpcaModel(
        grid=grid.copy(),
        mu=mu,
        directions=basis.B @ alpha.T,
        scores=np.column_stack(betas),
        estimator="mm",
        alpha=alpha,
        knots=np.asarray(basis.knots, dtype=float).copy(),
        degree=basis.degree,
        sigma_stages=sigmas,
        variance_trace=trace,
        explained=float(np.clip(1.0 - trace[-1] / trace[0], 0.0, 1.0)) if trace[0] > 0 else float("nan"),
        case_ids=tuple(data.case_ids),
        flags=flags,
    )
    if config.final_adjustment:
        model = final_adjustment(model, data, c=config.final_c, rho=config.rho)
    return model


def final_adjustment(model: FpcaModel, data: LongitudinalDataset, c=4.0, rho="bisquare"):
    """Recompute every case's scores by a regression on the fixed directions.

    For case ``i`` the centered observed values are regressed on the rows of
    the direction matrix at the observed grid points: a bisquare M-estimate
    with tuning ``c`` started from L1, or least squares when
    ``rho == "quadratic"``. Cases with fewer observed cells than components,
    or with a singular restricted design, keep their scores and are listed
    in ``flags["kept_scores"]``.
    """
    E = model.directions
    mask = np.asarray(data.mask)
    Z = np.where(mask, data.values - model.mu, 0.0)
    if rho == "quadratic":
        new = robust._masked_solve(E, mask.astype(float), Z)
    else:
        new = robust.bisquare_regression_rows(E, Z, mask, c=c)
    few = mask.sum(axis=1) < model.q
    bad = few | ~np.all(np.isfinite(new), axis=1)
    scores = np.where(bad[:, None], model.scores, new)
    flags = dict(model.flags)
    flags["kept_scores"] = [int(i) for i in np.flatnonzero(bad)]
    return replace(model, scores=scores, flags=flags)


def predict(model: FpcaModel, case_scores):
    """``mu + E @ beta`` on the model grid."""
    return model.predict(case_scores)
