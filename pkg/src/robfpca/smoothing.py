"""B-spline bases, robust Loess smoothers and basis-projection smoothing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from robfpca.robust import weight_bisquare


@dataclass(frozen=True)
class SplineBasis:
    """B-spline basis evaluated on a time grid.

    Attributes
    ----------
    grid : (p,) array
        Evaluation points.
    knots : array
        Full knot vector, boundary knots repeated ``degree + 1`` times.
    degree : int
    B : (p, m) array
        ``B[j, l]`` is the l-th basis function at ``grid[j]``.
    """

    grid: np.ndarray
    knots: np.ndarray
    degree: int = 3
    B: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.B is None:
            object.__setattr__(self, "B", _design(self.grid, self.knots, self.degree))
        for name in ("grid", "knots", "B"):
            getattr(self, name).setflags(write=False)

    @property
    def m(self):
        return self.knots.size - self.degree - 1

    @property
    def n_interior(self):
        return self.m - self.degree - 1

    def __call__(self, t):
        return eval_basis(self, t)


def _design(t, knots, degree):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return BSpline.design_matrix(t, knots, degree).toarray()


def basis_from_knots(grid, knots, degree=3):
    grid = np.asarray(grid, dtype=float).copy()
    return SplineBasis(grid=grid, knots=np.asarray(knots, dtype=float).copy(), degree=int(degree))


def make_basis(grid, knot_divisor=6, degree=3, n_knots=None):
    """Cubic (by default) B-spline basis with ``floor(p / knot_divisor)`` interior knots.

    Interior knots sit at equally spaced quantiles of the grid and the
    boundary knots are the grid endpoints. ``n_knots`` overrides the
    divisor rule; ``n_knots=0`` gives the Bernstein polynomial basis.
    """
    grid = np.asarray(grid, dtype=float)
    p = grid.size
    if p < degree + 2:
        raise ValueError(f"need at least {degree + 2} grid points, got {p}")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if n_knots is None:
        n_knots = p // int(knot_divisor)
        if n_knots == 0:
            raise ValueError(
                f"floor(p / K) = floor({p} / {knot_divisor}) = 0 interior knots; "
                "use a smaller knot divisor or more grid points"
            )
    if n_knots < 0:
        raise ValueError("n_knots must be non-negative")
    if n_knots + degree + 1 > p:
        raise ValueError(f"{n_knots} interior knots give more basis functions than grid points ({p})")
    levels = np.arange(1, n_knots + 1) / (n_knots + 1)
    interior = np.quantile(grid, levels)
    a, b = grid[0], grid[-1]
    knots = np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])
    return basis_from_knots(grid, knots, degree)


def eval_basis(basis: SplineBasis, t):
    """Basis values at ``t`` (scalar gives an m-vector, array gives rows)."""
    scalar = np.ndim(t) == 0
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = basis.knots[0], basis.knots[-1]
    if np.any(~np.isfinite(tt)) or np.any(tt < lo) or np.any(tt > hi):
        raise ValueError(f"evaluation points must lie in [{lo}, {hi}]")
    out = _design(tt, basis.knots, basis.degree)
    return out[0] if scalar else out


def smooth_with_basis(basis: SplineBasis, v, weights=None):
    """Least-squares projection of ``v`` (p-vector or p x r array) onto the basis.

    Returns ``(coefficients, smoothed)`` with ``smoothed = B @ coefficients``.
    """
    B = basis.B
    p, m = B.shape
    v = np.asarray(v, dtype=float)
    if v.shape[0] != p:
        raise ValueError(f"expected {p} values, got {v.shape[0]}")
    if p < m:
        raise ValueError("fewer grid points than basis functions")
    if weights is None:
        sw = np.ones(p)
    else:
        sw = np.sqrt(np.asarray(weights, dtype=float))
    Bw = B * sw[:, None]
    if np.linalg.matrix_rank(Bw) < m:
        raise ValueError("spline design is rank deficient on the supplied grid/weights")
    rhs = v * (sw[:, None] if v.ndim == 2 else sw)
    coef = np.linalg.lstsq(Bw, rhs, rcond=None)[0]
    return coef, B @ coef


def gcv_knot_count(grid, vectors, candidates=None, degree=3):
    """Number of interior knots minimizing generalized cross-validation.

    The score of a candidate is ``sum_v (RSS_v / p) / (1 - m / p)^2``; ties,
    including scores that differ only by rounding noise, go to fewer knots.
    """
    grid = np.asarray(grid, dtype=float)
    p = grid.size
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] != p and V.shape[1] == p:
        V = V.T
    if candidates is None:
        candidates = range(2, max(2, p // 4) + 1)
    cands = sorted(set(int(c) for c in candidates))
    total = float(np.sum(V**2))
    scores = []
    for nk in cands:
        basis = make_basis(grid, degree=degree, n_knots=nk)
        if basis.m >= p:
            scores.append(np.inf)
            continue
        _, fit = smooth_with_basis(basis, V)
        rss = float(np.sum((V - fit) ** 2))
        scores.append((rss / p) / (1.0 - basis.m / p) ** 2)
    scores = np.array(scores)
    tol = 1e-12 * total / p
    best = np.min(scores)
    for nk, s in zip(cands, scores):
        if s <= best + tol:
            return nk
    raise RuntimeError("no admissible knot count")  # pragma: no cover


@dataclass(frozen=True)
class LoessConfig:
    span: float = 0.3
    degree: int = 1
    robust_iterations: int = 4

    def __post_init__(self):
        if not 0 < self.span <= 1:
            raise ValueError("span must lie in (0, 1]")
        if self.degree not in (1, 2):
            raise ValueError("Loess degree must be 1 or 2")


def _tricube(u):
    u = np.clip(u, 0.0, 1.0)
    return (1.0 - u**3) ** 3


def _neighbour_weights(x, targets, n_near, min_positive):
    # tricube weights, one row per target, radius = distance to n_near-th nearest point
    dist = np.abs(targets[:, None] - x[None, :])
    srt = np.sort(dist, axis=1)
    k = n_near
    h = srt[:, k - 1].copy()
    w = _tricube(dist / np.where(h > 0, h, 1.0)[:, None])
    w[h == 0] = (dist[h == 0] == 0).astype(float)
    # widen any neighbourhood with too few positive weights
    bad = np.count_nonzero(w > 0, axis=1) < min_positive
    while np.any(bad) and k < x.size:
        k += 1
        h[bad] = srt[bad, k - 1] * (1.0 + 1e-10) if k == x.size else srt[bad, k - 1]
        w[bad] = _tricube(dist[bad] / h[bad][:, None])
        bad = np.count_nonzero(w > 0, axis=1) < min_positive
    return w


def _well_posed(A):
    # scale-free determinant test on a stack of small normal-equation matrices
    diag = np.prod(np.diagonal(A, axis1=-2, axis2=-1), axis=-1)
    det = np.linalg.det(A)
    return (diag > 0) & (det > 1e-12 * np.where(diag > 0, diag, 1.0))


def _solve_intercepts(A, rhs, s0, sz):
    # first coefficient of each local fit; weighted mean where the fit is ill-posed
    ok = _well_posed(A)
    out = sz / np.where(s0 > 0, s0, 1.0)
    if np.any(ok):
        out[ok] = np.linalg.solve(A[ok], rhs[ok][..., None])[:, 0, 0]
    return out


def _local_poly(x, targets, y, w, degree):
    # y: (r, n) responses; w: (r, t, n) weights -> fitted (r, t)
    dx = x[None, :] - targets[:, None]
    powers = np.stack([dx**d for d in range(degree + 1)], axis=-1)  # (t, n, d+1)
    A = np.einsum("rtn,tna,tnb->rtab", w, powers, powers)
    rhs = np.einsum("rtn,rn,tna->rta", w, y, powers)
    return _solve_intercepts(A, rhs, A[..., 0, 0], rhs[..., 0])


def robust_loess_1d(x, y, config: LoessConfig = LoessConfig(), at=None):
    """Cleveland's robust locally weighted regression.

    ``y`` may be a vector or an (r, n) array of responses sharing the
    abscissae ``x``. Returns smoothed values at ``x``, or at the points
    ``at`` when given (using the final robustness weights).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    n = x.size
    if Y.shape[1] != n:
        raise ValueError("x and y lengths differ")
    if n < config.degree + 2:
        raise ValueError(f"Loess needs at least {config.degree + 2} points, got {n}")
    if np.any(np.diff(x) <= 0):
        raise ValueError("x must be strictly increasing")
    n_near = min(n, max(int(math.ceil(config.span * n)), config.degree + 2))
    base = _neighbour_weights(x, x, n_near, config.degree + 1)
    delta = np.ones_like(Y)
    fit = _local_poly(x, x, Y, base[None] * delta[:, None, :], config.degree)
    scale_y = np.mean(np.abs(Y), axis=1)
    active = np.ones(Y.shape[0], dtype=bool)
    for _ in range(config.robust_iterations):
        res = Y - fit
        cmad = 6.0 * np.median(np.abs(res), axis=1)
        active &= (cmad > 0) & (cmad >= 1e-7 * scale_y)
        if not np.any(active):
            break
        u = np.abs(res[active]) / cmad[active, None]
        d = weight_bisquare(u, 1.0)
        d[u <= 0.001] = 1.0
        d[u > 0.999] = 0.0
        delta[active] = d
        fit[active] = _local_poly(x, x, Y[active], base[None] * delta[active][:, None, :], config.degree)
    if at is not None:
        at = np.atleast_1d(np.asarray(at, dtype=float))
        w_at = _neighbour_weights(x, at, n_near, config.degree + 1)
        fit = _local_poly(x, at, Y, w_at[None] * delta[:, None, :], config.degree)
    return fit[0] if single else fit


def loess_2d(values, mask=None, span=0.5):
    """Complete and smooth a square matrix with bivariate local-linear Loess.

    Each cell ``(k, l)`` is fitted by a tricube-weighted linear regression in
    the index coordinates over the available entries, the neighbourhood
    holding a fraction ``span`` of them. The output is symmetric: fits are
    computed on the upper triangle and mirrored, then averaged with the
    transpose.
    """
    S = np.asarray(values, dtype=float)
    p = S.shape[0]
    if S.ndim != 2 or S.shape != (p, p):
        raise ValueError("loess_2d needs a square matrix")
    avail = np.isfinite(S) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(S))
    n_avail = int(np.count_nonzero(avail))
    if n_avail == 0:
        raise ValueError("no available entries to smooth")
    if n_avail < 10:
        raise ValueError(f"loess_2d needs at least 10 available entries, got {n_avail}")
    kk, ll = np.nonzero(avail)
    z = S[kk, ll]
    ck_, cl_ = kk.astype(float), ll.astype(float)
    F = np.column_stack([np.ones(n_avail), ck_, cl_, ck_**2, ck_ * cl_, cl_**2, z, z * ck_, z * cl_])
    idx = np.arange(p, dtype=float)
    dk2 = (idx[:, None] - ck_[None, :]) ** 2  # (p, n_avail)
    dl2 = (idx[:, None] - cl_[None, :]) ** 2
    ta, tb = np.triu_indices(p)
    n_near = min(n_avail, max(int(math.ceil(span * n_avail)), 4))
    fitted = np.empty(ta.size)
    chunk = max(1, 2_000_000 // n_avail)
    for start in range(0, ta.size, chunk):
        a_i, b_i = ta[start:start + chunk], tb[start:start + chunk]
        d2 = dk2[a_i] + dl2[b_i]
        h2 = np.partition(d2, n_near - 1, axis=1)[:, n_near - 1] * (1.0 + 1e-9)
        h2 = np.where(h2 > 0, h2, 1.0)
        u3 = np.minimum(d2 / h2[:, None], 1.0) ** 1.5
        w = (1.0 - u3) ** 3
        M = w @ F
        a, b = a_i.astype(float), b_i.astype(float)
        s0, sk, sl, skk, skl, sll, sz, szk, szl = M.T
        # moments of the centred coordinates (k - a, l - b)
        ck = sk - a * s0
        cl = sl - b * s0
        ckk = skk - 2 * a * sk + a * a * s0
        cll = sll - 2 * b * sl + b * b * s0
        ckl = skl - a * sl - b * sk + a * b * s0
        czk = szk - a * sz
        czl = szl - b * sz
        A = np.stack([np.stack([s0, ck, cl], -1), np.stack([ck, ckk, ckl], -1), np.stack([cl, ckl, cll], -1)], -2)
        rhs = np.stack([sz, czk, czl], -1)
        fitted[start:start + chunk] = _solve_intercepts(A, rhs, s0, sz)
    full = np.empty((p, p))
    full[ta, tb] = fitted
    full[tb, ta] = fitted
    return 0.5 * (full + full.T)
