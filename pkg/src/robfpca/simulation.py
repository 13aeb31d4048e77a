"""Monte Carlo harness: scenarios, contamination, metrics and the replication driver.

Samples are Gaussian with covariance ``sum_k pi_k g_k g_k' + pi_0 I`` where
the ``g_k`` are smooth directions, orthonormalized on the grid and then
scaled to Euclidean norm ``direction_norm``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from robfpca.data import LongitudinalDataset, decimate
from robfpca.mm import MmConfig, fit_mm
from robfpca.naive import fit_classical, fit_naive

ESTIMATORS = ("classical", "naive", "mm")
CASE_DIRECTIONS = ("next_eigenvector", "random_orthogonal")
CASE_CENTERS = ("mean", "zero")


# smooth scenario functions on [0, 1]; module level so scenarios pickle

def lrs_mean(t):
    return 2.0 + 10.0 * np.exp(-(((t - 0.45) / 0.22) ** 2))


def _bump(t, center, width=0.15):
    return np.exp(-(((t - center) / width) ** 2))


def lrs_bump_early(t):
    return _bump(t, 0.3)


def lrs_bump_mid(t):
    return _bump(t, 0.55)


def lrs_bump_late(t):
    return _bump(t, 0.8)


def macs_mean(t):
    return 20.0 * np.exp(-1.5 * t) + 5.0


def poly_level(t):
    return np.ones_like(t)


def poly_slope(t):
    return t - 0.5


def poly_quadratic(t):
    return (t - 0.5) ** 2


@dataclass(frozen=True)
class ScenarioConfig:
    """A Gaussian scenario on ``p`` equally spaced times in [0, 1].

    ``pi`` lists ``pi_1..pi_q`` followed by the noise weight ``pi_0``.
    ``extra_fn`` supplies the direction used for casewise outliers; it is
    orthonormalized together with the model directions.
    """

    name: str = "lrs-like"
    p: int = 50
    n: int = 100
    pi: tuple = (0.6, 0.3, 0.05)
    mean_fn: Callable = lrs_mean
    direction_fns: tuple = (lrs_bump_early, lrs_bump_mid)
    extra_fn: Optional[Callable] = lrs_bump_late
    direction_norm: float = 20.0
    replications: int = 25

    def __post_init__(self):
        if len(self.pi) != len(self.direction_fns) + 1:
            raise ValueError("pi needs one weight per direction plus the noise weight")
        if any(w <= 0 for w in self.pi[:-1]) or self.pi[-1] < 0:
            raise ValueError("direction weights must be positive and the noise weight nonnegative")
        if self.p < 2 or self.n < 2:
            raise ValueError("need p >= 2 and n >= 2")

    @property
    def q(self):
        return len(self.direction_fns)

    @property
    def grid(self):
        return np.linspace(0.0, 1.0, self.p)

    def orthonormal_directions(self):
        """Orthonormal ``p x (q [+ 1])`` matrix of the model (and extra) directions."""
        t = self.grid
        fns = list(self.direction_fns) + ([self.extra_fn] if self.extra_fn is not None else [])
        raw = np.column_stack([np.broadcast_to(f(t), t.shape) for f in fns]).astype(float)
        Q, R = np.linalg.qr(raw)
        if np.any(np.abs(np.diag(R)) <= 1e-10 * np.abs(R).max()):
            raise ValueError("scenario directions are linearly dependent on the grid")
        return Q * np.sign(np.diag(R))

    @property
    def lambda1(self):
        """Largest eigenvalue of the covariance, ``pi_1 * norm^2 + pi_0``."""
        return self.pi[0] * self.direction_norm**2 + self.pi[-1]

    def covariance(self):
        G = self.orthonormal_directions()[:, : self.q] * self.direction_norm
        return (G * np.array(self.pi[:-1])) @ G.T + self.pi[-1] * np.eye(self.p)


def lrs_like(**overrides):
    """Smooth unimodal mean; overlapping bumps at 0.3 and 0.55, outlier bump at 0.8."""
    return ScenarioConfig(**{"name": "lrs-like", **overrides})


def macs_like(**overrides):
    """Decreasing mean; level and slope directions, quadratic outlier direction."""
    base = dict(name="macs-like", mean_fn=macs_mean, direction_fns=(poly_level, poly_slope),
                extra_fn=poly_quadratic)
    return ScenarioConfig(**{**base, **overrides})


PRESETS = {"lrs-like": lrs_like, "macs-like": macs_like}


@dataclass(frozen=True)
class ContaminationSpec:
    eps_case: float = 0.0
    eps_cell: float = 0.0
    K: float = 0.0
    case_direction: str = "next_eigenvector"
    case_center: str = "mean"

    def __post_init__(self):
        if self.case_center not in CASE_CENTERS:
            raise ValueError(f"case_center must be one of {CASE_CENTERS}")
        if not 0.0 <= self.eps_case < 0.5:
            raise ValueError("eps_case must lie in [0, 0.5)")
        if not 0.0 <= self.eps_cell < 1.0:
            raise ValueError("eps_cell must lie in [0, 1)")
        if self.K < 0:
            raise ValueError("K must be nonnegative")
        if self.case_direction not in CASE_DIRECTIONS:
            raise ValueError(f"case_direction must be one of {CASE_DIRECTIONS}")


@dataclass(frozen=True)
class Sample:
    """A generated complete sample with its ground truth."""

    data: LongitudinalDataset
    mu: np.ndarray
    directions: np.ndarray  # p x q orthonormal
    next_direction: Optional[np.ndarray]
    sigma_diag: np.ndarray
    lambda1: float


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def generate_sample(scenario: ScenarioConfig, seed=None):
    """Draw ``n`` curves ``mu + sum_k sqrt(pi_k) z_k g_k + sqrt(pi_0) eps``."""
    rng = _rng(seed)
    t = scenario.grid
    Q = scenario.orthonormal_directions()
    q = scenario.q
    G = Q[:, :q] * scenario.direction_norm
    mu = np.broadcast_to(scenario.mean_fn(t), t.shape).astype(float)
    z = rng.standard_normal((scenario.n, q)) * np.sqrt(scenario.pi[:-1])
    noise = rng.standard_normal((scenario.n, scenario.p)) * math.sqrt(scenario.pi[-1])
    X = mu + z @ G.T + noise
    sigma_diag = (G**2) @ np.array(scenario.pi[:-1]) + scenario.pi[-1]
    data = LongitudinalDataset.from_arrays(t, X, case_ids=[f"c{i}" for i in range(scenario.n)])
    return Sample(data, mu, Q[:, :q].copy(), Q[:, q].copy() if Q.shape[1] > q else None,
                  sigma_diag, scenario.lambda1)


def contaminate_case(data: LongitudinalDataset, spec: ContaminationSpec, sample: Sample, seed=None):
    """Replace the first ``floor(eps_case * n)`` curves by outlying curves.

    The new curves are ``mu + K sqrt(lambda_1) c`` (``case_center="mean"``)
    or ``K sqrt(lambda_1) c`` (``case_center="zero"``), where ``c`` is a
    unit vector orthogonal to the model directions: the next scenario
    direction, or a random one. The mask is left unchanged.

    Returns
    -------
    data : LongitudinalDataset
    clean_rows : ndarray
        Indices of the untouched curves.
    """
    n_out = int(math.floor(spec.eps_case * data.n + 1e-9))
    clean = np.arange(n_out, data.n)
    if n_out == 0:
        return data, clean
    if spec.case_direction == "next_eigenvector":
        if sample.next_direction is None:
            raise ValueError("scenario has no next direction for casewise outliers")
        c = sample.next_direction
    else:
        v = _rng(seed).standard_normal(data.p)
        E = sample.directions
        v = v - E @ (E.T @ v)
        c = v / np.linalg.norm(v)
    X = np.array(data.values)
    X[:n_out] = spec.K * math.sqrt(sample.lambda1) * c
    if spec.case_center == "mean":
        X[:n_out] += sample.mu
    return data.with_values(X), clean


def contaminate_cell(data: LongitudinalDataset, spec: ContaminationSpec, sigma_diag, seed=None):
    """Shift each observed cell by ``K * sigma_jj`` with probability ``eps_cell``."""
    rng = _rng(seed)
    hit = (rng.random(data.values.shape) < spec.eps_cell) & data.mask
    if spec.K == 0 or not hit.any():
        return data
    X = np.array(data.values)
    X[hit] += spec.K * np.broadcast_to(np.asarray(sigma_diag, dtype=float), X.shape)[hit]
    return data.with_values(X)


def per_row_mae(reference, fitted, cells=None):
    """Mean absolute error of each row over ``cells`` (all cells by default)."""
    A = np.abs(np.asarray(reference, dtype=float) - np.asarray(fitted, dtype=float))
    if cells is None:
        return A.mean(axis=1)
    cells = np.asarray(cells, dtype=bool)
    counts = cells.sum(axis=1)
    out = np.full(A.shape[0], np.nan)
    ok = counts > 0
    out[ok] = np.where(cells, A, 0.0).sum(axis=1)[ok] / counts[ok]
    return out


def mae(reference, fitted, rows=None, cells=None):
    """Average ``|reference - fitted|`` over the chosen rows and cells.

    ``rows`` selects cases (all by default); ``cells`` is an optional
    boolean mask restricting the cells (all by default).
    """
    A = np.abs(np.asarray(reference, dtype=float) - np.asarray(fitted, dtype=float))
    if A.ndim == 1:
        A = A[None, :]
    sel = np.ones(A.shape, dtype=bool) if cells is None else np.array(cells, dtype=bool).reshape(A.shape)
    if rows is not None:
        keep = np.zeros(A.shape[0], dtype=bool)
        keep[np.asarray(rows, dtype=int)] = True
        sel &= keep[:, None]
    if not sel.any():
        raise ValueError("no cells to average over")
    return float(A[sel].mean())


def _orthonormal_basis(A, what):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[-1] <= max(A.shape) * np.finfo(float).eps * s[0]:
        raise ValueError(f"{what} is rank deficient")
    return U


def subspace_sin_angle(E_hat, E_true):
    """Sine of the largest principal angle between two column spaces of equal dimension."""
    Qa = _orthonormal_basis(E_hat, "E_hat")
    Qb = _orthonormal_basis(E_true, "E_true")
    if Qa.shape != Qb.shape:
        raise ValueError("subspaces must have the same dimension")
    # ||(I - Qb Qb') Qa||_2 avoids the cancellation of sqrt(1 - cos^2)
    s = np.linalg.norm(Qa - Qb @ (Qb.T @ Qa), ord=2)
    return float(min(1.0, s))


# --------------------------------------------------------------------------
# Monte Carlo driver


@dataclass(frozen=True)
class Setting:
    """One contamination row of a results table."""

    eps_case: float = 0.0
    eps_cell: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "eps_case", float(self.eps_case))
        object.__setattr__(self, "eps_cell", float(self.eps_cell))

    @property
    def clean(self):
        return self.eps_case == 0 and self.eps_cell == 0


def default_k_grid(setting: Setting, d=1.0, n_points=5):
    """K sweep: casewise 0.1-3 (complete) or 1-6 (incomplete); cellwise 1-7 or 1-6."""
    if setting.clean:
        return (0.0,)
    if setting.eps_case > 0:
        lo, hi = (0.1, 3.0) if d >= 1.0 else (1.0, 6.0)
    else:
        lo, hi = (1.0, 7.0) if d >= 1.0 else (1.0, 6.0)
    return tuple(float(k) for k in np.linspace(lo, hi, n_points))


@dataclass(frozen=True)
class Record:
    scenario: str
    estimator: str
    d: float
    eps_case: float
    eps_cell: float
    K: float
    replication: int
    mae: float
    sin_alpha: float
    status: str

    FIELDS = ("scenario", "estimator", "d", "eps_case", "eps_cell", "K", "replication",
              "mae", "sin_alpha", "status")


@dataclass(frozen=True)
class _Task:
    scenario: ScenarioConfig
    estimators: tuple
    d: float
    setting: Setting
    K: float
    replication: int
    seed: int
    mm_config: MmConfig
    case_direction: str
    case_center: str = "mean"


def _seed(master, *key):
    return np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))


def fit_estimator(name, data, q, mm_config: Optional[MmConfig] = None):
    if name == "mm":
        cfg = mm_config if mm_config is not None else MmConfig(q=q)
        return fit_mm(data, cfg)
    if name == "naive":
        return fit_naive(data, q)
    if name == "classical":
        return fit_classical(data, q)
    raise ValueError(f"unknown estimator {name!r}")


def prepare_replication(scenario, d, setting, K, replication, seed, case_direction="next_eigenvector",
                        case_center="mean"):
    """Data for one replication: (sample, contaminated data, clean row indices).

    The clean sample, the decimation draws and the contamination draws
    come from separate streams keyed by the replication, so every K,
    setting and decimation rate sees the same underlying curves.
    """
    sample = generate_sample(scenario, _seed(seed, replication, 0))
    data = sample.data
    if d < 1.0:
        data = decimate(data, d, np.random.default_rng(_seed(seed, replication, 1)))
    spec = ContaminationSpec(setting.eps_case, setting.eps_cell, K, case_direction, case_center)
    clean = np.arange(data.n)
    if setting.eps_case > 0:
        data, clean = contaminate_case(data, spec, sample, np.random.default_rng(_seed(seed, replication, 2)))
    if setting.eps_cell > 0:
        data = contaminate_cell(data, spec, sample.sigma_diag, np.random.default_rng(_seed(seed, replication, 3)))
    return sample, data, clean


def _run_task(task: _Task):
    with threadpool_limits(limits=1):
        sample, data, clean = prepare_replication(task.scenario, task.d, task.setting, task.K,
                                                  task.replication, task.seed, task.case_direction,
                                                  task.case_center)
        out = []
        for name in task.estimators:
            base = dict(scenario=task.scenario.name, estimator=name, d=task.d,
                        eps_case=task.setting.eps_case, eps_cell=task.setting.eps_cell,
                        K=task.K, replication=task.replication)
            if name != "mm" and not data.is_complete:
                out.append(Record(**base, mae=math.nan, sin_alpha=math.nan, status="n/a"))
                continue
            try:
                model = fit_estimator(name, data, task.scenario.q, task.mm_config)
                err = mae(sample.data.values, model.fitted_values(), rows=clean)
                ang = subspace_sin_angle(model.directions, sample.directions)
                out.append(Record(**base, mae=err, sin_alpha=ang, status="ok"))
            except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                out.append(Record(**base, mae=math.nan, sin_alpha=math.nan,
                                  status=f"error: {type(exc).__name__}"))
    return out


@dataclass
class EvaluationReport:
    """Per-K means and max-over-K summaries for one estimator and table cell."""

    scenario: str
    estimator: str
    d: float
    eps_case: float
    eps_cell: float
    K: list
    mean_mae: list
    mean_sin_alpha: list
    n_ok: list
    per_replication: dict = field(default_factory=dict)

    @property
    def applicable(self):
        return any(self.n_ok)

    @property
    def max_mae(self):
        vals = [v for v in self.mean_mae if not math.isnan(v)]
        return max(vals) if vals else math.nan

    @property
    def max_sin_alpha(self):
        vals = [v for v in self.mean_sin_alpha if not math.isnan(v)]
        return max(vals) if vals else math.nan

    @property
    def worst_K(self):
        if not self.applicable:
            return math.nan
        return self.K[int(np.nanargmax(self.mean_mae))]


@dataclass
class MonteCarloResult:
    records: list

    def reports(self):
        return aggregate(self.records)

    def raw_csv(self):
        return records_to_csv(self.records)

    def table_csv(self):
        return table_csv(self.reports())


def run_monte_carlo(scenario: ScenarioConfig, settings: Sequence[Setting] = (Setting(),),
                    estimators=ESTIMATORS, d_values=(1.0,), seed=0, replications=None,
                    k_grids=None, n_k=5, threads=1, mm_config: Optional[MmConfig] = None,
                    case_direction="next_eigenvector", case_center="mean"):
    """Sweep estimators x decimation rates x settings x K x replications.

    Parameters
    ----------
    k_grids : dict, optional
        Maps a :class:`Setting` (or ``(eps_case, eps_cell)``) to its K values;
        missing entries use :func:`default_k_grid` with ``n_k`` points.
    threads : int
        Worker processes. Results do not depend on it.
    """
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {name!r}")
    R = scenario.replications if replications is None else int(replications)
    mm_config = mm_config if mm_config is not None else MmConfig(q=scenario.q)
    grids = {}
    for key, ks in (k_grids or {}).items():
        grids[key if isinstance(key, Setting) else Setting(*key)] = tuple(float(k) for k in ks)
    tasks = []
    for d in d_values:
        for setting in settings:
            ks = grids.get(setting) or default_k_grid(setting, d, n_k)
            for K in ks:
                for r in range(R):
                    tasks.append(_Task(scenario, tuple(estimators), float(d), setting, float(K), r,
                                       int(seed), mm_config, case_direction, case_center))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (8 * threads))))
    else:
        chunks = [_run_task(t) for t in tasks]
    return MonteCarloResult([rec for chunk in chunks for rec in chunk])


def _key(rec):
    return (rec.scenario, rec.estimator, rec.d, rec.eps_case, rec.eps_cell)


def aggregate(records):
    """Group records into :class:`EvaluationReport` objects (one per estimator and table cell)."""
    groups = defaultdict(lambda: defaultdict(list))
    order = []
    for rec in records:
        k = _key(rec)
        if k not in groups:
            order.append(k)
        groups[k][rec.K].append(rec)
    reports = []
    for k in order:
        byK = groups[k]
        Ks = sorted(byK)
        rep = EvaluationReport(*k, K=Ks, mean_mae=[], mean_sin_alpha=[], n_ok=[])
        for K in Ks:
            ok = [r for r in byK[K] if r.status == "ok"]
            rep.n_ok.append(len(ok))
            rep.mean_mae.append(float(np.mean([r.mae for r in ok])) if ok else math.nan)
            rep.mean_sin_alpha.append(float(np.mean([r.sin_alpha for r in ok])) if ok else math.nan)
            rep.per_replication[K] = [(r.replication, r.mae, r.sin_alpha) for r in byK[K]]
        reports.append(rep)
    return reports


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(Record.FIELDS)
    for rec in records:
        w.writerow([_fmt(getattr(rec, f)) for f in Record.FIELDS])
    return buf.getvalue()


def records_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != Record.FIELDS:
        raise ValueError("not a raw simulation CSV (unexpected header)")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(Record.FIELDS):
            raise ValueError(f"line {line}: expected {len(Record.FIELDS)} fields")
        try:
            out.append(Record(row[0], row[1], float(row[2]), float(row[3]), float(row[4]),
                              float(row[5]), int(row[6]), float(row[7]), float(row[8]), row[9]))
        except ValueError as exc:
            raise ValueError(f"line {line}: {exc}") from None
    return out


TABLE_FIELDS = ("scenario", "d", "eps_case", "eps_cell", "estimator", "max_mae", "worst_K",
                "max_sin_alpha", "n_K", "replications")


def table_rows(reports):
    rows = []
    for rep in reports:
        if rep.applicable:
            rows.append([rep.scenario, rep.d, rep.eps_case, rep.eps_cell, rep.estimator, rep.max_mae,
                         rep.worst_K, rep.max_sin_alpha, len(rep.K), min(rep.n_ok)])
        else:
            rows.append([rep.scenario, rep.d, rep.eps_case, rep.eps_cell, rep.estimator, "n/a", "n/a",
                         "n/a", len(rep.K), 0])
    return rows


def table_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_FIELDS)
    for row in table_rows(reports):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def format_table(reports):
    """Table with rows (d, eps_case, eps_cell) and one MAE / sin column pair per estimator."""
    ests = [e for e in ESTIMATORS if any(r.estimator == e for r in reports)]
    cells = {}
    rows = []
    for rep in reports:
        key = (rep.d, rep.eps_case, rep.eps_cell)
        if key not in rows:
            rows.append(key)
        cells[key + (rep.estimator,)] = rep
    head = f"{'d':>5} {'eps_case':>8} {'eps_cell':>8} " + " ".join(
        f"{e + ' MAE':>14} {e + ' sin':>14}" for e in ests)
    lines = [head]
    for key in rows:
        parts = [f"{key[0]:>5.2f} {key[1]:>8.3f} {key[2]:>8.3f}"]
        for e in ests:
            rep = cells.get(key + (e,))
            if rep is None or not rep.applicable:
                parts.append(f"{'n/a':>14} {'n/a':>14}")
            else:
                parts.append(f"{rep.max_mae:>14.4f} {rep.max_sin_alpha:>14.4f}")
        lines.append(" ".join(parts))
    return "\n".join(lines)


CURVE_FIELDS = ("scenario", "estimator", "d", "eps_case", "eps_cell", "metric", "K", "mean", "n")


def curve_rows(records):
    """Per (estimator, metric, K) means for each contaminated setting.

    Each curve starts at ``K = 0`` with the clean-setting value of the same
    estimator and decimation rate when the raw records contain it.
    """
    reports = aggregate(records)
    clean = {(r.scenario, r.estimator, r.d): r for r in reports if r.eps_case == 0 and r.eps_cell == 0}
    rows = []
    for rep in reports:
        base = clean.get((rep.scenario, rep.estimator, rep.d))
        for metric, attr in (("mae", "mean_mae"), ("sin_alpha", "mean_sin_alpha")):
            pts = list(zip(rep.K, getattr(rep, attr), rep.n_ok))
            if base is not None and base is not rep and 0.0 not in rep.K:
                pts = [(0.0, getattr(base, attr)[0], base.n_ok[0])] + pts
            for K, v, n in pts:
                rows.append([rep.scenario, rep.estimator, rep.d, rep.eps_case, rep.eps_cell, metric, K, v, n])
    return rows


def curves_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for row in curve_rows(records):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()
