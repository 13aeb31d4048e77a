import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from robfpca import mm
from robfpca.data import LongitudinalDataset, decimate, from_matrix, load_csv, write_csv
from robfpca.mm import MmConfig, fit_mm
from robfpca.model import FpcaModel, explained_proportion, load_model, save_model
from robfpca.naive import fit_classical
from robfpca.simulation import generate_sample, lrs_like, macs_like, mae, subspace_sin_angle
from robfpca.smoothing import make_basis

GRID = np.linspace(0, 1, 50)


def smooth_dir(t, k=1):
    v = np.sin(k * np.pi * t) + 0.3 * t
    return v / np.linalg.norm(v)


def rank1_data(rng, n=60, noise=0.0, p=50):
    t = np.linspace(0, 1, p)
    h = smooth_dir(t)
    beta = rng.normal(0, 3, n)
    Y = np.outer(beta, h) + noise * rng.standard_normal((n, p))
    return t, h, beta, Y


# --- stage 0 and the criterion


def test_local_location_scale_recovers_smooth_mean(rng):
    t = GRID
    mu = 3 + np.sin(2 * np.pi * t)
    sd = 0.2
    X = mu + sd * rng.standard_normal((200, 50))
    mu0, sigma0 = mm.local_location_scale(from_matrix(X, t))
    assert np.max(np.abs(mu0 - mu)) < 3 * sd
    assert np.all(sigma0 > 0)
    Xc = X.copy()
    hit = rng.random(X.shape) < 0.05
    Xc[hit] += 50 * sd
    mu0c, _ = mm.local_location_scale(from_matrix(Xc, t))
    assert np.max(np.abs(mu0c - mu0)) < 0.5 * sd


def test_local_location_scale_constant_columns():
    X = np.full((10, 20), 4.0)
    mu0, sigma0 = mm.local_location_scale(from_matrix(X))
    assert np.allclose(mu0, 4.0, atol=1e-12)
    assert np.all(sigma0 > 0) and np.ptp(sigma0) == 0


def test_unexplained_variance_examples(rng):
    s = rng.uniform(0.5, 2, 8)
    assert mm.unexplained_variance(np.zeros((5, 8)), s) == 0
    R = 10 * np.sign(rng.standard_normal((5, 8))) * s * 3.44
    assert mm.unexplained_variance(R, s) == pytest.approx(np.sum(s**2) * 5 / 40, rel=1e-14)
    R = rng.standard_normal((5, 8))
    mask = rng.random((5, 8)) < 0.7
    mask[:, 0] = True
    total, count = 0.0, 0
    for i in range(5):
        for j in range(8):
            if mask[i, j]:
                u = min(abs(R[i, j] / s[j]) / 3.44, 1.0)
                total += s[j] ** 2 * (1 - (1 - u * u) ** 3)
                count += 1
    assert mm.unexplained_variance(np.where(mask, R, np.nan), s, mask) == pytest.approx(total / count, rel=1e-12)


# --- initial values


def test_init_direction_gaussian(rng):
    e1 = smooth_dir(GRID, 2)
    cov = 0.6 * np.outer(e1, e1) + 0.05 * np.eye(50)
    Y = rng.multivariate_normal(np.zeros(50), cov, size=400)
    basis = make_basis(GRID)
    _, h = mm.init_direction(Y, basis)
    assert subspace_sin_angle(h[:, None], e1[:, None]) < 0.15
    assert np.linalg.norm(h) == pytest.approx(1.0)


def test_init_direction_resists_cellwise_outliers(rng):
    e1 = smooth_dir(GRID, 2)
    cov = 0.6 * np.outer(e1, e1) + 0.05 * np.eye(50)
    Y = rng.multivariate_normal(np.zeros(50), cov, size=400)
    basis = make_basis(GRID)
    _, h = mm.init_direction(Y, basis)
    Yc = Y.copy()
    sd = np.sqrt(np.diag(cov))
    hit = rng.random(Y.shape) < 0.2
    Yc[hit] += (6 * np.broadcast_to(sd, Y.shape))[hit]
    _, hc = mm.init_direction(Yc, basis)
    a = subspace_sin_angle(h[:, None], e1[:, None])
    ac = subspace_sin_angle(hc[:, None], e1[:, None])
    assert ac - a < 0.1


def test_init_direction_rank_one_noiseless(rng):
    t, h, beta, Y = rank1_data(rng)
    _, h0 = mm.init_direction(Y, make_basis(t))
    assert subspace_sin_angle(h0[:, None], h[:, None]) < 1e-2


def test_init_direction_sparse_uses_smoother(rng):
    t, h, beta, Y = rank1_data(rng, n=120, noise=0.05)
    data = decimate(from_matrix(Y, t), 0.3, 1)
    Yz = np.where(data.mask, data.values, 0.0)
    _, counts = mm.robust_pairwise_covariance(Yz, data.mask)
    assert counts.min() < 10
    _, h0 = mm.init_direction(Yz, make_basis(t), data.mask)
    assert subspace_sin_angle(h0[:, None], h[:, None]) < 0.2


def test_init_scores_examples():
    h = np.array([0.5, 1.0, -0.4, 0.8, 0.3])
    Y = np.vstack([2 * h, 2 * h, np.array([1.0, 4, 2, 3, 9])])
    Y[1, 3] = 1000
    b = mm.init_scores(Y, h)
    assert b[0] == 2 and b[1] == 2
    assert mm.init_scores(Y[2:], np.ones(5))[0] == 3.0
    mask = np.array([[True, False, False, False, False]])
    assert mm.init_scores(Y[:1], np.array([0, 1, 1, 1, 1.0]), mask)[0] == 0.0


# --- one component


def _quadratic_config(**kw):
    return MmConfig(rho="quadratic", max_outer_iterations=5000, tolerance=1e-15, **kw)


def test_fit_component_quadratic_equals_rank_one_pca(rng):
    t = np.linspace(0, 1, 16)
    X = rng.standard_normal((40, 16)) @ np.diag(np.linspace(2, 0.3, 16)) + 1.0
    basis = make_basis(t, n_knots=12)
    assert basis.m == 16
    a0, h0 = mm.init_direction(X - X.mean(0), basis)
    b0 = mm.init_scores(X - X.mean(0), h0)
    fit = mm.fit_component(X, np.ones(16), basis, a0, b0, _quadratic_config())
    fitted = fit.mu_update + np.outer(fit.beta, fit.h(basis))
    Xc = X - X.mean(0)
    u, s, vt = np.linalg.svd(Xc, full_matrices=False)
    ref = X.mean(0) + s[0] * np.outer(u[:, 0], vt[0])
    assert np.linalg.norm(fitted - ref) / np.linalg.norm(ref) < 1e-6


def test_fit_component_exact_rank_one(rng):
    t, h, beta, Y = rank1_data(rng)
    basis = make_basis(t, n_knots=46)
    a0, h0 = mm.init_direction(Y, basis)
    fit = mm.fit_component(Y, np.ones(50), basis, a0, mm.init_scores(Y, h0), MmConfig())
    assert fit.trace[-1] <= 1e-12 * fit.trace[0] + 1e-20


@settings(max_examples=25)
@given(st.integers(0, 100_000), st.floats(0.0, 0.3), st.booleans())
def test_fit_component_descends(seed, eps, sparse):
    rng = np.random.default_rng(seed)
    t, h, beta, Y = rank1_data(rng, n=40, noise=0.3, p=30)
    hit = rng.random(Y.shape) < eps
    Y = Y + hit * rng.normal(0, 30, Y.shape)
    mask = rng.random(Y.shape) < (0.5 if sparse else 1.0)
    mask[np.arange(40), rng.integers(0, 30, 40)] = True
    basis = make_basis(t)
    Yz = np.where(mask, Y, 0.0)
    try:
        a0, h0 = mm.init_direction(Yz, basis, mask)
    except mm.DegenerateComponentError:
        return
    fit = mm.fit_component(Yz, np.full(30, 2.0), basis, a0, mm.init_scores(Yz, h0, mask),
                           MmConfig(tolerance=0.0, max_outer_iterations=30), mask)
    tr = np.array(fit.trace)
    assert np.all(np.diff(tr) <= 1e-10 * tr[:-1])


def test_fit_component_degenerate():
    basis = make_basis(GRID)
    Y = np.zeros((5, 50))
    a0 = np.linalg.lstsq(basis.B, np.ones(50), rcond=None)[0]
    with pytest.raises(mm.DegenerateComponentError):
        mm.fit_component(Y, np.ones(50), basis, a0, np.zeros(5))


# --- full fits


@pytest.fixture(scope="module")
def lrs_sample():
    return generate_sample(lrs_like(), 5)


@pytest.fixture(scope="module")
def lrs_fit(lrs_sample):
    return fit_mm(lrs_sample.data, MmConfig())


def test_fit_mm_model_invariants(lrs_fit):
    m = lrs_fit
    B = make_basis(m.grid).B
    assert np.array_equal(m.directions, B @ m.alpha.T)
    G = m.directions.T @ m.directions
    assert np.abs(G - np.diag(np.diag(G))).max() <= 1e-8 * np.abs(np.diag(G)).max()
    assert np.allclose(np.diag(G), 1.0)
    assert all(a >= b for a, b in zip(m.variance_trace, m.variance_trace[1:]))
    assert 0.0 <= m.explained <= 1.0
    assert len(m.sigma_stages) == m.q + 1
    for tr in m.flags["criterion_traces"]:
        assert np.all(np.diff(tr) <= 1e-10 * np.abs(tr[:-1]))


def test_fit_mm_close_to_classical_on_clean_data(lrs_sample, lrs_fit):
    X = lrs_sample.data.values
    e_mm = mae(X, lrs_fit.fitted_values())
    e_cl = mae(X, fit_classical(lrs_sample.data, 2).fitted_values())
    assert e_mm <= 1.15 * e_cl


def test_fit_mm_cellwise_robust(lrs_sample, lrs_fit):
    rng = np.random.default_rng(3)
    X = lrs_sample.data.values.copy()
    hit = rng.random(X.shape) < 1 / 50
    X[hit] += (7 * np.broadcast_to(lrs_sample.sigma_diag, X.shape))[hit]
    m = fit_mm(from_matrix(X, lrs_sample.data.grid))
    ref = lrs_sample.data.values
    assert mae(ref, m.fitted_values()) <= 1.15 * mae(ref, lrs_fit.fitted_values())


def test_classical_equivalence_quadratic_rho(rng):
    n, p, q = 25, 12, 2
    X = rng.standard_normal((n, p)) @ rng.standard_normal((p, p))
    data = from_matrix(X)
    m = fit_mm(data, _quadratic_config(q=q, n_knots=p - 4))
    ref = fit_classical(data, q).fitted_values()
    assert np.linalg.norm(m.fitted_values() - ref) / np.linalg.norm(ref) < 1e-6


def test_shift_equivariance(lrs_sample, lrs_fit):
    c = 5.0 - 3.0 * lrs_sample.data.grid  # linear, hence in the spline span
    shifted = from_matrix(lrs_sample.data.values + c, lrs_sample.data.grid)
    m = fit_mm(shifted)
    assert np.allclose(m.mu, lrs_fit.mu + c, atol=1e-6)
    assert np.allclose(m.directions, lrs_fit.directions, atol=1e-6)
    assert np.allclose(m.scores, lrs_fit.scores, atol=1e-6 * np.abs(lrs_fit.scores).max())


def test_complete_data_same_through_incomplete_path(tmp_path, lrs_sample, lrs_fit):
    write_csv(lrs_sample.data, tmp_path / "x.csv")
    loaded = load_csv(tmp_path / "x.csv")
    explicit = LongitudinalDataset.from_arrays(lrs_sample.data.grid, lrs_sample.data.values,
                                               np.ones((100, 50), bool), lrs_sample.data.case_ids)
    for data in (loaded, explicit):
        m = fit_mm(data)
        assert np.array_equal(m.fitted_values(), lrs_fit.fitted_values())
        assert np.array_equal(m.directions, lrs_fit.directions)


def test_q_larger_than_basis():
    data = from_matrix(np.random.default_rng(0).standard_normal((20, 12)))
    with pytest.raises(mm.TooManyComponentsError):
        fit_mm(data, MmConfig(q=6, knot_divisor=12))


def test_target_explained_stops_early(lrs_sample):
    full = fit_mm(lrs_sample.data, MmConfig(q=4))
    u = [1 - v / full.variance_trace[0] for v in full.variance_trace]
    target = 0.5 * (u[1] + u[2]) if u[2] > u[1] else u[1]
    m = fit_mm(lrs_sample.data, MmConfig(q=4, target_explained=min(target, 0.999)))
    k = next(i for i in range(1, 5) if u[i] >= target)
    assert m.q == k and m.explained >= target


def test_explained_on_lrs_red_like_scenario():
    # first two classical components carry 60% and 33% of the total variance
    norm = np.sqrt(0.05 * 50 * 0.93 / 0.07 / 0.9)
    s = generate_sample(lrs_like(direction_norm=norm, n=200), 17)
    cl = fit_classical(s.data, 2)
    assert cl.explained == pytest.approx(0.93, abs=0.03)
    u = fit_mm(s.data).explained
    assert 0.80 <= u <= 0.95


# --- final adjustment and prediction


def test_final_adjustment_exact_case(lrs_sample, lrs_fit):
    X = lrs_sample.data.values.copy()
    X[0] = lrs_fit.mu + 3 * lrs_fit.directions[:, 0]
    m = mm.final_adjustment(lrs_fit, from_matrix(X, lrs_sample.data.grid))
    assert np.allclose(m.scores[0], [3.0, 0.0], atol=1e-10)
    assert np.array_equal(m.directions, lrs_fit.directions) and np.array_equal(m.mu, lrs_fit.mu)


def test_final_adjustment_negligible_on_complete_data(lrs_sample):
    X = lrs_sample.data.values
    on = fit_mm(lrs_sample.data)
    off = fit_mm(lrs_sample.data, MmConfig(final_adjustment=False))
    a, b = mae(X, on.fitted_values()), mae(X, off.fitted_values())
    assert abs(a - b) < 0.01 * b


def test_final_adjustment_helps_sparse_data():
    s = generate_sample(macs_like(), 21)
    data = decimate(s.data, 0.25, 22)
    on = fit_mm(data)
    off = fit_mm(data, MmConfig(final_adjustment=False))
    X = s.data.values
    assert mae(X, on.fitted_values()) <= mae(X, off.fitted_values())


def test_final_adjustment_keeps_underdetermined_cases():
    s = generate_sample(macs_like(), 2)
    data = decimate(s.data, 0.03, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = fit_mm(data, MmConfig(q=2))
    few = np.flatnonzero(data.mask.sum(axis=1) < 2)
    assert few.size and set(few) <= set(m.flags["kept_scores"])


def test_predict_and_explained(lrs_fit):
    assert np.array_equal(mm.predict(lrs_fit, np.zeros(2)), lrs_fit.mu)
    assert np.array_equal(mm.predict(lrs_fit, [0.0, 1.0]), lrs_fit.mu + lrs_fit.directions[:, 1])
    assert np.array_equal(lrs_fit.predict(lrs_fit.scores[7]), lrs_fit.fitted_values()[7])
    m = FpcaModel(grid=GRID, mu=np.zeros(50), directions=np.zeros((50, 1)), scores=np.zeros((3, 1)),
                  estimator="mm", variance_trace=[2.0, 2.0])
    assert explained_proportion(m) == 0.0
    m.variance_trace = [2.0, 0.0]
    assert explained_proportion(m) == 1.0
    m.variance_trace = [0.0, 0.0]
    with pytest.raises(ValueError):
        explained_proportion(m)


def test_model_roundtrip_bit_for_bit(tmp_path, lrs_fit):
    save_model(lrs_fit, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert np.array_equal(back.fitted_values(), lrs_fit.fitted_values())
    assert np.array_equal(back.basis().B @ back.alpha.T, lrs_fit.directions)
    assert back.variance_trace == lrs_fit.variance_trace and back.explained == lrs_fit.explained
    for a, b in zip(back.sigma_stages, lrs_fit.sigma_stages):
        assert np.array_equal(a, b)
