import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from dfr.basis import QUAD_GRID, QUAD_WEIGHTS
from dfr.simulate import (
    GroundTruth,
    SimScenario,
    coefficient_functions,
    dichotomize,
    eigenfunction,
    generate_dataset,
    kernel_diag_true,
    mse_eval,
    qc_mean,
    qc_probabilities,
    sample_timepoints,
    standardized_truth,
    true_eigenstructure,
)


def test_eigenvalues_reference_setting():
    nu, _ = true_eigenstructure(2, 1.5, 0.1)
    np.testing.assert_allclose(nu, [1.5, 0.15])


def test_eigenvalues_geometric():
    nu, _ = true_eigenstructure(3, 1.5, 0.4)
    np.testing.assert_allclose(nu, [1.5, 0.6, 0.24])


def test_eigenfunctions_orthonormal():
    _, psi = true_eigenstructure(4, 1.0, 0.5)
    V = np.array([f(QUAD_GRID) for f in psi])
    assert np.abs((V * QUAD_WEIGHTS) @ V.T - np.eye(4)).max() < 1e-8


def test_eigenfunction_indexing():
    t = np.linspace(0, 1, 9)
    np.testing.assert_allclose(eigenfunction(2)(t), np.sqrt(2) * np.sin(2 * np.pi * t))
    np.testing.assert_allclose(eigenfunction(4)(t), np.sqrt(2) * np.sin(4 * np.pi * t))
    with pytest.raises(ValueError):
        eigenfunction(1)


@pytest.mark.parametrize(
    "kw", [{"rho": 1.0}, {"r": 0.0}, {"p_c": 1.0}, {"M": 1}, {"design": "X"}, {"coefficient_case": "odd"}]
)
def test_scenario_validation(kw):
    with pytest.raises(ValueError):
        SimScenario(**kw)


# -- sampling designs -------------------------------------------------------------


def test_regular_design():
    ts = sample_timepoints("R", 4, 0.5, np.random.default_rng(0), N=3)
    for t in ts:
        np.testing.assert_allclose(t, [0.25, 0.5, 0.75, 1.0])


def test_qc_small_case():
    np.testing.assert_allclose(qc_probabilities(3, 0.5), [1 / 7, 2 / 7, 4 / 7])


def test_truncated_design_is_a_prefix():
    for t in sample_timepoints("RT", 10, 0.5, np.random.default_rng(1), N=50):
        np.testing.assert_allclose(t, np.arange(1, t.size + 1) / 10)


def test_irregular_design_sorted_in_unit_interval():
    for t in sample_timepoints("IRS", 10, 0.5, np.random.default_rng(2), N=50):
        assert t.size >= 1 and np.all(np.diff(t) >= 0) and t.min() >= 0 and t.max() <= 1


def test_missing_design_expected_size():
    M, pc, n = 12, 0.5, 10_000
    sizes = np.array([t.size for t in sample_timepoints("RM", M, pc, np.random.default_rng(3), N=n)])
    se = sizes.std(ddof=1) / np.sqrt(n)
    assert abs(sizes.mean() - qc_mean(M, pc)) < 3 * se
    assert sizes.min() >= 1


def test_expected_sizes_agree_across_designs():
    M, pc, n = 12, 0.5, 10_000
    means, ses = [], []
    for d in ("RT", "RM", "IRS"):
        s = np.array([t.size for t in sample_timepoints(d, M, pc, np.random.default_rng(4), N=n)])
        means.append(s.mean())
        ses.append(s.std(ddof=1) / np.sqrt(n))
    for a in range(3):
        for b in range(a + 1, 3):
            assert abs(means[a] - means[b]) < 3 * np.hypot(ses[a], ses[b])


# -- generation ----------------------------------------------------------------


def test_degenerate_positive_latent_gives_all_ones(monkeypatch):
    import dfr.simulate as sim

    monkeypatch.setattr(sim, "coefficient_functions", lambda case: [lambda t: np.ones_like(t), lambda t: 0 * t])
    monkeypatch.setattr(sim, "true_eigenstructure", lambda p, r, rho: (np.zeros(p), true_eigenstructure(p, r, rho)[1]))
    data, _ = sim.generate_dataset(SimScenario(N=20, M=8, sigma2=0.0, seed=1))
    assert all(np.all(y == 1) for y in data.y)


def test_symmetric_latent_pools_to_one_half(monkeypatch):
    import dfr.simulate as sim

    monkeypatch.setattr(sim, "coefficient_functions", lambda case: [lambda t: 0 * t, lambda t: 0 * t])
    data, _ = sim.generate_dataset(SimScenario(N=400, M=36, seed=2))
    y = np.concatenate(data.y)
    # subjects are independent; score correlation within a subject inflates the variance
    per_subject = np.array([v.mean() for v in data.y])
    se = per_subject.std(ddof=1) / np.sqrt(data.N)
    assert y.size >= 10_000
    assert abs(y.mean() - 0.5) < 3 * se


def test_marginal_probability_matches_probit():
    sc = SimScenario(N=4000, M=4, sigma2=0.2, seed=3)
    data, truth = generate_dataset(sc)
    beta = coefficient_functions("simple")
    for j, t in enumerate([0.25, 0.5, 0.75]):
        # condition on x near 0 so the mean is beta0(t)
        sel = np.abs(truth.x) < 0.05
        y = np.array([v[j] for v in data.y])[sel]
        K = kernel_diag_true(truth.nu, truth.psi, t)
        mean = beta[0](t) + beta[1](t) * truth.x[sel]
        p = norm.cdf(mean / np.sqrt(K * (1 + sc.sigma2)))
        se = np.sqrt(np.sum(p * (1 - p))) / sel.sum()
        assert abs(y.mean() - p.mean()) < 3 * se


def test_kernel_matches_constructed_covariance():
    nu, psi = true_eigenstructure(4, 1.5, 0.4)
    t = np.linspace(0, 1, 101)
    Psi = np.array([f(t) for f in psi])
    C = Psi.T @ np.diag(nu) @ Psi
    np.testing.assert_allclose(kernel_diag_true(nu, psi, t), np.diag(C), atol=1e-10)
    assert np.all(kernel_diag_true(nu, psi, t) > 0)


@given(st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
def test_dichotomization_scale_invariant(c, seed):
    r = np.random.default_rng(seed)
    latent, noise = r.standard_normal((2, 50))
    assert np.array_equal(dichotomize(latent, noise), dichotomize(c * latent, c * noise))


def test_generation_deterministic_and_designs_share_paths():
    a, ta = generate_dataset(SimScenario(design="R", N=10, M=8, seed=5))
    b, tb = generate_dataset(SimScenario(design="R", N=10, M=8, seed=5))
    assert all(np.array_equal(u, v) for u, v in zip(a.y, b.y))
    rt, _ = generate_dataset(SimScenario(design="RT", N=10, M=8, seed=5))
    for full, pre in zip(a.y, rt.y):
        assert np.array_equal(full[: pre.size], pre)


def test_standardized_truth_properties():
    _, truth = generate_dataset(SimScenario(N=2, seed=0))
    g = truth.grid
    phi = truth.phi
    from dfr.basis import simpson_weights

    w = simpson_weights(g.size, 0.0, 1.0)
    # standardized eigenfunctions are orthonormal and the kernel diagonal is one
    assert np.abs((phi * w) @ phi.T - np.eye(phi.shape[0])).max() < 1e-3
    np.testing.assert_allclose(np.einsum("j,jg->g", truth.rho, phi**2), 1.0, atol=1e-10)
    np.testing.assert_allclose(truth.alpha[0], -np.cos(2 * np.pi * g) / np.sqrt(truth.kernel_diag))


# -- evaluation -----------------------------------------------------------------


class _Std:
    def __init__(self, alpha, phi, vals, grid):
        self._a, self._p, self.eigvals, self._g = alpha, phi, vals, grid

    def alpha_curves(self, grid):
        assert grid is self._g
        return self._a

    def eigenfunctions(self, grid):
        return self._p


class _Fit:
    def __init__(self, std, sigma2):
        self.standardized = std

        class P:
            pass

        self.params = P()
        self.params.sigma2 = sigma2


@pytest.fixture(scope="module")
def truth():
    return generate_dataset(SimScenario(N=3, seed=1))[1]


def test_mse_zero_for_truth(truth):
    f = _Fit(_Std(truth.alpha, truth.phi, truth.rho, truth.grid), truth.scenario.sigma2)
    assert all(v == 0.0 for v in mse_eval(f, truth).values())


def test_mse_constant_offset(truth):
    f = _Fit(_Std(truth.alpha + 0.1, truth.phi, truth.rho, truth.grid), truth.scenario.sigma2)
    m = mse_eval(f, truth)
    assert m["beta0"] == pytest.approx(0.01) and m["beta1"] == pytest.approx(0.01)


def test_mse_sign_alignment(truth):
    phi = truth.phi.copy()
    phi[0] = -phi[0] + 0.05
    flip = mse_eval(_Fit(_Std(truth.alpha, phi, truth.rho, truth.grid), 0.2), truth)
    same = mse_eval(_Fit(_Std(truth.alpha, -phi, truth.rho, truth.grid), 0.2), truth)
    assert flip["psi1"] == pytest.approx(same["psi1"]) and flip["psi1"] == pytest.approx(0.0025)


def test_mse_scalar_parameters(truth):
    vals = truth.rho.copy()
    vals[0] += 0.3
    m = mse_eval(_Fit(_Std(truth.alpha, truth.phi, vals, truth.grid), 0.5), truth)
    assert m["nu1"] == pytest.approx(0.09) and m["sigma2"] == pytest.approx(0.09)
