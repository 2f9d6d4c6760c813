import numpy as np
import pytest

from dfr.basis import QUAD_GRID, QUAD_WEIGHTS, fourier
from dfr.errors import InvalidStateError
from dfr.estep import MonteCarloDraws
from dfr.fit import (
    FitConfig,
    average_smoothness,
    fit,
    initialize_params,
    predict_conditional,
    predict_mean,
)
from dfr.model import ModelParams, ObservedDataset
from dfr.simulate import SimScenario, generate_dataset


@pytest.fixture(scope="module")
def small_fit():
    data, truth = generate_dataset(SimScenario(N=30, M=12, seed=3))
    cfg = FitConfig(basis=fourier(5), K=20, max_iter=8, seed=5)
    return data, fit(data, cfg)


# -- configuration --------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [{"K": 0}, {"max_iter": 0}, {"tol": 1.5}, {"penalty_order": -1}, {"delta_grid": (0.0, 0.1)}, {"rescale": "x"}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FitConfig(**kw)


def test_config_round_trip_dict():
    cfg = FitConfig(basis=fourier(7), K=5, delta_grid=(0.2, 0.05))
    again = FitConfig(**cfg.to_dict())
    assert again.basis.J == 7 and again.delta_grid == (0.05, 0.2)


# -- initialization ----------------------------------------------------------------


def test_init_all_ones_positive_intercept():
    r = np.random.default_rng(0)
    N = 12
    data = ObservedDataset(
        np.column_stack([np.ones(N), r.standard_normal(N)]),
        [np.sort(r.random(6)) for _ in range(N)],
        [np.ones(6, dtype=int) for _ in range(N)],
    )
    b = fourier(7)
    p = initialize_params(data, b)
    assert np.all(p.B[0] @ b.evaluate(np.linspace(0, 1, 101)) > 0)
    assert p.sigma2 == 1.0
    kd = np.einsum("jm,jl,lm->m", b.quad_values, p.Sigma_theta, b.quad_values)
    assert kd @ QUAD_WEIGHTS == pytest.approx(1.0)


def test_init_empty_dataset():
    data = ObservedDataset(np.zeros((0, 1)), [], [])
    with pytest.raises(InvalidStateError):
        initialize_params(data, fourier(3))


def test_init_deterministic():
    data, _ = generate_dataset(SimScenario(N=10, M=6, seed=1))
    a, c = initialize_params(data, fourier(5)), initialize_params(data, fourier(5))
    assert a.B.tobytes() == c.B.tobytes()


# -- smoothness diagnostic ---------------------------------------------------------


def _draws(z):
    return MonteCarloDraws([None] * len(z), z, [None] * len(z))


def test_smoothness_zero_draws():
    assert average_smoothness(_draws([np.zeros((3, 5))] * 2), fourier(5).penalty_matrix(2)) == 0.0


def test_smoothness_constant_basis():
    r = np.random.default_rng(1)
    assert average_smoothness(_draws([r.standard_normal((4, 1))]), fourier(1).penalty_matrix(2)) == 0.0


def test_smoothness_single_draw():
    z = np.array([[0.0, 1.0, 2.0]])
    P = fourier(3).penalty_matrix(2)
    assert average_smoothness(_draws([z]), P) == pytest.approx(float(z[0] @ P @ z[0]))


# -- driver -----------------------------------------------------------------------


def test_trace_lengths(small_fit):
    data, res = small_fit
    n = res.n_iter
    assert res.sigma2_trace.shape == (n,) and res.xi_trace.shape == (n,)
    assert res.delta_trace.shape == (n,) and res.lambda_trace.shape == (n, data.N)
    assert np.all(np.isfinite(res.xi_trace))
    assert res.z_mean.shape == (data.N, 5)


def test_lambda_infinite_then_nonincreasing(small_fit):
    _, res = small_fit
    lam = res.lambda_trace
    assert np.all(np.isinf(lam[:2]))
    assert np.all(np.isfinite(lam[2:]))
    assert np.all(np.diff(lam[2:], axis=0) <= 0)


def test_reported_eigenfunctions(small_fit):
    _, res = small_fit
    phi = res.standardized.eigenfunctions(QUAD_GRID)
    assert np.abs((phi * QUAD_WEIGHTS) @ phi.T - np.eye(5)).max() < 1e-6


def test_determinism(small_fit):
    data, res = small_fit
    again = fit(data, res.config)
    for name in ("sigma2_trace", "xi_trace", "delta_trace", "lambda_trace", "forced_trace"):
        assert getattr(res, name).tobytes() == getattr(again, name).tobytes()
    assert res.params.B.tobytes() == again.params.B.tobytes()


def test_convergence_flag_reflects_windowed_change():
    data, _ = generate_dataset(SimScenario(N=20, M=8, seed=2))
    res = fit(data, FitConfig(basis=fourier(3), K=10, max_iter=40, tol=0.5, window=2, seed=1))
    assert res.converged and res.n_iter < 40
    strict = fit(data, FitConfig(basis=fourier(3), K=10, max_iter=3, tol=1e-9, window=2, seed=1))
    assert not strict.converged and strict.n_iter == 3


@pytest.mark.parametrize("mode", ["scalar", "kernel", "none"])
def test_rescale_modes_run(mode):
    data, _ = generate_dataset(SimScenario(N=15, M=6, seed=4))
    res = fit(data, FitConfig(basis=fourier(3), K=10, max_iter=3, seed=2, rescale=mode))
    assert res.params.sigma2 > 0


def test_scalar_rescale_keeps_unit_average_kernel(small_fit):
    _, res = small_fit
    b = res.basis
    kd = np.einsum("jm,jl,lm->m", b.quad_values, res.params.Sigma_theta, b.quad_values)
    assert kd @ QUAD_WEIGHTS == pytest.approx(1.0, rel=1e-10)


def test_degenerate_generation_small_leading_eigenvalue():
    # nearly no latent variation: the fit should not invent a dominant component
    sc = SimScenario(N=40, M=12, r=1e-4, rho=0.01, sigma2=1.0, seed=6)
    data, _ = generate_dataset(sc)
    res = fit(data, FitConfig(basis=fourier(3), K=20, max_iter=6, seed=3))
    assert res.standardized.eigvals[0] < 1.0
    assert np.all(np.isfinite(res.sigma2_trace))


def test_rejects_subject_without_observations():
    data = ObservedDataset(np.ones((2, 1)), [np.array([0.5]), np.array([])], [np.array([1]), np.array([])])
    with pytest.raises(InvalidStateError):
        fit(data, FitConfig(basis=fourier(3), K=5, max_iter=1))


# -- prediction -------------------------------------------------------------------


def _params(B, S=None, s2=0.5):
    B = np.atleast_2d(B)
    J = B.shape[1]
    return ModelParams(B, np.eye(J) / J if S is None else S, s2)


def test_predict_mean_zero_covariates():
    b = fourier(5)
    np.testing.assert_array_equal(predict_mean((_params(np.ones((2, 5))), b), [0, 0]), np.zeros(101))


def test_predict_mean_intercept_only():
    b = fourier(5)
    B = np.array([[0.3, -1.0, 0.2, 0.0, 0.5]])
    grid = np.linspace(0, 1, 31)
    np.testing.assert_allclose(predict_mean((_params(B), b), [1.0], grid), B[0] @ b.evaluate(grid))


def test_predict_mean_linear():
    r = np.random.default_rng(2)
    pb = (_params(r.standard_normal((3, 5))), fourier(5))
    x1, x2 = r.standard_normal(3), r.standard_normal(3)
    np.testing.assert_allclose(
        predict_mean(pb, x1 + x2), predict_mean(pb, x1) + predict_mean(pb, x2), atol=1e-12
    )


def test_predict_mean_length_mismatch():
    with pytest.raises(ValueError):
        predict_mean((_params(np.ones((2, 3))), fourier(3)), [1.0])


def test_predict_conditional_without_observations():
    pb = (_params(np.ones((2, 3))), fourier(3))
    np.testing.assert_array_equal(predict_conditional(pb, [1, 0.5], [], []), predict_mean(pb, [1, 0.5]))


def test_predict_conditional_degenerate_covariance():
    b = fourier(3)
    pb = (_params([[0.2, 0.1, -0.3]], np.zeros((3, 3))), b)
    out = predict_conditional(pb, [1.0], [1, 0, 1], [0.1, 0.5, 0.9])
    np.testing.assert_allclose(out, predict_mean(pb, [1.0]), atol=1e-12)


def test_predict_conditional_all_ones_lifts_curve():
    b = fourier(5)
    pb = (_params(np.zeros((1, 5)), np.diag([1.0, 0.1, 0.1, 0.05, 0.05]), 0.2), b)
    t = np.linspace(0, 1, 15)
    out = predict_conditional(pb, [1.0], np.ones(15, dtype=int), t, seed=4)
    assert np.mean(out > 0) > 0.9


def test_predict_conditional_deterministic(small_fit):
    data, res = small_fit
    a = predict_conditional(res, data.X[0], data.y[0], data.times[0], seed=7)
    c = predict_conditional(res, data.X[0], data.y[0], data.times[0], seed=7)
    assert a.tobytes() == c.tobytes()
