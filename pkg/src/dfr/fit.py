"""Adaptive Monte Carlo EM driver and prediction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dfr import estep, mstep, sampling
from dfr.basis import QUAD_GRID, QUAD_WEIGHTS, BasisSystem
from dfr.errors import InvalidStateError
from dfr.model import ModelParams, ObservedDataset, check_design
from dfr.rng import PREDICT, stream

log = logging.getLogger(__name__)

INIT_RIDGE = 1e-2
PREDICT_DRAWS = 2000
PREDICT_BURN_IN = 100
RESCALE_MODES = ("scalar", "kernel", "none")


@dataclass
class FitConfig:
    """Settings of one AMCEM run."""

    basis: BasisSystem = field(default_factory=lambda: BasisSystem("fourier", 11))
    penalty_order: int = 2
    K: int = 100
    max_iter: int = 200
    tol: float = 1e-3
    window: int = 5
    delta_grid: Tuple[float, ...] = estep.DELTA_GRID
    burn_in: int = sampling.BURN_IN
    thin: int = sampling.THIN
    max_tries: int = sampling.MAX_TRIES
    seed: int = 0
    grid_size: int = 101
    rescale: str = "scalar"

    def __post_init__(self):
        if isinstance(self.basis, dict):
            self.basis = BasisSystem.from_dict(self.basis)
        self.delta_grid = tuple(sorted(float(d) for d in self.delta_grid))
        for name in ("K", "max_iter", "window", "burn_in", "thin", "max_tries", "grid_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.penalty_order < 0:
            raise ValueError("penalty_order must be >= 0")
        if not 0 < self.tol < 1:
            raise ValueError("tol must lie in (0, 1)")
        if not self.delta_grid or not all(0 < d < 1 for d in self.delta_grid):
            raise ValueError("delta_grid values must lie in (0, 1)")
        if self.rescale not in RESCALE_MODES:
            raise ValueError(f"rescale must be one of {RESCALE_MODES}, got {self.rescale!r}")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["basis"] = self.basis.to_dict()
        d["delta_grid"] = list(self.delta_grid)
        return d


@dataclass
class FitResult:
    params: ModelParams
    standardized: mstep.StandardizedEstimate
    basis: BasisSystem
    sigma2_trace: np.ndarray
    xi_trace: np.ndarray
    delta_trace: np.ndarray
    lambda_trace: np.ndarray  # (n_iter, N)
    forced_trace: np.ndarray
    converged: bool
    n_iter: int
    z_mean: np.ndarray  # (N, J) mean score draw of the last iteration
    w_mean: List[np.ndarray]
    last_draws: Optional[estep.MonteCarloDraws] = None
    config: Optional[FitConfig] = None

    @property
    def forced_total(self) -> int:
        return int(self.forced_trace.sum())


def initialize_params(data: ObservedDataset, basis: BasisSystem) -> ModelParams:
    """Starting values from per-subject penalized fits of the +/-1 working response."""
    if data.N == 0:
        raise InvalidStateError("cannot initialize from an empty dataset")
    check_design(data.X)
    J = basis.J
    P = basis.penalty_matrix(2 if basis.kind == "fourier" or basis.degree >= 2 else 1)
    pen = INIT_RIDGE * (P + np.eye(J))
    Z = np.empty((data.N, J))
    for i, (t, y) in enumerate(zip(data.times, data.y)):
        E = basis.evaluate(t)
        Z[i] = np.linalg.solve(E @ E.T + pen, E @ (2.0 * y - 1.0))
    B = np.linalg.lstsq(data.X, Z, rcond=None)[0]
    ee = np.einsum("jm,jm->m", basis.quad_values, basis.quad_values)
    scale = 1.0 / np.mean(ee)
    return ModelParams(B, scale * np.eye(J), 1.0)


def average_smoothness(draws: estep.MonteCarloDraws, P: np.ndarray) -> float:
    """Mean over subjects of the average roughness z' P z of their draws."""
    if draws.N == 0:
        raise InvalidStateError("no draws")
    return float(np.mean([np.mean(np.einsum("kj,jl,kl->k", z, P, z)) for z in draws.z]))


def _normalize_scale(B, St, basis, mode):
    """Normalize the scale of (B, Sigma_theta) after an M-step.

    ``scalar`` divides by the average kernel diagonal, which is exact for
    the identifiable parameters; ``kernel`` applies the pointwise
    standardizer D, which is exact only up to projection onto the basis.
    """
    if mode == "kernel":
        return mstep.rescale_params(B, St, basis)
    if mode == "scalar":
        c = float(mstep.kernel_diag(St, basis, QUAD_GRID) @ QUAD_WEIGHTS)
        return B / np.sqrt(c), St / c
    return B, St


def _rel_change(history: np.ndarray) -> np.ndarray:
    prev = np.abs(history[:-1])
    return np.abs(np.diff(history, axis=0)) / np.maximum(prev, 1e-12)


def fit(data: ObservedDataset, config: Optional[FitConfig] = None, init: Optional[ModelParams] = None) -> FitResult:
    """Run AMCEM until the windowed relative parameter change drops below ``tol``."""
    config = FitConfig() if config is None else config
    data.check()
    basis = config.basis
    P = basis.penalty_matrix(config.penalty_order)
    cache = estep.DataCache.build(data, basis)
    proj = mstep.reml_projector(data.X)
    params = initialize_params(data, basis) if init is None else init.copy()
    state = estep.SmoothingState.initial(data.N, config.delta_grid[0])

    sig2_tr, xi_tr, delta_tr, lam_tr, forced_tr, norms = [], [], [], [], [], []
    prev = None
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        state.iteration = it
        if it <= 2 or prev is None:
            state.lam = np.full(data.N, np.inf)
            state.delta = config.delta_grid[0]
        else:
            av = estep.av_curve(prev, data, basis, proj, config.delta_grid, cache)
            state.delta = estep.select_delta(av)
            state.lam = estep.update_lambda(prev.h, state.delta, state.lam)
        draws = estep.run_estep(
            params, data, basis, state, config.K, config.seed, P, cache,
            config.burn_in, config.thin, config.max_tries,
        )
        Z = draws.z_array()
        St = mstep.update_sigma_theta(Z, proj)
        B = mstep.update_B(Z, data.X)
        # residuals are weighted by the kernel diagonal of the updated Sigma_theta
        kd_new = [mstep.kernel_diag(St, basis, E=E) for E in cache.E]
        s2 = mstep.update_sigma2(draws.w, draws.z, cache.E, kd_new)
        B, St = _normalize_scale(B, St, basis, config.rescale)
        params = ModelParams(B, St, s2)

        sig2_tr.append(s2)
        xi_tr.append(average_smoothness(draws, P))
        delta_tr.append(state.delta)
        lam_tr.append(state.lam.copy())
        forced_tr.append(draws.forced)
        norms.append([np.linalg.norm(B), np.linalg.norm(St), s2])
        log.debug("iter %d sigma2=%.4g xi=%.4g delta=%.3g forced=%d", it, s2, xi_tr[-1], state.delta, draws.forced)
        prev = draws
        if it > config.window:
            rc = _rel_change(np.array(norms[-(config.window + 1) :]))
            if np.all(rc.mean(axis=0) < config.tol):
                converged = True
                break

    std = mstep.standardize(params.B, params.Sigma_theta, basis, config.grid)
    return FitResult(
        params=params,
        standardized=std,
        basis=basis,
        sigma2_trace=np.array(sig2_tr),
        xi_trace=np.array(xi_tr),
        delta_trace=np.array(delta_tr),
        lambda_trace=np.array(lam_tr),
        forced_trace=np.array(forced_tr),
        converged=converged,
        n_iter=it,
        z_mean=np.array([z.mean(axis=0) for z in prev.z]),
        w_mean=[w.mean(axis=0) for w in prev.w],
        last_draws=prev,
        config=config,
    )


# ---------------------------------------------------------------------------
# prediction


def _as_params(fit_or_params) -> Tuple[ModelParams, BasisSystem]:
    if isinstance(fit_or_params, FitResult):
        return fit_or_params.params, fit_or_params.basis
    params, basis = fit_or_params
    return params, basis


def predict_mean(fit_or_params, x, grid=None) -> np.ndarray:
    """Mean latent curve e(t)' B' x given covariates only (intercept included in x)."""
    params, basis = _as_params(fit_or_params)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != params.q:
        raise ValueError(f"covariate vector has length {x.size}, expected {params.q}")
    grid = np.linspace(0, 1, 101) if grid is None else np.asarray(grid, dtype=float)
    return basis.evaluate(grid).T @ (params.B.T @ x)


def predict_conditional(
    fit_or_params,
    x,
    y_obs,
    t_obs,
    grid=None,
    seed: int = 0,
    subject: int = 0,
    n_draws: int = PREDICT_DRAWS,
    burn_in: int = PREDICT_BURN_IN,
) -> np.ndarray:
    """Latent curve given covariates and a partially observed binary sequence."""
    params, basis = _as_params(fit_or_params)
    y_obs = np.asarray(y_obs).reshape(-1)
    t_obs = np.asarray(t_obs, dtype=float).reshape(-1)
    if y_obs.size != t_obs.size:
        raise ValueError("y_obs and t_obs differ in length")
    if y_obs.size == 0:
        return predict_mean((params, basis), x, grid)
    x = np.asarray(x, dtype=float).reshape(-1)
    grid = np.linspace(0, 1, 101) if grid is None else np.asarray(grid, dtype=float)
    E = basis.evaluate(t_obs)
    St = params.Sigma_theta
    mean_scores = params.B.T @ x
    kd = mstep.kernel_diag(St, basis, E=E)
    gauss = sampling.subject_gaussian(params, E, x, kd, subject)
    rng = stream(seed, PREDICT, subject)
    W = sampling.gibbs_chain(gauss, sampling.OrthantConstraint(y_obs), n_draws, rng, burn_in=burn_in, thin=1)
    wbar = W.mean(axis=0)
    S = E.T @ St @ E + params.sigma2 * np.diag(kd)
    corr = St @ E @ np.linalg.solve(S, wbar - E.T @ mean_scores)
    return basis.evaluate(grid).T @ (mean_scores + corr)
