"""Ground-truth generation for the simulation study and MSE evaluation.

Latent model: W_i(t) = beta_0(t) + beta_1(t) x_i + sum_j sqrt(nu_j) eps_ij psi_j(t) + e_it
with e_it ~ N(0, sigma2 K(t, t)) and y_ij = 1{W_i(t_ij) > 0}.

Common random numbers: for a given (seed, replicate) all designs share the
covariates, the latent scores and the measurement noise on the regular
grid j/M, so designs R, RT and RM see the same latent paths and differ
only in which grid points are kept.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from dfr.basis import QUAD_GRID, QUAD_WEIGHTS, simpson_weights
from dfr.model import ObservedDataset
from dfr.rng import SIMULATE, stream

DESIGNS = ("R", "RT", "RM", "IRS")
TABLE_PARAMS = ("beta0", "beta1", "psi1", "psi2", "nu1", "nu2", "sigma2")


@dataclass
class SimScenario:
    design: Literal["R", "RT", "RM", "IRS"] = "R"
    N: int = 100
    M: int = 36
    sigma2: float = 0.2
    rho: float = 0.1
    r: float = 1.5
    p_c: float = 0.5
    p: int = 4
    coefficient_case: Literal["simple", "complex"] = "simple"
    seed: int = 0
    replicate: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if not 0 < self.p_c < 1:
            raise ValueError("p_c must lie in (0, 1)")
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.N < 1 or self.p < 1:
            raise ValueError("N and p must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        if self.coefficient_case not in ("simple", "complex"):
            raise ValueError(f"unknown coefficient case {self.coefficient_case!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# truth


def eigenfunction(k: int) -> Callable[[np.ndarray], np.ndarray]:
    """psi_k for k >= 2: sqrt2 sin(2 pi j t) for k = 2j, sqrt2 cos(2 pi (j+1) t) for k = 2j+1."""
    if k < 2:
        raise ValueError("eigenfunctions are indexed from 2")
    j = k // 2
    if k % 2 == 0:
        return lambda t: np.sqrt(2.0) * np.sin(2.0 * np.pi * j * np.asarray(t, dtype=float))
    return lambda t: np.sqrt(2.0) * np.cos(2.0 * np.pi * (j + 1) * np.asarray(t, dtype=float))


def true_eigenstructure(p: int, r: float, rho: float):
    """Eigenvalues r rho^(j-1) and the first p eigenfunctions, starting at psi_2."""
    if p < 1:
        raise ValueError("p must be >= 1")
    nu = r * rho ** np.arange(p)
    psi = [eigenfunction(k) for k in range(2, p + 2)]
    return nu, psi


def coefficient_functions(case: str):
    beta0 = lambda t: -np.cos(2.0 * np.pi * np.asarray(t, dtype=float))
    if case == "simple":
        beta1 = lambda t: 1.0 - 2.0 * np.asarray(t, dtype=float)
    elif case == "complex":
        beta1 = lambda t: -np.sin(4.0 * np.pi * np.asarray(t, dtype=float))
    else:
        raise ValueError(f"unknown coefficient case {case!r}")
    return [beta0, beta1]


def qc_probabilities(M: int, p_c: float) -> np.ndarray:
    """Q_c(a) proportional to p_c^(M - a + 1), a = 1..M."""
    a = np.arange(1, M + 1)
    w = p_c ** (M - a + 1)
    return w / w.sum()


def qc_mean(M: int, p_c: float) -> float:
    return float(np.arange(1, M + 1) @ qc_probabilities(M, p_c))


def sample_timepoints(design: str, M: int, p_c: float, rng: np.random.Generator, N: int = 1) -> List[np.ndarray]:
    """Observation times of N subjects under one of the four designs.

    For the grid-based designs the times are a subset of j/M, j = 1..M.
    """
    return [full if idx is None else full[idx] for full, idx in _design_indices(design, M, p_c, rng, N)]


def _design_indices(design, M, p_c, rng, N):
    grid = np.arange(1, M + 1) / M
    probs = qc_probabilities(M, p_c)
    out = []
    if design == "R":
        return [(grid, None) for _ in range(N)]
    if design == "RT":
        sizes = rng.choice(np.arange(1, M + 1), size=N, p=probs)
        return [(grid, np.arange(m)) for m in sizes]
    if design == "RM":
        p_m = 1.0 - qc_mean(M, p_c) / M
        for _ in range(N):
            keep = rng.random(M) >= p_m
            while not keep.any():
                keep = rng.random(M) >= p_m
            out.append((grid, np.flatnonzero(keep)))
        return out
    if design == "IRS":
        sizes = rng.choice(np.arange(1, M + 1), size=N, p=probs)
        return [(np.sort(rng.random(m)), None) for m in sizes]
    raise ValueError(f"unknown design {design!r}")


@dataclass
class GroundTruth:
    """True functions and their standardized counterparts."""

    scenario: SimScenario
    beta: List[Callable]
    nu: np.ndarray
    psi: List[Callable]
    x: np.ndarray
    scores: np.ndarray  # (N, p) standard normal scores
    latent: List[np.ndarray]  # latent path at each subject's times
    grid: np.ndarray
    alpha: np.ndarray  # (q, G)
    rho: np.ndarray  # standardized eigenvalues, descending
    phi: np.ndarray  # (p, G) standardized eigenfunctions
    kernel_diag: np.ndarray  # K(t, t) on grid

    def K(self, t) -> np.ndarray:
        return kernel_diag_true(self.nu, self.psi, t)

    def curves(self) -> Dict[str, np.ndarray]:
        out = {"t": self.grid, "kernel_diag": self.kernel_diag}
        for l, b in enumerate(self.beta):
            out[f"beta{l}"] = b(self.grid)
            out[f"alpha{l}"] = self.alpha[l]
        for j in range(self.phi.shape[0]):
            out[f"phi{j + 1}"] = self.phi[j]
        return out


def kernel_diag_true(nu, psi, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return sum(v * f(t) ** 2 for v, f in zip(nu, psi))


def standardized_truth(beta, nu, psi, grid):
    """alpha = beta / sqrt(K) and the eigenpairs of the kernel K(t,t)^-1/2 K(s,t) K(s,s)^-1/2.

    The standardized kernel has rank p with factors g_j = sqrt(nu_j) psi_j / sqrt(K);
    its eigenpairs follow from the p x p Gram matrix of the g_j.
    """
    grid = np.asarray(grid, dtype=float)
    Kg = kernel_diag_true(nu, psi, grid)
    Kq = kernel_diag_true(nu, psi, QUAD_GRID)
    if min(Kg.min(), Kq.min()) <= 0:
        # a vanishing kernel leaves the standardization undefined
        nan = np.full((len(nu), grid.size), np.nan)
        return np.full((len(beta), grid.size), np.nan), np.full(len(nu), np.nan), nan, Kg
    alpha = np.array([b(grid) / np.sqrt(Kg) for b in beta])
    Gq = np.array([np.sqrt(v) * f(QUAD_GRID) / np.sqrt(Kq) for v, f in zip(nu, psi)])
    Gram = (Gq * QUAD_WEIGHTS) @ Gq.T
    lam, V = np.linalg.eigh(0.5 * (Gram + Gram.T))
    order = np.argsort(-lam)
    lam, V = lam[order], V[:, order]
    Gg = np.array([np.sqrt(v) * f(grid) / np.sqrt(Kg) for v, f in zip(nu, psi)])
    phi = (V.T @ Gg) / np.sqrt(np.clip(lam, 1e-300, None))[:, None]
    phi_q = (V.T @ Gq) / np.sqrt(np.clip(lam, 1e-300, None))[:, None]
    for j in range(phi.shape[0]):
        if phi_q[j, np.argmax(np.abs(phi_q[j]))] < 0:
            phi[j] = -phi[j]
    return alpha, lam, phi, Kg


def dichotomize(latent, noise) -> np.ndarray:
    """y = 1{latent + noise > 0}."""
    return (np.asarray(latent) + np.asarray(noise) > 0).astype(np.int8)


def generate_dataset(scenario: SimScenario, grid=None) -> Tuple[ObservedDataset, GroundTruth]:
    """Simulate one replicate of ``scenario``."""
    sc = scenario
    grid = np.linspace(0, 1, 101) if grid is None else np.asarray(grid, dtype=float)
    nu, psi = true_eigenstructure(sc.p, sc.r, sc.rho)
    beta = coefficient_functions(sc.coefficient_case)
    core = stream(sc.seed, SIMULATE, sc.replicate, 0)
    x = core.standard_normal(sc.N)
    scores = core.standard_normal((sc.N, sc.p))
    grid_noise = stream(sc.seed, SIMULATE, sc.replicate, 1).standard_normal((sc.N, sc.M))
    design_rng = stream(sc.seed, SIMULATE, sc.replicate, 2 + DESIGNS.index(sc.design))
    irs_noise = stream(sc.seed, SIMULATE, sc.replicate, 10)
    plan = _design_indices(sc.design, sc.M, sc.p_c, design_rng, sc.N)
    times, ys, latents = [], [], []
    sd_scale = np.sqrt(sc.sigma2)
    for i, (full, idx) in enumerate(plan):
        if idx is None and sc.design == "IRS":
            t = full
            z = irs_noise.standard_normal(t.size)
        else:
            idx = np.arange(sc.M) if idx is None else idx
            t = full[idx]
            z = grid_noise[i, idx]
        path = beta[0](t) + beta[1](t) * x[i] + sum(
            np.sqrt(v) * scores[i, j] * psi[j](t) for j, v in enumerate(nu)
        )
        noise = sd_scale * np.sqrt(kernel_diag_true(nu, psi, t)) * z
        times.append(t)
        ys.append(dichotomize(path, noise))
        latents.append(path)
    X = np.column_stack([np.ones(sc.N), x])
    data = ObservedDataset(
        X, times, ys,
        subject_ids=[f"s{i:04d}" for i in range(sc.N)],
        covariate_names=["intercept", "x1"],
    )
    alpha, rho, phi, Kg = standardized_truth(beta, nu, psi, grid)
    truth = GroundTruth(sc, beta, nu, psi, x, scores, latents, grid, alpha, rho, phi, Kg)
    return data, truth


# ---------------------------------------------------------------------------
# evaluation


def integrated_sq_error(f_hat, f, grid) -> float:
    grid = np.asarray(grid, dtype=float)
    d = (np.asarray(f_hat) - np.asarray(f)) ** 2
    if grid.size % 2 == 1 and grid.size >= 3:
        w = simpson_weights(grid.size, grid[0], grid[-1])
        return float(d @ w)
    return float(np.trapz(d, grid))


def aligned_sq_error(f_hat, f, grid) -> float:
    """Integrated squared error after choosing the sign of ``f_hat`` that minimizes it."""
    return min(integrated_sq_error(f_hat, f, grid), integrated_sq_error(-np.asarray(f_hat), f, grid))


def mse_eval(fit_result, truth: GroundTruth, grid=None, n_eig: int = 2) -> Dict[str, float]:
    """Squared errors of the standardized estimates against the truth."""
    grid = truth.grid if grid is None else np.asarray(grid, dtype=float)
    if grid is not truth.grid:
        alpha_t, rho_t, phi_t, _ = standardized_truth(truth.beta, truth.nu, truth.psi, grid)
    else:
        alpha_t, rho_t, phi_t = truth.alpha, truth.rho, truth.phi
    std = fit_result.standardized if hasattr(fit_result, "standardized") else fit_result
    sigma2_hat = fit_result.params.sigma2 if hasattr(fit_result, "params") else np.nan
    a_hat = std.alpha_curves(grid)
    phi_hat = std.eigenfunctions(grid)
    out = {}
    for l in range(alpha_t.shape[0]):
        out[f"beta{l}"] = integrated_sq_error(a_hat[l], alpha_t[l], grid)
    for j in range(n_eig):
        out[f"psi{j + 1}"] = aligned_sq_error(phi_hat[j], phi_t[j], grid)
    for j in range(n_eig):
        out[f"nu{j + 1}"] = float((std.eigvals[j] - rho_t[j]) ** 2)
    out["sigma2"] = float((sigma2_hat - truth.scenario.sigma2) ** 2)
    return out
