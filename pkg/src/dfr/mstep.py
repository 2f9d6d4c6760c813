"""Closed-form M-step updates and standardization to identifiable parameters.

The REML-type projector removes the fixed effects before the score
covariance is averaged, which makes the covariance update unbiased for the
residual covariance. Standardization divides every function by
sqrt(K(t, t)) so that the standardized kernel has unit diagonal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from dfr.basis import QUAD_GRID, QUAD_WEIGHTS, BasisSystem
from dfr.errors import DesignRankError
from dfr.model import ModelParams, check_design

KERNEL_FLOOR = 1e-6
SIGMA2_FLOOR = 1e-8
EIG_TIE = 1e-10
REPORT_GRID = np.linspace(0.0, 1.0, 101)


# ---------------------------------------------------------------------------
# projector


@dataclass
class RemlProjector:
    """Orthonormal basis U (N x (N - q)) of the orthogonal complement of col(X)."""

    U: np.ndarray

    @property
    def n_resid(self) -> int:
        return self.U.shape[1]


def reml_projector(X: np.ndarray) -> RemlProjector:
    """Eigenvectors with unit eigenvalue of the annihilator I - X (X'X)^{-1} X'."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N, q = X.shape
    if N <= q:
        raise DesignRankError(f"N={N} must exceed q={q} to leave residual dimensions")
    check_design(X)
    H = X @ np.linalg.solve(X.T @ X, X.T)
    A = np.eye(N) - H
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    U = V[:, N - (N - q) :]
    # eigenvalues of a projector are 0/1; the top N - q belong to its range
    if not np.allclose(w[q:], 1.0, atol=1e-8):
        raise DesignRankError("annihilator eigenvalues are not 0/1; design is ill-conditioned")
    # deterministic sign: first nonzero entry of each column positive
    for k in range(U.shape[1]):
        col = U[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            U[:, k] = -col
    return RemlProjector(U)


# ---------------------------------------------------------------------------
# parameter updates


def update_sigma_theta(z_draws: np.ndarray, proj: RemlProjector) -> np.ndarray:
    """REML covariance update from score draws of shape (K, N, J).

    For each draw index k, Z^(k) is the N x J matrix of that draw across
    subjects; the estimate is (1/(N-q)) sum_c (1/K) sum_k z*_c z*_c' with
    z*_c = Z^(k)' u_c.
    """
    Z = np.asarray(z_draws, dtype=float)
    if Z.ndim == 2:
        Z = Z[None]
    K, N, J = Z.shape
    U = proj.U
    if U.shape[0] != N:
        raise ValueError(f"projector has {U.shape[0]} rows, draws have {N} subjects")
    Zs = np.einsum("nc,knj->kcj", U, Z)
    S = np.einsum("kcj,kcl->jl", Zs, Zs) / (K * U.shape[1])
    return 0.5 * (S + S.T)


def update_B(z_draws: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Least-squares update (X'X)^{-1} X' mean_k Z^(k)."""
    Z = np.asarray(z_draws, dtype=float)
    if Z.ndim == 2:
        Z = Z[None]
    X = np.atleast_2d(np.asarray(X, dtype=float))
    check_design(X)
    Zbar = Z.mean(axis=0)
    return np.linalg.solve(X.T @ X, X.T @ Zbar)


def update_sigma2(
    w_draws: Sequence[np.ndarray],
    z_draws: Sequence[np.ndarray],
    E_list: Sequence[np.ndarray],
    kernel_diag_new: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Average weighted squared residual per observation.

    ``w_draws[i]`` is (K, M_i), ``z_draws[i]`` is (K, J). With
    ``kernel_diag_new=None`` the weights are one (rescaled convention).
    """
    total = 0.0
    n_obs = 0
    for i, (w, z, E) in enumerate(zip(w_draws, z_draws, E_list)):
        w = np.atleast_2d(w)
        z = np.atleast_2d(z)
        r = w - z @ E
        if kernel_diag_new is None:
            total += np.mean(np.sum(r * r, axis=1))
        else:
            k = np.maximum(np.asarray(kernel_diag_new[i], dtype=float), KERNEL_FLOOR)
            total += np.mean(np.sum(r * r / k, axis=1))
        n_obs += w.shape[1]
    return max(total / n_obs, SIGMA2_FLOOR)


def kernel_diag(Sigma_theta: np.ndarray, basis: BasisSystem, times=None, E: Optional[np.ndarray] = None) -> np.ndarray:
    """K(t, t) = e(t)' Sigma_theta e(t), floored at 1e-6."""
    if E is None:
        E = basis.evaluate(times)
    k = np.einsum("jm,jl,lm->m", E, Sigma_theta, E)
    return np.maximum(k, KERNEL_FLOOR)


# ---------------------------------------------------------------------------
# standardization


def standardizer(Sigma_theta: np.ndarray, basis: BasisSystem):
    """D = [int K(s,s)^{-1/2} e_i(s) e_j(s) ds] and the fraction of floored nodes."""
    raw = np.einsum("jm,jl,lm->m", basis.quad_values, Sigma_theta, basis.quad_values)
    floored = raw < KERNEL_FLOOR
    k = np.maximum(raw, KERNEL_FLOOR)
    D = basis.weighted_gram(1.0 / np.sqrt(k))
    return D, float(floored.mean())


@dataclass
class StandardizedEstimate:
    """Identifiable quantities: standardized regression functions and eigenpairs.

    ``alpha`` holds basis coefficients (q x J). ``eigvals`` are sorted in
    decreasing order and ``eigvecs[:, j]`` holds the basis coefficients of
    the j-th standardized eigenfunction.
    """

    alpha: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    D: np.ndarray
    basis: BasisSystem
    kernel_diag: np.ndarray  # raw K(t, t) on REPORT_GRID
    grid: np.ndarray = field(default_factory=lambda: REPORT_GRID.copy())
    warnings: List[str] = field(default_factory=list)

    def alpha_curves(self, grid=None) -> np.ndarray:
        """(q, G) values of the standardized regression functions."""
        grid = self.grid if grid is None else grid
        return self.alpha @ self.basis.evaluate(grid)

    def eigenfunctions(self, grid=None) -> np.ndarray:
        """(J, G) values of the standardized eigenfunctions."""
        grid = self.grid if grid is None else grid
        return self.eigvecs.T @ self.basis.evaluate(grid)

    def std_kernel_diag(self, grid=None) -> np.ndarray:
        """K*(t, t) = sum_j rho_j phi_j(t)^2."""
        phi = self.eigenfunctions(grid)
        return np.einsum("j,jg->g", np.clip(self.eigvals, 0.0, None), phi**2)

    @property
    def eigenpairs(self):
        return [(float(r), self.eigvecs[:, j]) for j, r in enumerate(self.eigvals)]


def _order_eigen(vals: np.ndarray, vecs: np.ndarray):
    """Sort descending; near-ties (< 1e-10) ordered by first differing coefficient."""
    J = vals.size
    order = list(np.argsort(-vals, kind="stable"))
    # sign convention first so tie ordering sees normalized vectors
    for j in range(J):
        v = vecs[:, j]
        if v[np.argmax(np.abs(v))] < 0:
            vecs[:, j] = -v
    i = 0
    while i < J:
        k = i + 1
        while k < J and abs(vals[order[k - 1]] - vals[order[k]]) < EIG_TIE:
            k += 1
        if k - i > 1:
            group = order[i:k]
            group.sort(key=lambda c: tuple(-np.round(vecs[:, c], 12)))
            order[i:k] = group
        i = k
    order = np.array(order)
    return vals[order], vecs[:, order]


def standardize(B: np.ndarray, Sigma_theta: np.ndarray, basis: BasisSystem, grid=None) -> StandardizedEstimate:
    """Map (B, Sigma_theta) to the identifiable (alpha, eigenpairs of R)."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    St = np.atleast_2d(np.asarray(Sigma_theta, dtype=float))
    D, frac = standardizer(St, basis)
    msgs = []
    if frac > 0.01:
        msg = f"kernel diagonal below {KERNEL_FLOOR} on {100 * frac:.1f}% of quadrature nodes"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        msgs.append(msg)
    Om = basis.gram_matrix()
    Omi = basis.gram_inv_sqrt()
    alpha = B @ D @ np.linalg.inv(Om) if basis.kind != "fourier" else B @ D
    M = Omi @ D @ St @ D.T @ Omi
    M = 0.5 * (M + M.T)
    vals, theta = np.linalg.eigh(M)
    vecs = Omi @ theta
    vals, vecs = _order_eigen(vals, vecs)
    grid = REPORT_GRID if grid is None else np.asarray(grid, dtype=float)
    kd = kernel_diag(St, basis, grid)
    return StandardizedEstimate(alpha, vals, vecs, D, basis, kd, grid.copy(), msgs)


def rescale_params(B: np.ndarray, Sigma_theta: np.ndarray, basis: BasisSystem):
    """Return (B D, D Sigma_theta D') so that the kernel diagonal is close to one.

    For a non-orthonormal basis the coefficient map is D Omega^{-1}, which
    reduces to D when Omega = I.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    St = np.atleast_2d(np.asarray(Sigma_theta, dtype=float))
    D, frac = standardizer(St, basis)
    if frac > 0.01:
        warnings.warn(
            f"kernel diagonal below {KERNEL_FLOOR} on {100 * frac:.1f}% of quadrature nodes",
            RuntimeWarning,
            stacklevel=2,
        )
    if basis.kind == "fourier":
        T = D
    else:
        T = D @ np.linalg.inv(basis.gram_matrix())
    S2 = T.T @ St @ T
    return B @ T, 0.5 * (S2 + S2.T)


def rescale_model(params: ModelParams, basis: BasisSystem) -> ModelParams:
    B, S = rescale_params(params.B, params.Sigma_theta, basis)
    return ModelParams(B, S, params.sigma2)
