"""Monte Carlo E-step with adaptive roughness ceilings.

Each subject gets its own random stream per EM iteration. Within an
iteration, W_i is drawn by Gibbs sampling, then each retained W_i draw is
paired with one Z_i draw from its Gaussian conditional restricted to
Z' P Z <= lambda_i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from dfr import sampling
from dfr.basis import BasisSystem
from dfr.errors import InvalidStateError, NumericalSingularityError
from dfr.model import ModelParams, ObservedDataset
from dfr.mstep import KERNEL_FLOOR, RemlProjector, kernel_diag
from dfr.rng import subject_stream

DELTA_GRID = (0.01, 0.02, 0.05, 0.10, 0.20)


@dataclass
class MonteCarloDraws:
    """Draws of one E-step.

    ``w[i]`` is (K, M_i), ``z[i]`` is (K, J) and ``h[i]`` is (K,) with
    h = z' P z for each retained pair.
    """

    w: List[np.ndarray]
    z: List[np.ndarray]
    h: List[np.ndarray]
    forced: int = 0
    tries: int = 0

    @property
    def N(self) -> int:
        return len(self.z)

    @property
    def K(self) -> int:
        return self.z[0].shape[0]

    def z_array(self) -> np.ndarray:
        """Stack to (K, N, J), matching draws across subjects by index."""
        return np.stack(self.z, axis=1)


@dataclass
class SmoothingState:
    """Per-subject roughness ceilings and the current rejection rate."""

    lam: np.ndarray
    delta: float = DELTA_GRID[0]
    iteration: int = 0

    @classmethod
    def initial(cls, n: int, delta: float = DELTA_GRID[0]) -> "SmoothingState":
        return cls(np.full(n, np.inf), delta, 0)


@dataclass
class DataCache:
    """Basis matrices at each subject's times, computed once per fit."""

    E: List[np.ndarray]

    @classmethod
    def build(cls, data: ObservedDataset, basis: BasisSystem) -> "DataCache":
        return cls([basis.evaluate(t) for t in data.times])


def empirical_quantile(values: np.ndarray, prob: float) -> float:
    """Linear-interpolation ("type 7") quantile."""
    return float(np.quantile(np.asarray(values, dtype=float), prob, method="linear"))


def update_lambda(h_prev: Sequence[np.ndarray], delta: float, lambda_prev) -> np.ndarray:
    """lambda_i = min(lambda_prev_i, (1 - delta)-quantile of the previous h_i)."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    lambda_prev = np.broadcast_to(np.asarray(lambda_prev, dtype=float), (len(h_prev),))
    out = np.empty(len(h_prev))
    for i, h in enumerate(h_prev):
        h = np.asarray(h, dtype=float)
        if h.size == 0:
            raise InvalidStateError(f"subject {i}: no roughness values to take a quantile of")
        out[i] = min(lambda_prev[i], empirical_quantile(h, 1.0 - delta))
    return out


def run_estep(
    params: ModelParams,
    data: ObservedDataset,
    basis: BasisSystem,
    state: SmoothingState,
    K: int,
    seed: int,
    P: Optional[np.ndarray] = None,
    cache: Optional[DataCache] = None,
    burn_in: int = sampling.BURN_IN,
    thin: int = sampling.THIN,
    max_tries: int = sampling.MAX_TRIES,
    stream: int = 0,
) -> MonteCarloDraws:
    """Draw K (w, z) pairs per subject under ``params`` and ceilings ``state.lam``.

    Randomness comes from one stream per (seed, stream, iteration, subject),
    so results do not depend on how subjects are scheduled.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    cache = DataCache.build(data, basis) if cache is None else cache
    P = basis.penalty_matrix(2) if P is None else P
    gaussians, constraints, rngs, uniforms = [], [], [], []
    total = sampling.n_sweeps(K, burn_in, thin)
    for i in range(data.N):
        E = cache.E[i]
        kd = kernel_diag(params.Sigma_theta, basis, E=E)
        g = sampling.subject_gaussian(params, E, data.X[i], kd, subject=i)
        gaussians.append(g)
        constraints.append(sampling.OrthantConstraint(data.y[i]))
        rng = subject_stream(seed, stream, state.iteration, i)
        rngs.append(rng)
        uniforms.append(rng.random((total, g.size)))
    w_draws = sampling.gibbs_batch(gaussians, constraints, uniforms, K, burn_in, thin)
    z_draws, h_draws = [], []
    forced = 0
    tries = 0
    for i in range(data.N):
        cond = sampling.latent_score_conditional(params, cache.E[i], data.X[i], gaussians[i], w_draws[i])
        L = cond.sqrt_factor()
        lam = state.lam[i]
        z, h, t, f = sampling.accept_reject_batch(
            cond.eta, L, P, lam, 1 if math.isinf(lam) else max_tries, rngs[i]
        )
        z_draws.append(z)
        h_draws.append(h)
        forced += int(f.sum())
        tries += int(t.sum())
    return MonteCarloDraws(w_draws, z_draws, h_draws, forced, tries)


def _filtered_moments(draws: MonteCarloDraws, delta: float):
    """Per-subject masks of draws with h <= the (1 - delta)-quantile."""
    masks = []
    for h in draws.h:
        lam = empirical_quantile(h, 1.0 - delta) if delta > 0 else np.inf
        keep = h <= lam
        if not keep.any():
            keep = np.zeros(h.size, dtype=bool)
            keep[np.argmin(h)] = True
        masks.append(keep)
    return masks


def filtered_sigma_theta(draws: MonteCarloDraws, masks, proj: RemlProjector) -> np.ndarray:
    """Projected covariance estimate from per-subject filtered draw sets.

    Subjects are independent given the data, so with per-subject first and
    second moments m_i, S_i the average of Z' A Z is
    sum_i A_ii (S_i - m_i m_i') + Mbar' A Mbar with A = U U'.
    """
    U = proj.U
    A_diag = np.einsum("nc,nc->n", U, U)
    J = draws.z[0].shape[1]
    Mbar = np.empty((draws.N, J))
    S = np.zeros((J, J))
    for i, (z, keep) in enumerate(zip(draws.z, masks)):
        zk = z[keep]
        m = zk.mean(axis=0)
        Mbar[i] = m
        C = (zk - m).T @ (zk - m) / zk.shape[0]
        S += A_diag[i] * C
    Ms = U.T @ Mbar
    S += Ms.T @ Ms
    S /= U.shape[1]
    return 0.5 * (S + S.T)


def validation_value(
    draws: MonteCarloDraws,
    delta: float,
    data: ObservedDataset,
    basis: BasisSystem,
    proj: RemlProjector,
    cache: Optional[DataCache] = None,
) -> float:
    """Average K-weighted squared residual over the draws kept at rejection rate delta."""
    cache = DataCache.build(data, basis) if cache is None else cache
    masks = _filtered_moments(draws, delta)
    St = filtered_sigma_theta(draws, masks, proj)
    total = 0.0
    for i, keep in enumerate(masks):
        E = cache.E[i]
        kd = np.maximum(kernel_diag(St, basis, E=E), KERNEL_FLOOR)
        r = draws.w[i][keep] - draws.z[i][keep] @ E
        total += np.mean(np.sum(r * r / kd, axis=1))
    return total / data.total_obs


def av_curve(draws, data, basis, proj, grid=DELTA_GRID, cache=None) -> Dict[float, float]:
    cache = DataCache.build(data, basis) if cache is None else cache
    return {d: validation_value(draws, d, data, basis, proj, cache) for d in grid}


def select_delta(av: Mapping[float, float]) -> float:
    """Grid value minimizing the validation curve; ties go to the smaller delta."""
    if not av:
        raise InvalidStateError("empty validation curve")
    best = min(av.values())
    return min(d for d, v in av.items() if v == best)
