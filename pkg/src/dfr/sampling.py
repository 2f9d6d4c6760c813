"""Stochastic kernels of the Monte Carlo E-step.

* univariate truncated-normal draws by inverse transform,
* systematic-scan Gibbs sampling of the latent vector W_i restricted to the
  orthant fixed by the observed signs,
* Gaussian conditioning of the basis scores Z_i on W_i,
* accept-reject draws of Z_i under a roughness ceiling z' P z <= lambda.

All kernels take an explicit ``numpy.random.Generator``; nothing here keeps
global state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import ndtr, ndtri

from dfr.errors import NumericalSingularityError
from dfr.model import ModelParams

JITTER = 1e-8
QUANTILE_CLAMP = 1e-15
BURN_IN = 10
THIN = 2
MAX_TRIES = 1000


@dataclass
class SubjectGaussian:
    """Unconstrained law N(mu, sigma) of one subject's latent vector W_i."""

    mu: np.ndarray
    sigma: np.ndarray
    k_diag: Optional[np.ndarray] = None
    subject: Optional[int] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        self.sigma = 0.5 * (self.sigma + self.sigma.T)
        if self.k_diag is None:
            self.k_diag = np.ones_like(self.mu)
        self._chol = None

    @property
    def size(self) -> int:
        return self.mu.size

    def jittered(self) -> np.ndarray:
        """Covariance with 1e-8 * trace / M added to the diagonal."""
        m = self.size
        tr = np.trace(self.sigma)
        eps = JITTER * tr / m if tr > 0 else JITTER
        return self.sigma + eps * np.eye(m)

    def cholesky(self):
        if self._chol is None:
            try:
                self._chol = scipy.linalg.cho_factor(self.jittered(), lower=True)
            except np.linalg.LinAlgError as exc:
                raise NumericalSingularityError(
                    "latent covariance is singular after jitter", self.subject
                ) from exc
        return self._chol

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self.cholesky(), rhs)

    def precision(self) -> np.ndarray:
        return self.solve(np.eye(self.size))


@dataclass
class OrthantConstraint:
    """Sign pattern of the observed responses: W_ij > 0 iff y_ij = 1."""

    signs: np.ndarray

    def __post_init__(self):
        self.signs = np.asarray(self.signs).astype(np.int8).reshape(-1)
        if np.any((self.signs != 0) & (self.signs != 1)):
            raise ValueError("orthant signs must be 0/1")

    @property
    def positive(self) -> np.ndarray:
        return self.signs.astype(bool)

    def satisfied(self, w: np.ndarray) -> bool:
        w = np.asarray(w)
        return bool(np.all((w > 0) == self.positive))

    def initial_state(self) -> np.ndarray:
        return np.where(self.positive, 0.5, -0.5)


@dataclass
class LatentScoreConditional:
    """Gaussian law N(eta, delta) of the scores Z_i given W_i.

    ``eta`` may be 2-D (one row per conditioning draw of W_i); ``delta`` does
    not depend on the draw.
    """

    eta: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        d = np.atleast_2d(np.asarray(self.delta, dtype=float))
        self.delta = 0.5 * (d + d.T)

    def sqrt_factor(self) -> np.ndarray:
        """L with L L' = delta, from a clipped eigen-decomposition."""
        w, V = np.linalg.eigh(self.delta)
        w = np.clip(w, 0.0, None)
        return V * np.sqrt(w)


# ---------------------------------------------------------------------------
# univariate pieces


def conditional_params(gauss: SubjectGaussian, j: int, w_minus_j) -> tuple[float, float]:
    """Mean and variance of W_ij given the other coordinates (0-based ``j``)."""
    m = gauss.size
    if not 0 <= j < m:
        raise IndexError(f"coordinate {j} out of range for dimension {m}")
    w_minus_j = np.asarray(w_minus_j, dtype=float).reshape(-1)
    if w_minus_j.size != m - 1:
        raise ValueError(f"expected {m - 1} conditioning values, got {w_minus_j.size}")
    S = gauss.jittered()
    if m == 1:
        return float(gauss.mu[0]), float(S[0, 0])
    rest = np.r_[0:j, j + 1 : m]
    S_rr = S[np.ix_(rest, rest)]
    s_jr = S[j, rest]
    try:
        coef = scipy.linalg.solve(S_rr, s_jr, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalSingularityError("conditional minor is singular", gauss.subject) from exc
    tau = gauss.mu[j] + coef @ (w_minus_j - gauss.mu[rest])
    var = S[j, j] - coef @ s_jr
    if not var > 0:
        raise NumericalSingularityError("nonpositive conditional variance", gauss.subject)
    return float(tau), float(var)


def truncated_normal_draw(tau, var, positive, u):
    """Inverse-transform draw from N(tau, var) restricted to a half-line.

    ``positive`` selects (0, inf); otherwise (-inf, 0]. Works elementwise on
    arrays. With p = Phi(0; tau, var) the draw is Phi^{-1}(p u) on the
    nonpositive side and Phi^{-1}(p + (1 - p) u) on the positive side; the
    positive branch is evaluated through the upper tail to keep precision
    when p is close to one.
    """
    tau = np.asarray(tau, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    positive = np.asarray(positive, dtype=bool)
    u = np.asarray(u, dtype=float)
    sgn = np.where(positive, 1.0, -1.0)
    v = np.where(positive, 1.0 - u, u)
    x = _tn_signed(tau, sgn, sd, v)
    return x if x.ndim else float(x)


def _tn_signed(tau, sgn, sd, v):
    """Truncated normal draw on the side sgn * x > 0 (sgn = -1 means x <= 0).

    With a = sgn tau / sd the mass beyond the draw is Phi(a) v, so the draw
    is tau - sgn sd Phi^{-1}(Phi(a) v); here v = 1 - u on the positive side
    and u on the other, which keeps precision in the upper tail.
    """
    lo = QUANTILE_CLAMP
    a = sgn * tau / sd
    mass = np.clip(ndtr(a) * v, lo, 1.0 - lo)
    x = tau - sgn * sd * ndtri(mass)
    # far tail (quantile clamped or rounding past zero): the truncated law is
    # close to an exponential with rate |a| / sd beyond the boundary
    wrong_side = np.where(sgn > 0, x <= 0, x > 0)
    bad = wrong_side | ((mass <= lo) & (a < -5.0))
    if bad.any():
        rate = np.maximum(-a, 1.0) / sd
        offset = -np.log(np.clip(v, lo, 1.0)) / rate
        offset = np.maximum(offset, np.finfo(float).tiny)
        x = np.where(bad, sgn * offset, x)
    return x


# ---------------------------------------------------------------------------
# Gibbs sampling of W_i


@dataclass
class _GibbsBatch:
    """Padded per-subject arrays for coordinate-wise Gibbs updates."""

    mu: np.ndarray  # (n, m)
    coef: np.ndarray  # (n, m, m): tau_j = mu_j + coef[j] . (w - mu)
    sd: np.ndarray  # (n, m)
    positive: np.ndarray  # (n, m)
    sizes: np.ndarray  # (n,)


def _prepare_batch(gaussians: Sequence[SubjectGaussian], constraints: Sequence[OrthantConstraint]) -> _GibbsBatch:
    n = len(gaussians)
    sizes = np.array([g.size for g in gaussians])
    m = int(sizes.max())
    mu = np.zeros((n, m))
    coef = np.zeros((n, m, m))
    sd = np.ones((n, m))
    pos = np.ones((n, m), dtype=bool)
    for i, (g, c) in enumerate(zip(gaussians, constraints)):
        if c.signs.size != g.size:
            raise ValueError(f"subject {g.subject}: constraint length {c.signs.size} != {g.size}")
        k = g.size
        Q = g.precision()
        d = np.diag(Q).copy()
        if not np.all(d > 0):
            raise NumericalSingularityError("nonpositive conditional variance", g.subject)
        C = -Q / d[:, None]
        np.fill_diagonal(C, 0.0)
        mu[i, :k] = g.mu
        coef[i, :k, :k] = C
        sd[i, :k] = 1.0 / np.sqrt(d)
        pos[i, :k] = c.positive
    return _GibbsBatch(mu, coef, sd, pos, sizes)


def n_sweeps(n_keep: int, burn_in: int = BURN_IN, thin: int = THIN) -> int:
    """Number of full sweeps needed to retain ``n_keep`` states."""
    return burn_in + thin * n_keep


def gibbs_batch(
    gaussians: Sequence[SubjectGaussian],
    constraints: Sequence[OrthantConstraint],
    uniforms: Sequence[np.ndarray],
    n_keep: int,
    burn_in: int = BURN_IN,
    thin: int = THIN,
    init: Optional[Sequence[np.ndarray]] = None,
) -> List[np.ndarray]:
    """Run one systematic-scan Gibbs chain per subject, vectorized across subjects.

    ``uniforms[i]`` has shape ``(n_sweeps(n_keep, burn_in, thin), M_i)`` and
    is consumed in scan order, so each subject's chain depends only on its
    own uniforms. Returns a list of ``(n_keep, M_i)`` arrays of retained
    states: the state after sweep ``burn_in + thin * (r + 1)`` for r = 0..n_keep-1.
    """
    batch = _prepare_batch(gaussians, constraints)
    n, m = batch.mu.shape
    total = n_sweeps(n_keep, burn_in, thin)
    U = np.full((n, total, m), 0.5)
    for i, u in enumerate(uniforms):
        u = np.asarray(u, dtype=float)
        if u.shape != (total, batch.sizes[i]):
            raise ValueError(f"uniforms for subject {i} have shape {u.shape}, expected {(total, batch.sizes[i])}")
        U[i, :, : batch.sizes[i]] = u
    W = np.where(batch.positive, 0.5, -0.5)
    if init is not None:
        for i, w0 in enumerate(init):
            W[i, : batch.sizes[i]] = w0
    out = np.empty((n, n_keep, m))
    mu, coef, sd, pos = batch.mu, batch.coef, batch.sd, batch.positive
    R = W - mu
    sgn = np.where(pos, 1.0, -1.0)
    V = np.where(pos[:, None, :], 1.0 - U, U)
    kept = 0
    for s in range(total):
        Vs = V[:, s, :]
        for j in range(m):
            tau = mu[:, j] + np.einsum("nm,nm->n", coef[:, j, :], R)
            x = _tn_signed(tau, sgn[:, j], sd[:, j], Vs[:, j])
            W[:, j] = x
            R[:, j] = x - mu[:, j]
        if s + 1 > burn_in and (s + 1 - burn_in) % thin == 0:
            out[:, kept, :] = W
            kept += 1
    return [out[i, :, : batch.sizes[i]].copy() for i in range(n)]


def gibbs_chain(
    gauss: SubjectGaussian,
    constraint: OrthantConstraint,
    n_keep: int,
    rng: np.random.Generator,
    burn_in: int = BURN_IN,
    thin: int = THIN,
    init=None,
) -> np.ndarray:
    """Retained states ``(n_keep, M_i)`` of a single-subject Gibbs chain."""
    u = rng.random((n_sweeps(n_keep, burn_in, thin), gauss.size))
    return gibbs_batch([gauss], [constraint], [u], n_keep, burn_in, thin, None if init is None else [init])[0]


def gibbs_w(
    gauss: SubjectGaussian,
    constraint: OrthantConstraint,
    sweeps: int,
    init,
    rng: np.random.Generator,
) -> np.ndarray:
    """State after ``sweeps`` full systematic scans started from ``init``."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    init = np.asarray(init, dtype=float)
    if not constraint.satisfied(init):
        raise ValueError("initial state violates the orthant constraint")
    return gibbs_chain(gauss, constraint, 1, rng, burn_in=sweeps - 1, thin=1, init=init)[0]


# ---------------------------------------------------------------------------
# latent scores


def subject_gaussian(params: ModelParams, E: np.ndarray, x: np.ndarray, k_diag=None, subject=None) -> SubjectGaussian:
    """Law of W_i = E_i' Z_i + noise under ``params``."""
    mu = E.T @ (params.B.T @ x)
    if k_diag is None:
        k_diag = np.ones(E.shape[1])
    S = E.T @ params.Sigma_theta @ E + params.sigma2 * np.diag(k_diag)
    return SubjectGaussian(mu, S, k_diag, subject)


def latent_score_conditional(
    params: ModelParams,
    E: np.ndarray,
    x: np.ndarray,
    gauss: SubjectGaussian,
    w: np.ndarray,
) -> LatentScoreConditional:
    """Gaussian conditional of Z_i given W_i = w (``w`` may hold several rows)."""
    w = np.asarray(w, dtype=float)
    St = params.Sigma_theta
    G = gauss.solve(E.T @ St).T  # Sigma_theta E Sigma_i^{-1}, (J, M)
    mean = params.B.T @ x
    eta = mean + (w - gauss.mu) @ G.T
    delta = St - G @ E.T @ St
    return LatentScoreConditional(eta, delta)


def accept_reject_batch(
    eta: np.ndarray,
    L: np.ndarray,
    P: np.ndarray,
    lam: float,
    max_tries: int,
    rng: np.random.Generator,
):
    """Draw one z per row of ``eta`` from N(eta_k, L L') restricted to z' P z <= lam.

    Returns ``(z, h, tries, forced)`` where ``forced`` flags draws that hit
    ``max_tries`` and kept the smallest roughness seen instead.
    """
    eta = np.atleast_2d(eta)
    K, J = eta.shape
    if max_tries < 1:
        raise ValueError("max_tries must be >= 1")
    z = np.empty((K, J))
    h = np.full(K, np.inf)
    tries = np.zeros(K, dtype=int)
    done = np.zeros(K, dtype=bool)
    pending = np.arange(K)
    while pending.size:
        cand = eta[pending] + rng.standard_normal((pending.size, J)) @ L.T
        hc = np.einsum("kj,jl,kl->k", cand, P, cand)
        tries[pending] += 1
        better = hc < h[pending]
        idx = pending[better]
        z[idx] = cand[better]
        h[idx] = hc[better]
        ok = hc <= lam
        done[pending[ok]] = True
        pending = pending[~ok & (tries[pending] < max_tries)]
    forced = ~done
    return z, h, tries, forced


def accept_reject_z(
    cond: LatentScoreConditional,
    P: np.ndarray,
    lambda_i: float,
    max_tries: int = MAX_TRIES,
    rng: Optional[np.random.Generator] = None,
):
    """Single accept-reject draw; returns ``(z, h, tries, forced)``."""
    if not (lambda_i > 0):
        raise ValueError("lambda must be positive or infinite")
    rng = np.random.default_rng() if rng is None else rng
    eta = np.asarray(cond.eta, dtype=float).reshape(1, -1)
    z, h, tries, forced = accept_reject_batch(eta, cond.sqrt_factor(), P, lambda_i, max_tries, rng)
    return z[0], float(h[0]), int(tries[0]), bool(forced[0])
