"""Basis systems on [0, 1]: evaluation, derivative penalties and Gram matrices.

Two families are supported. The Fourier system

    e_1(t) = 1,  e_{2j}(t) = sqrt(2) sin(2 pi j t),  e_{2j+1}(t) = sqrt(2) cos(2 pi j t)

is orthonormal, so its Gram matrix is the identity and its derivative
penalties are diagonal. Clamped B-splines are evaluated through
``scipy.interpolate.BSpline`` and their inner products are computed by
composite Simpson quadrature on a fixed grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline

from dfr.errors import DomainError, IllConditionedBasisError, InvalidOrderError

N_QUAD = 1001


def simpson_weights(n: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Composite Simpson weights for ``n`` equally spaced nodes (``n`` odd)."""
    if n < 3 or n % 2 == 0:
        raise ValueError(f"Simpson rule needs an odd number of nodes >= 3, got {n}")
    h = (b - a) / (n - 1)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


QUAD_GRID = np.linspace(0.0, 1.0, N_QUAD)
QUAD_WEIGHTS = simpson_weights(N_QUAD)


def _check_times(times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if t.ndim != 1:
        raise DomainError("times must be a one-dimensional array")
    if t.size and (not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0):
        bad = t[(~np.isfinite(t)) | (t < 0.0) | (t > 1.0)]
        raise DomainError(f"times must lie in [0, 1]; got {bad[:5].tolist()}")
    return t


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """A finite basis on [0, 1].

    Parameters
    ----------
    kind : {"fourier", "bspline"}
    J : int
        Number of basis functions.
    degree : int
        Spline degree (B-splines only).
    knots : sequence of float, optional
        Interior knots for B-splines. Defaults to ``J - degree - 1``
        equally spaced interior knots. Boundary knots are always clamped.
    """

    kind: Literal["fourier", "bspline"] = "fourier"
    J: int = 11
    degree: int = 3
    knots: Optional[Sequence[float]] = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("fourier", "bspline"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if int(self.J) != self.J or self.J < 1:
            raise ValueError(f"J must be a positive integer, got {self.J}")
        object.__setattr__(self, "J", int(self.J))
        if self.kind == "bspline":
            if self.degree < 1:
                raise ValueError("B-spline degree must be >= 1")
            n_interior = self.J - self.degree - 1
            if n_interior < 0:
                raise ValueError(
                    f"bspline with degree {self.degree} needs J >= {self.degree + 1}"
                )
            if self.knots is None:
                interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
            else:
                interior = np.asarray(self.knots, dtype=float)
                if interior.size != n_interior:
                    raise ValueError(
                        f"expected {n_interior} interior knots for J={self.J}, "
                        f"degree={self.degree}; got {interior.size}"
                    )
                if interior.size and (
                    np.any(np.diff(interior) < 0) or interior.min() < 0 or interior.max() > 1
                ):
                    raise ValueError("interior knots must be nondecreasing within [0, 1]")
            full = np.concatenate(
                [np.zeros(self.degree + 1), interior, np.ones(self.degree + 1)]
            )
            object.__setattr__(self, "knots", tuple(float(k) for k in interior))
            self._cache["knot_vector"] = full

    # -- description ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "J": self.J}
        if self.kind == "bspline":
            d["degree"] = self.degree
            d["knots"] = list(self.knots)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSystem":
        return cls(
            kind=d.get("kind", "fourier"),
            J=d["J"],
            degree=d.get("degree", 3),
            knots=d.get("knots"),
        )

    @property
    def knot_vector(self) -> np.ndarray:
        """Full clamped knot vector (B-splines only)."""
        return self._cache["knot_vector"]

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, times, deriv: int = 0) -> np.ndarray:
        """Return the J x M matrix with entry (j, k) = e_j^(deriv)(t_k)."""
        t = _check_times(times)
        if self.kind == "fourier":
            return self._fourier(t, deriv)
        return self._bspline(t, deriv)

    def _fourier(self, t: np.ndarray, deriv: int) -> np.ndarray:
        out = np.empty((self.J, t.size))
        out[0] = 1.0 if deriv == 0 else 0.0
        for idx in range(1, self.J):
            freq = (idx + 1) // 2
            w = 2.0 * np.pi * freq
            # d^n/dt^n sin(wt) = w^n sin(wt + n pi/2); cos likewise
            phase = deriv * np.pi / 2.0
            if idx % 2 == 1:
                out[idx] = np.sqrt(2.0) * w**deriv * np.sin(w * t + phase)
            else:
                out[idx] = np.sqrt(2.0) * w**deriv * np.cos(w * t + phase)
        return out

    def _bspline(self, t: np.ndarray, deriv: int) -> np.ndarray:
        if deriv > self.degree:
            return np.zeros((self.J, t.size))
        k = self.degree
        tk = self.knot_vector
        out = np.empty((self.J, t.size))
        eye = np.eye(self.J)
        for j in range(self.J):
            spl = BSpline(tk, eye[j], k, extrapolate=False)
            if deriv:
                spl = spl.derivative(deriv)
            vals = spl(t)
            # right endpoint is excluded by the half-open spans
            vals = np.where(np.isnan(vals), 0.0, vals)
            out[j] = vals
        at_one = t == 1.0
        if at_one.any():
            for j in range(self.J):
                spl = BSpline(tk, eye[j], k, extrapolate=True)
                if deriv:
                    spl = spl.derivative(deriv)
                out[j, at_one] = spl(1.0)
        return out

    def __call__(self, times) -> np.ndarray:
        return self.evaluate(times)

    # -- inner products ------------------------------------------------------

    @cached_property
    def quad_values(self) -> np.ndarray:
        """Basis evaluated on the quadrature grid, shape (J, N_QUAD)."""
        return self.evaluate(QUAD_GRID)

    def weighted_gram(self, weight: np.ndarray) -> np.ndarray:
        """Return [int w(s) e_i(s) e_j(s) ds] for ``weight`` sampled on QUAD_GRID."""
        E = self.quad_values
        G = (E * (weight * QUAD_WEIGHTS)) @ E.T
        return 0.5 * (G + G.T)

    def gram_matrix(self) -> np.ndarray:
        """Gram matrix Omega = [<e_i, e_j>]."""
        if "gram" not in self._cache:
            if self.kind == "fourier":
                G = np.eye(self.J)
            else:
                G = self.weighted_gram(np.ones(N_QUAD))
                ev = np.linalg.eigvalsh(G)
                if ev[0] <= 1e-12 * ev[-1]:
                    raise IllConditionedBasisError(
                        f"Gram matrix is singular (eigenvalue range {ev[0]:.3g}..{ev[-1]:.3g})"
                    )
            self._cache["gram"] = G
        return self._cache["gram"]

    def penalty_matrix(self, n: int = 2) -> np.ndarray:
        """Roughness penalty P^(n) = [<e_j^(n), e_k^(n)>]."""
        if n < 0:
            raise InvalidOrderError(f"derivative order must be >= 0, got {n}")
        key = ("penalty", n)
        if key not in self._cache:
            if self.kind == "fourier":
                freqs = (np.arange(self.J) + 1) // 2
                P = np.diag((2.0 * np.pi * freqs) ** (2 * n))
            else:
                if self.degree < n:
                    raise InvalidOrderError(
                        f"B-spline of degree {self.degree} has no square-integrable "
                        f"derivative of order {n}"
                    )
                D = self.evaluate(QUAD_GRID, deriv=n)
                P = (D * QUAD_WEIGHTS) @ D.T
                P = 0.5 * (P + P.T)
            self._cache[key] = P
        return self._cache[key]

    def gram_inv_sqrt(self) -> np.ndarray:
        """Symmetric inverse square root of the Gram matrix."""
        if "gram_isqrt" not in self._cache:
            if self.kind == "fourier":
                M = np.eye(self.J)
            else:
                w, V = np.linalg.eigh(self.gram_matrix())
                M = (V / np.sqrt(w)) @ V.T
            self._cache["gram_isqrt"] = M
        return self._cache["gram_isqrt"]


def fourier(J: int = 11) -> BasisSystem:
    return BasisSystem("fourier", J)


def bspline(J: int, degree: int = 3, knots=None) -> BasisSystem:
    return BasisSystem("bspline", J, degree=degree, knots=knots)
