"""Core data containers: the observed binary dataset and the model parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dfr.errors import DesignRankError, InvalidStateError


@dataclass
class ObservedDataset:
    """Binary longitudinal data with scalar covariates.

    ``X`` carries the intercept column. ``times[i]`` and ``y[i]`` hold the
    observation times (on [0, 1]) and binary responses of subject ``i``;
    lengths may differ between subjects.
    """

    X: np.ndarray
    times: List[np.ndarray]
    y: List[np.ndarray]
    subject_ids: Optional[List[str]] = None
    covariate_names: Optional[List[str]] = None
    time_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.times = [np.asarray(t, dtype=float).reshape(-1) for t in self.times]
        self.y = [np.asarray(v).astype(np.int8).reshape(-1) for v in self.y]
        n = self.X.shape[0]
        if len(self.times) != n or len(self.y) != n:
            raise ValueError("X, times and y must describe the same number of subjects")
        for i, (t, v) in enumerate(zip(self.times, self.y)):
            if t.shape != v.shape:
                raise ValueError(f"subject {i}: times and y differ in length")
            if np.any((v != 0) & (v != 1)):
                raise ValueError(f"subject {i}: responses must be 0/1")
        if self.subject_ids is None:
            self.subject_ids = [str(i) for i in range(n)]
        if self.covariate_names is None:
            self.covariate_names = ["intercept"] + [f"x{l}" for l in range(1, self.X.shape[1])]

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> np.ndarray:
        return np.array([t.size for t in self.times])

    @property
    def total_obs(self) -> int:
        return int(self.M.sum())

    def check(self) -> None:
        """Validate the dataset for fitting."""
        if self.N == 0:
            raise InvalidStateError("dataset has no subjects")
        if np.any(self.M < 1):
            bad = [self.subject_ids[i] for i in np.flatnonzero(self.M < 1)]
            raise InvalidStateError(f"subjects without observations: {bad[:5]}")
        check_design(self.X)
        for t in self.times:
            if t.size and (t.min() < 0 or t.max() > 1):
                raise InvalidStateError("observation times must lie in [0, 1]")


def check_design(X: np.ndarray) -> None:
    """Raise ``DesignRankError`` unless X has full column rank."""
    X = np.atleast_2d(X)
    N, q = X.shape
    if N < q:
        raise DesignRankError(f"design has {N} rows but {q} columns")
    rank = np.linalg.matrix_rank(X)
    if rank < q:
        # name the columns that are linear combinations of the earlier ones
        offending = []
        prev = 0
        for l in range(q):
            r = np.linalg.matrix_rank(X[:, : l + 1])
            if r == prev:
                offending.append(l)
            prev = r
        raise DesignRankError(f"design matrix is rank deficient (rank {rank} < {q}); dependent columns {offending}")


@dataclass
class ModelParams:
    """Parameter set (B, Sigma_theta, sigma2) of the truncated model.

    B : (q, J) basis coefficients of the regression functions, one row per covariate.
    Sigma_theta : (J, J) covariance of the latent basis scores.
    sigma2 : measurement-error variance on the standardized scale.
    """

    B: np.ndarray
    Sigma_theta: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma_theta, dtype=float))
        if S.shape[0] != S.shape[1] or S.shape[0] != self.B.shape[1]:
            raise ValueError(f"Sigma_theta shape {S.shape} does not match B shape {self.B.shape}")
        self.Sigma_theta = 0.5 * (S + S.T)
        self.sigma2 = float(self.sigma2)
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        tr = np.trace(self.Sigma_theta)
        if tr < 0 or np.linalg.eigvalsh(self.Sigma_theta)[0] < -1e-8 * max(tr, 1e-12):
            raise ValueError("Sigma_theta is not positive semidefinite")

    @property
    def q(self) -> int:
        return self.B.shape[0]

    @property
    def J(self) -> int:
        return self.B.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.B.copy(), self.Sigma_theta.copy(), self.sigma2)

    def to_dict(self) -> dict:
        return {
            "B": self.B.tolist(),
            "Sigma_theta": self.Sigma_theta.tolist(),
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(np.array(d["B"], dtype=float), np.array(d["Sigma_theta"], dtype=float), d["sigma2"])
