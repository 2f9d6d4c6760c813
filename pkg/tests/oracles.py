"""Independent reference computations used by the tests.

Nothing here calls into the package under test.
"""

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import log_ndtr
from scipy.stats import norm


def orthant_moments_2d(mu, Sigma, y, n=1601, width=9.0):
    """First and second moments of N(mu, Sigma) restricted to the orthant of y.

    Dense tensor-grid trapezoid integration of the bivariate density over
    the allowed quadrant (coordinate j positive iff y[j] == 1).
    Returns (mean (2,), second moment matrix E[w w'] (2, 2)).
    """
    mu = np.asarray(mu, float)
    Sigma = np.asarray(Sigma, float)
    sd = np.sqrt(np.diag(Sigma))
    axes = []
    for j in range(2):
        lo, hi = mu[j] - width * sd[j], mu[j] + width * sd[j]
        if y[j] == 1:
            lo = 0.0
            hi = max(hi, width * sd[j])
        else:
            hi = 0.0
            lo = min(lo, -width * sd[j])
        axes.append(np.linspace(lo, hi, n))
    X, Y = np.meshgrid(*axes, indexing="ij")
    P = np.linalg.inv(Sigma)
    dx, dy = X - mu[0], Y - mu[1]
    q = P[0, 0] * dx * dx + 2 * P[0, 1] * dx * dy + P[1, 1] * dy * dy
    dens = np.exp(-0.5 * q)

    def integ(f):
        return trapezoid(trapezoid(f, axes[1], axis=1), axes[0])

    Z = integ(dens)
    m = np.array([integ(X * dens), integ(Y * dens)]) / Z
    S = np.array([
        [integ(X * X * dens), integ(X * Y * dens)],
        [integ(X * Y * dens), integ(Y * Y * dens)],
    ]) / Z
    return m, S


def truncated_normal_mean(tau, sd, positive):
    """Closed-form mean of N(tau, sd^2) restricted to (0, inf) or (-inf, 0]."""
    a = tau / sd
    # inverse Mills ratio in log space so that far tails do not underflow
    if positive:
        return tau + sd * np.exp(norm.logpdf(a) - log_ndtr(a))
    return tau - sd * np.exp(norm.logpdf(a) - log_ndtr(-a))


def batch_means_se(x, n_batches=50):
    """Standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, float)
    m = x.shape[0] // n_batches
    b = x[: m * n_batches].reshape(n_batches, m, *x.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(n_batches)
