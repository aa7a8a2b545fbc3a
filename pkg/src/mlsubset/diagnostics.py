"""Coefficient of variation and chain autocorrelation."""
from __future__ import annotations

import math
import warnings

import numpy as np


class DegenerateChainWarning(UserWarning):
    """Indicator chains carry no information about correlation."""


def estimate_cov(p_hat: float, n: int, phi: float = 0.0) -> float:
    """``sqrt((1 - p)(1 + phi) / (n p))``; ``inf`` when ``p == 0``.

    >>> round(estimate_cov(0.1, 1000, 0.0), 5)
    0.09487
    """
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p_hat}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if phi < 0:
        raise ValueError("phi must be nonnegative")
    if p_hat == 0.0:
        return math.inf
    return math.sqrt((1.0 - p_hat) * (1.0 + phi) / (n * p_hat))


def estimate_autocorrelation(chains) -> float:
    """Variance inflation ``phi = 2 sum_k (1 - k/n) rho(k)`` of the chain mean.

    ``chains`` is an ``(n_chains, n)`` array of indicator values.  The lag
    correlations are pooled over chains about the grand mean, and the sum is
    cut at the first lag whose correlation is not positive.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    n_chains, n = x.shape
    if n < 2:
        warnings.warn("chains shorter than 2 steps; phi set to 0", DegenerateChainWarning, stacklevel=2)
        return 0.0
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size, axis=1)
    acov = np.fft.irfft((f * f.conj()).real, size, axis=1)[:, :n].sum(axis=0)
    acov /= n_chains * (n - np.arange(n))
    if acov[0] <= 1e-14:
        warnings.warn("indicator chains are constant; phi set to 0", DegenerateChainWarning, stacklevel=2)
        return 0.0
    rho = acov[1:] / acov[0]
    nonpos = np.flatnonzero(rho <= 0)
    cut = nonpos[0] if nonpos.size else rho.size
    k = np.arange(1, cut + 1)
    return float(2.0 * np.sum((1.0 - k / n) * rho[:cut]))


def combine_cov(covs, s: int = 2) -> float:
    """Bound on the product estimator's c.o.v. from per-subset values.

    ``s = 1`` treats subsets as uncorrelated (root of the sum of squares),
    ``s = 2`` as fully correlated (plain sum).
    """
    covs = np.asarray(list(covs), dtype=float)
    if np.any(covs < 0):
        raise ValueError("c.o.v. values must be nonnegative")
    if s == 1:
        return float(np.sqrt(np.sum(covs**2)))
    if s == 2:
        return float(np.sum(covs))
    raise ValueError(f"s must be 1 or 2, got {s}")
