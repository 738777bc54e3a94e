"""Gaussian observation kernel, inverse-Gamma variance prior, density estimates."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = ["InvGamma", "log_kernel", "log_kernel_matrix", "mixture_density", "density_estimate"]


@dataclass(frozen=True)
class InvGamma:
    """Inverse-Gamma(shape a, scale b) prior on a component variance."""

    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("inverse-Gamma shape and scale must be positive")

    def sample(self, rng, size=None):
        return self.b / rng.gamma(self.a, 1.0, size=size)

    def posterior(self, sq_resid: float, n_dims: int) -> "InvGamma":
        """Conjugate update after n_dims scalar Gaussian residuals with sum sq_resid."""
        return InvGamma(self.a + 0.5 * n_dims, self.b + 0.5 * sq_resid)

    def logpdf(self, v):
        v = np.asarray(v, dtype=float)
        return (self.a * math.log(self.b) - math.lgamma(self.a)
                - (self.a + 1) * np.log(v) - self.b / v)


def log_kernel(z, y, v) -> float:
    """Isotropic Gaussian log-density of z with mean y and variance v I."""
    if np.any(np.asarray(v) <= 0):
        raise ValueError("variance must be positive")
    z, y = np.atleast_1d(np.asarray(z, float)), np.atleast_1d(np.asarray(y, float))
    q = z.shape[-1]
    return float(-0.5 * q * math.log(2 * math.pi * v) - 0.5 * np.sum((z - y) ** 2) / v)


def log_kernel_matrix(z: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(n, m) matrix of log f(z_i | mean_h, var_h)."""
    q = z.shape[1]
    d2 = ((z[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return -0.5 * q * np.log(2 * math.pi * variances)[None, :] - 0.5 * d2 / variances[None, :]


def mixture_density(grid: np.ndarray, means, variances, jumps) -> np.ndarray:
    """Density of sum_h (S_h / T) f(. | X_h, W_h) on the grid."""
    grid = np.asarray(grid, float)
    if grid.ndim == 1:
        grid = grid[:, None]
    means = np.asarray(means, float).reshape(len(jumps), -1)
    w = np.asarray(jumps, float)
    w = w / w.sum()
    lk = log_kernel_matrix(grid, means, np.asarray(variances, float))
    return np.exp(lk) @ w


def density_estimate(measure_draws, grid):
    """Posterior mean mixture density over a list of DiscreteMeasure draws.

    Returns the averaged density and the number of skipped empty draws.
    """
    grid = np.asarray(grid, float)
    acc = np.zeros(len(grid))
    used = skipped = 0
    for m in measure_draws:
        if len(m.jumps) == 0 or m.total_mass <= 0:
            skipped += 1
            continue
        acc += mixture_density(grid, m.locations, m.variances, m.jumps)
        used += 1
    if skipped:
        warnings.warn(f"skipped {skipped} empty measure draws", RuntimeWarning, stacklevel=2)
    if used == 0:
        raise ValueError("no nonempty draws")
    return acc / used, skipped
