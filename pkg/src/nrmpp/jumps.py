"""Gamma mark law for the unnormalized jumps and its transforms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = ["JumpModel", "psi", "kappa", "sample_jump"]


def _check_u(u):
    if np.any(np.asarray(u) < 0):
        raise ValueError("u must be non-negative")


@dataclass(frozen=True)
class JumpModel:
    """Gamma(shape, rate) law of the jumps S."""

    shape: float = 1.0
    rate: float = 1.0

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError("Gamma shape and rate must be positive")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def second_moment(self) -> float:
        return self.shape * (self.shape + 1) / self.rate ** 2

    def log_psi(self, u):
        _check_u(u)
        return -self.shape * np.log1p(np.asarray(u, dtype=float) / self.rate)

    def psi(self, u):
        """Laplace transform E[exp(-u S)]."""
        return np.exp(self.log_psi(u))

    def log_kappa(self, u, n):
        """log of int exp(-u s) s^n H(ds)."""
        _check_u(u)
        u = np.asarray(u, dtype=float)
        n = np.asarray(n)
        a, th = self.shape, self.rate
        return (gammaln(a + n) - gammaln(a) + a * math.log(th)
                - (a + n) * np.log(th + u))

    def kappa(self, u, n):
        return np.exp(self.log_kappa(u, n))

    def kappa_ratio(self, u, n):
        """kappa(u, n+1) / kappa(u, n) computed without cancellation."""
        _check_u(u)
        return (self.shape + np.asarray(n)) / (self.rate + np.asarray(u, dtype=float))

    def log_density(self, s):
        a, th = self.shape, self.rate
        s = np.asarray(s, dtype=float)
        return a * math.log(th) - gammaln(a) + (a - 1) * np.log(s) - th * s

    def sample(self, u=0.0, n=0, rng=None, size=None):
        """Draw from the tilted law proportional to exp(-u s) s^n H(ds)."""
        _check_u(u)
        rng = np.random.default_rng() if rng is None else rng
        shape = self.shape + np.asarray(n)
        return rng.gamma(shape, 1.0 / (self.rate + np.asarray(u, dtype=float)), size=size)


def psi(jm: JumpModel, u):
    return jm.psi(u)


def kappa(jm: JumpModel, u, n):
    return jm.kappa(u, n)


def sample_jump(jm: JumpModel, u, n, rng, size=None):
    return jm.sample(u, n, rng, size)
