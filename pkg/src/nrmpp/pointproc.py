"""Point processes on boxes in R^q: Poisson, Strauss, determinantal and shot-noise Cox.

Each family knows how to simulate itself, evaluate its factorial moment
densities, and build its reduced Palm version at a set of anchor points.
The Palm objects simulate the exponentially tilted process (every point
thinned with probability psi(u)) and evaluate log E[psi(u)^N].

Point configurations are float arrays of shape (k, q).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np
from scipy import stats
from scipy.special import gammaln, log_ndtr, logsumexp

from .jumps import JumpModel

__all__ = [
    "Region",
    "as_points",
    "Poisson",
    "Strauss",
    "Dpp",
    "Sncp",
    "SpectralBasis",
    "NystromBasis",
    "DppExistenceError",
    "spectral_decompose",
    "nystrom",
    "simulate",
    "log_papangelou",
    "log_moment_density",
    "reduced_palm",
    "log_tilted_laplace",
    "set_partitions",
    "poisson_binomial_pmf",
]

SNCP_MAX_K = 12


class DppExistenceError(ValueError):
    pass


def as_points(x, dim: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim in (None, 1) else x.reshape(-1, dim)
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape[1]}")
    return x


def _check_distinct(pts):
    if len(pts) > 1:
        d = np.abs(pts[:, None, :] - pts[None, :, :]).sum(-1)
        iu = np.triu_indices(len(pts), 1)
        if np.any(d[iu] == 0):
            raise ValueError("points must be pairwise distinct")


@dataclass(frozen=True)
class Region:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("region needs upper > lower in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)

    def uniform(self, rng, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def grid(self, m: int) -> np.ndarray:
        """Midpoint grid with m cells per coordinate."""
        axes = [l + (h - l) * (np.arange(m) + 0.5) / m for l, h in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def is_subset_of(self, other: "Region") -> bool:
        return bool(np.all(self.lo >= other.lo) and np.all(self.hi <= other.hi))

    def intersect(self, other: "Region") -> Optional["Region"]:
        lo, hi = np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi)
        if np.any(hi <= lo):
            return None
        return Region(tuple(lo), tuple(hi))


def _sqdist(x, y):
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)


def set_partitions(items):
    """All set partitions of a list, as lists of blocks."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def poisson_binomial_pmf(p, r_max: Optional[int] = None) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    pmf = np.zeros(len(p) + 1)
    pmf[0] = 1.0
    for j, pj in enumerate(p):
        pmf[1: j + 2] = pmf[1: j + 2] * (1 - pj) + pmf[: j + 1] * pj
        pmf[0] *= 1 - pj
    if r_max is not None:
        pmf = pmf[: r_max + 1] if len(pmf) > r_max else np.pad(pmf, (0, r_max + 1 - len(pmf)))
    return pmf


# ---------------------------------------------------------------------------
# Poisson
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Poisson:
    """Homogeneous Poisson process with intensity rate * 1_R."""

    rate: float
    region: Region

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    @property
    def dim(self) -> int:
        return self.region.dim

    @property
    def mean_count(self) -> float:
        return self.rate * self.region.volume

    def intensity(self, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return np.where(self.region.contains(x), self.rate, 0.0)

    def simulate(self, rng, rate_scale: float = 1.0) -> np.ndarray:
        n = rng.poisson(self.mean_count * rate_scale)
        return self.region.uniform(rng, n)

    def log_papangelou(self, nu, xs) -> float:
        nu = as_points(nu, self.dim)
        if not np.all(self.region.contains(nu)):
            return -math.inf
        return len(nu) * math.log(self.rate)

    def log_moment_density(self, pts) -> float:
        pts = as_points(pts, self.dim)
        _check_distinct(pts)
        if not np.all(self.region.contains(pts)):
            return -math.inf
        return len(pts) * math.log(self.rate)

    def reduced_palm(self, anchors) -> "PalmPoisson":
        return PalmPoisson(self, as_points(anchors, self.dim))

    def log_tilted_joint(self, pts, log_psi: float) -> float:
        """log of m_k(pts) * E[psi^N] for the Palm process at pts."""
        return self.log_moment_density(pts) + self.mean_count * math.expm1(log_psi)


@dataclass
class PalmPoisson:
    pp: Poisson
    anchors: np.ndarray

    def log_tilted_laplace(self, u: float, jm: JumpModel):
        return self.pp.mean_count * (float(jm.psi(u)) - 1.0), 0.0

    def count_pmf(self, r_max: int) -> np.ndarray:
        return stats.poisson.pmf(np.arange(r_max + 1), self.pp.mean_count)

    def simulate(self, u: float, jm: JumpModel, rng, init=None) -> np.ndarray:
        return self.pp.simulate(rng, float(jm.psi(u)))


# ---------------------------------------------------------------------------
# Strauss (Gibbs)
# ---------------------------------------------------------------------------


def _close_pairs(x, radius) -> int:
    if len(x) < 2:
        return 0
    d = _sqdist(x, x)
    return int(np.triu(d <= radius ** 2, 1).sum())


def _cross_pairs(x, y, radius) -> int:
    if len(x) == 0 or len(y) == 0:
        return 0
    return int((_sqdist(x, y) <= radius ** 2).sum())


@dataclass(frozen=True)
class Strauss:
    """Strauss process, unnormalized density beta^n gamma_s^(close pairs)."""

    beta: float
    gamma_s: float
    radius: float
    region: Region
    bd_steps: Optional[int] = None
    mc_samples: int = 2000

    def __post_init__(self):
        if self.beta <= 0 or not (0 <= self.gamma_s <= 1) or self.radius <= 0:
            raise ValueError("need beta > 0, 0 <= gamma_s <= 1, radius > 0")

    @property
    def dim(self) -> int:
        return self.region.dim

    @property
    def n_steps(self) -> int:
        if self.bd_steps is not None:
            return int(self.bd_steps)
        return int(max(200, 20 * self.beta * self.region.volume))

    def log_g(self, x) -> float:
        x = as_points(x, self.dim)
        s = _close_pairs(x, self.radius)
        if s > 0 and self.gamma_s == 0:
            return -math.inf
        out = len(x) * math.log(self.beta)
        return out + (s * math.log(self.gamma_s) if s else 0.0)

    def log_papangelou(self, nu, xs) -> float:
        nu, xs = as_points(nu, self.dim), as_points(xs, self.dim)
        if not np.all(self.region.contains(nu)):
            return -math.inf
        ds = _close_pairs(nu, self.radius) + _cross_pairs(nu, xs, self.radius)
        out = len(nu) * math.log(self.beta)
        if ds:
            out = out + (ds * math.log(self.gamma_s) if self.gamma_s > 0 else -math.inf)
        return out

    def birth_death(self, rng, init=None, fixed=None, log_scale: float = 0.0,
                    n_steps: Optional[int] = None) -> np.ndarray:
        """Birth-death Metropolis-Hastings for the density proportional to
        exp(log_scale)^n * beta^n * gamma_s^(s(x) + s(x, fixed)).
        """
        x = np.empty((0, self.dim)) if init is None else as_points(init, self.dim).copy()
        fixed = np.empty((0, self.dim)) if fixed is None else as_points(fixed, self.dim)
        vol = self.region.volume
        lb = math.log(self.beta) + log_scale + math.log(vol)
        lg = math.log(self.gamma_s) if self.gamma_s > 0 else -math.inf
        r2 = self.radius ** 2
        steps = self.n_steps if n_steps is None else n_steps
        pts = list(map(np.asarray, x))
        coins = rng.random(steps)
        logu = np.log(rng.random(steps))
        for t in range(steps):
            n = len(pts)
            if coins[t] < 0.5:
                xi = self.region.uniform(rng, 1)[0]
                k = 0
                if n:
                    k += int((((np.asarray(pts) - xi) ** 2).sum(1) <= r2).sum())
                if len(fixed):
                    k += int((((fixed - xi) ** 2).sum(1) <= r2).sum())
                la = lb - math.log(n + 1) + (k * lg if k else 0.0)
                if logu[t] < la:
                    pts.append(xi)
            elif n:
                j = rng.integers(n)
                xi = pts[j]
                others = np.asarray(pts[:j] + pts[j + 1:]).reshape(-1, self.dim)
                k = int((((others - xi) ** 2).sum(1) <= r2).sum()) if len(others) else 0
                if len(fixed):
                    k += int((((fixed - xi) ** 2).sum(1) <= r2).sum())
                la = -lb + math.log(n) - (k * lg if k else 0.0)
                if logu[t] < la:
                    pts.pop(j)
        return np.asarray(pts).reshape(-1, self.dim)

    def simulate(self, rng, init=None) -> np.ndarray:
        return self.birth_death(rng, init=init)

    def _poisson_batch(self, rng, n_samples, rate):
        counts = rng.poisson(rate * self.region.volume, size=n_samples)
        return [self.region.uniform(rng, c) for c in counts]

    def _log_mean_gamma(self, batch, anchors) -> tuple[float, float]:
        # log E[gamma_s^{s(N + anchors)}] over a batch, with standard error on the log scale
        lg = math.log(self.gamma_s) if self.gamma_s > 0 else -math.inf
        vals = np.empty(len(batch))
        for i, nu in enumerate(batch):
            s = _close_pairs(nu, self.radius) + _cross_pairs(nu, anchors, self.radius)
            vals[i] = s * lg if s else 0.0
        m = logsumexp(vals) - math.log(len(vals))
        w = np.exp(vals - m)
        se = float(np.std(w, ddof=1) / math.sqrt(len(w))) if len(w) > 1 else 0.0
        return float(m), se

    def log_moment_density(self, pts, rng=None, n_samples: Optional[int] = None,
                           return_se: bool = False):
        """Monte Carlo estimate of log m_k(pts); the normalizing constant is
        estimated on the same batch of Poisson(beta) configurations.
        """
        pts = as_points(pts, self.dim)
        _check_distinct(pts)
        rng = np.random.default_rng(0) if rng is None else rng
        n_samples = self.mc_samples if n_samples is None else n_samples
        if not np.all(self.region.contains(pts)):
            return (-math.inf, 0.0) if return_se else -math.inf
        batch = self._poisson_batch(rng, n_samples, self.beta)
        a, se_a = self._log_mean_gamma(batch, pts)
        b, se_b = self._log_mean_gamma(batch, np.empty((0, self.dim)))
        # m_k(y) = beta^k gamma^{s(y)} E[gamma^{s(N + y) - s(y)}] / E[gamma^{s(N)}], N ~ PP(beta)
        val = self.log_g(pts) + a - b
        se = math.hypot(se_a, se_b)
        return (val, se) if return_se else val

    def reduced_palm(self, anchors) -> "PalmStrauss":
        return PalmStrauss(self, as_points(anchors, self.dim))


@dataclass
class PalmStrauss:
    """Reduced Palm version: density proportional to g(nu + anchors)."""

    pp: Strauss
    anchors: np.ndarray

    def simulate(self, u: float, jm: JumpModel, rng, init=None, n_steps=None) -> np.ndarray:
        return self.pp.birth_death(rng, init=init, fixed=self.anchors,
                                   log_scale=float(jm.log_psi(u)), n_steps=n_steps)

    def log_tilted_laplace(self, u: float, jm: JumpModel, rng=None,
                           mc_samples: Optional[int] = None):
        """log E[psi^N] under the Palm law, by importance sampling from
        Poisson(beta) configurations with the tilt applied by thinning.
        """
        mc = self.pp.mc_samples if mc_samples is None else mc_samples
        if mc < 100:
            raise ValueError("need at least 100 Monte Carlo samples")
        rng = np.random.default_rng(0) if rng is None else rng
        psi = float(jm.psi(u))
        batch = self.pp._poisson_batch(rng, mc, self.pp.beta)
        lg = math.log(self.pp.gamma_s) if self.pp.gamma_s > 0 else -math.inf
        num = np.empty(mc)
        den = np.empty(mc)
        for i, nu in enumerate(batch):
            s = _close_pairs(nu, self.pp.radius) + _cross_pairs(nu, self.anchors, self.pp.radius)
            ls = s * lg if s else 0.0
            den[i] = ls
            num[i] = ls + len(nu) * math.log(psi) if psi > 0 else -math.inf
        val = logsumexp(num) - logsumexp(den)
        # delta-method standard error of the ratio estimator
        wn, wd = np.exp(num - num.max()), np.exp(den - den.max())
        rn = wn / wn.mean()
        rd = wd / wd.mean()
        se = float(np.std(rn - rd, ddof=1) / math.sqrt(mc))
        return float(val), se

    def count_pmf(self, r_max: int, rng=None, n_samples: int = 2000) -> np.ndarray:
        rng = np.random.default_rng(0) if rng is None else rng
        jm = JumpModel(1.0, 1.0)
        x = None
        counts = np.zeros(r_max + 1)
        burn = self.pp.n_steps
        x = self.simulate(0.0, jm, rng, n_steps=burn)
        for _ in range(n_samples):
            x = self.simulate(0.0, jm, rng, init=x, n_steps=max(20, burn // 10))
            if len(x) <= r_max:
                counts[len(x)] += 1
        return counts / n_samples


# ---------------------------------------------------------------------------
# Determinantal point process
# ---------------------------------------------------------------------------


@dataclass
class SpectralBasis:
    """Fourier eigenvalues of a Gaussian kernel on a box (periodic approximation)."""

    frequencies: np.ndarray
    eigenvalues: np.ndarray
    residual: float
    side: np.ndarray
    lower: np.ndarray

    @property
    def total(self) -> float:
        return float(self.eigenvalues.sum())

    @property
    def valid(self) -> bool:
        return bool(np.all(self.eigenvalues < 1.0))


def spectral_decompose(pp: "Dpp", cutoff_tol: float = 1e-6, check: bool = True) -> SpectralBasis:
    """Fourier eigenvalues rho (pi alpha)^{q/2} exp(-pi^2 alpha |h/side|^2),
    rescaled so that the full series sums to rho |R| (the expected count),
    then truncated once the discarded mass is below cutoff_tol of the total.
    """
    reg = pp.region
    side = reg.hi - reg.lo
    q = reg.dim
    # per-axis frequency range large enough that the tail is negligible
    hmax = [int(math.ceil(s * math.sqrt(40.0 / (math.pi ** 2 * pp.alpha_d)))) + 1 for s in side]
    axes = [np.arange(-h, h + 1) for h in hmax]
    freqs = np.array(list(product(*axes)), dtype=float)
    lam = pp.rho * (math.pi * pp.alpha_d) ** (q / 2) * np.exp(
        -math.pi ** 2 * pp.alpha_d * ((freqs / side) ** 2).sum(1))
    lam *= pp.rho * reg.volume / lam.sum()
    order = np.argsort(-lam)
    lam, freqs = lam[order], freqs[order]
    tail = lam.sum() - np.cumsum(lam)
    keep = int(np.searchsorted(-tail, -cutoff_tol * lam.sum())) + 1
    keep = min(keep, len(lam))
    basis = SpectralBasis(freqs[:keep].astype(int), lam[:keep], float(tail[keep - 1]), side, reg.lo)
    if check and not basis.valid:
        raise DppExistenceError(
            f"DPP existence violated: largest eigenvalue {lam[0]:.4g} >= 1")
    return basis


@dataclass
class NystromBasis:
    """Eigenpairs of an integral operator approximated on a midpoint grid."""

    eigenvalues: np.ndarray
    vectors: np.ndarray
    grid: np.ndarray
    weight: float
    kernel: Callable

    def eigenfunctions(self, x) -> np.ndarray:
        """Nystrom extension phi_h(x) = (w / g_h) sum_j k(x, x_j) phi_h(x_j)."""
        x = as_points(x, self.grid.shape[1])
        kx = self.kernel(x, self.grid)
        g = np.where(self.eigenvalues > 1e-300, self.eigenvalues, np.inf)
        return math.sqrt(self.weight) * (kx @ self.vectors) / g

    def on_grid(self) -> np.ndarray:
        return self.vectors / math.sqrt(self.weight)


def nystrom(kernel: Callable, region: Region, m_landmarks: int,
            grid_matrix: Optional[np.ndarray] = None) -> NystromBasis:
    if m_landmarks < 8:
        raise ValueError("need at least 8 landmarks per coordinate")
    grid = region.grid(m_landmarks)
    w = region.volume / len(grid)
    G = kernel(grid, grid) if grid_matrix is None else grid_matrix
    if np.max(np.abs(G - G.T)) > 1e-8 * max(1.0, np.max(np.abs(G))):
        raise ValueError("kernel matrix is not symmetric")
    vals, vecs = np.linalg.eigh(w * 0.5 * (G + G.T))
    order = np.argsort(-vals)
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    return NystromBasis(vals, vecs, grid, w, kernel)


class Dpp:
    """Determinantal process on a box with Gaussian kernel rho exp(-|x-y|^2 / alpha_d).

    parametrization="marginal": the Gaussian is the correlation kernel K
    (requires all operator eigenvalues below one).
    parametrization="likelihood": the Gaussian is the likelihood kernel C
    and K = C (I + C)^{-1}; every positive definite Gaussian is admissible.
    Operators are discretized on a midpoint grid (Nystrom).
    """

    def __init__(self, rho: float, alpha_d: float, region: Region,
                 parametrization: str = "marginal", m_landmarks: Optional[int] = None):
        if rho <= 0 or alpha_d <= 0:
            raise ValueError("rho and alpha_d must be positive")
        if parametrization not in ("marginal", "likelihood"):
            raise ValueError("parametrization must be 'marginal' or 'likelihood'")
        self.rho, self.alpha_d, self.region = float(rho), float(alpha_d), region
        self.parametrization = parametrization
        if m_landmarks is None:
            m_landmarks = {1: 200, 2: 30}.get(region.dim, 12)
        self.m_landmarks = int(m_landmarks)
        self.grid = region.grid(self.m_landmarks)
        self.w = region.volume / len(self.grid)
        G = self.gaussian(self.grid, self.grid)
        I = np.eye(len(self.grid))
        if parametrization == "marginal":
            base = nystrom(self.gaussian, region, self.m_landmarks, grid_matrix=G)
            if base.eigenvalues[0] >= 1.0:
                raise DppExistenceError(
                    f"DPP existence violated: largest eigenvalue {base.eigenvalues[0]:.4g} >= 1")
            # C = K (I - K)^{-1} = K + K (I - K)^{-1} K
            self._res = np.linalg.solve(I - self.w * G, I)
            self.Cg = G + self.w * G @ self._res @ G
        else:
            # K = C - C (I + C)^{-1} C
            self._res = np.linalg.solve(I + self.w * G, I)
            self.Cg = G
        self.Cg = 0.5 * (self.Cg + self.Cg.T)
        self._logdet_IC = float(np.linalg.slogdet(I + self.w * self.Cg)[1])
        self._base_cache = None

    def __repr__(self):
        return (f"Dpp(rho={self.rho}, alpha_d={self.alpha_d}, region={self.region}, "
                f"parametrization={self.parametrization!r})")

    @property
    def dim(self) -> int:
        return self.region.dim

    def gaussian(self, x, y) -> np.ndarray:
        return self.rho * np.exp(-_sqdist(as_points(x, self.dim), as_points(y, self.dim)) / self.alpha_d)

    def C(self, x, y) -> np.ndarray:
        """Likelihood kernel."""
        x, y = as_points(x, self.dim), as_points(y, self.dim)
        if self.parametrization == "likelihood":
            return self.gaussian(x, y)
        kx, ky = self.gaussian(x, self.grid), self.gaussian(y, self.grid)
        return self.gaussian(x, y) + self.w * kx @ self._res @ ky.T

    def K(self, x, y) -> np.ndarray:
        """Correlation kernel."""
        x, y = as_points(x, self.dim), as_points(y, self.dim)
        if self.parametrization == "marginal":
            return self.gaussian(x, y)
        cx, cy = self.gaussian(x, self.grid), self.gaussian(y, self.grid)
        return self.gaussian(x, y) - self.w * cx @ self._res @ cy.T

    def intensity(self, x) -> np.ndarray:
        x = as_points(x, self.dim)
        k = np.array([self.K(xi[None], xi[None])[0, 0] for xi in x])
        return np.where(self.region.contains(x), k, 0.0)

    def base_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of K (all in [0, 1))."""
        g = np.clip(np.linalg.eigvalsh(self.w * self.Cg), 0.0, None)[::-1]
        return g / (1.0 + g)

    @property
    def mean_count(self) -> float:
        return float(self.base_eigenvalues().sum())

    def log_moment_density(self, pts) -> float:
        pts = as_points(pts, self.dim)
        _check_distinct(pts)
        if not np.all(self.region.contains(pts)):
            return -math.inf
        if len(pts) == 0:
            return 0.0
        s, ld = np.linalg.slogdet(self.K(pts, pts))
        return float(ld) if s > 0 else -math.inf

    def log_papangelou(self, nu, xs) -> float:
        """log det C(xs + nu) - log det C(xs): the conditional intensity of
        adding nu given xs."""
        nu, xs = as_points(nu, self.dim), as_points(xs, self.dim)
        if not np.all(self.region.contains(nu)):
            return -math.inf
        if len(nu) == 0:
            return 0.0
        C_nu = self.C(nu, nu)
        if len(xs):
            Cx = self.C(xs, xs)
            Cxn = self.C(xs, nu)
            try:
                C_nu = C_nu - Cxn.T @ np.linalg.solve(Cx, Cxn)
            except np.linalg.LinAlgError:
                return -math.inf
        s, ld = np.linalg.slogdet(C_nu)
        return float(ld) if s > 0 else -math.inf

    def palm_grid_kernel(self, anchors) -> np.ndarray:
        """Schur complement C' on the grid (untilted)."""
        anchors = as_points(anchors, self.dim)
        if len(anchors) == 0:
            return self.Cg
        Ca = self.C(anchors, anchors)
        ev = np.linalg.eigvalsh(Ca)
        if ev[0] <= 1e-12 * ev[-1]:
            raise ValueError("anchors degenerate for DPP Palm")
        Cga = self.C(self.grid, anchors)
        out = self.Cg - Cga @ np.linalg.solve(Ca, Cga.T)
        return 0.5 * (out + out.T)

    def palm_kernel(self, anchors, x, y) -> np.ndarray:
        anchors = as_points(anchors, self.dim)
        cxy = self.C(x, y)
        if len(anchors) == 0:
            return cxy
        Ca = self.C(anchors, anchors)
        return cxy - self.C(x, anchors) @ np.linalg.solve(Ca, self.C(anchors, y))

    def log_tilted_joint(self, pts, log_psi: float) -> float:
        """log of m_k(pts) * E[psi^N] for the Palm process at pts:
        log det C(pts) + log det(I + psi C') - log det(I + C).
        """
        pts = as_points(pts, self.dim)
        if not np.all(self.region.contains(pts)):
            return -math.inf
        ld = 0.0
        if len(pts):
            s, ld = np.linalg.slogdet(self.C(pts, pts))
            if s <= 0:
                return -math.inf
            try:
                Cp = self.palm_grid_kernel(pts)
            except ValueError:
                return -math.inf
        else:
            Cp = self.Cg
        g = np.clip(np.linalg.eigvalsh(self.w * Cp), 0.0, None)
        return float(ld + np.log1p(math.exp(log_psi) * g).sum() - self._logdet_IC)

    def reduced_palm(self, anchors) -> "PalmDpp":
        return PalmDpp(self, as_points(anchors, self.dim))

    def _unconditioned(self) -> "PalmDpp":
        if self._base_cache is None:
            self._base_cache = PalmDpp(self, np.empty((0, self.dim)), tabulate=True)
        return self._base_cache

    def simulate(self, rng) -> np.ndarray:
        return self._unconditioned().simulate(0.0, None, rng)

    def simulate_many(self, rng, n: int) -> list:
        palm = self._unconditioned()
        return [palm.simulate(0.0, None, rng) for _ in range(n)]


class PalmDpp:
    """Reduced Palm DPP at a set of anchors: an L-ensemble with kernel C'.

    With tabulate=True (q = 1 only) the eigenfunctions are tabulated once on a
    fine grid and interpolated, which pays off when many draws are needed.
    """

    def __init__(self, pp: Dpp, anchors: np.ndarray, tabulate: bool = False):
        self.pp, self.anchors = pp, anchors
        Cp = pp.palm_grid_kernel(anchors)
        vals, vecs = np.linalg.eigh(pp.w * Cp)
        order = np.argsort(-vals)
        self.gammas = np.clip(vals[order], 0.0, None)
        self.vectors = vecs[:, order]
        if len(anchors):
            self._Ca_inv = np.linalg.inv(pp.C(anchors, anchors))
            self._Cag = pp.C(anchors, pp.grid)
        self._tab = None
        if tabulate and pp.dim == 1:
            lo, hi = pp.region.lower[0], pp.region.upper[0]
            self._xt = np.linspace(lo, hi, 4001)
            rows = self.kernel_rows(self._xt[:, None])
            live = self.gammas > 1e-12 * max(self.gammas[0], 1e-300)
            self._tab = np.zeros((len(self._xt), len(self.gammas)))
            self._tab[:, live] = rows @ (self.vectors[:, live] * (math.sqrt(pp.w) / self.gammas[live]))

    def eigenvalues(self, psi: float = 1.0) -> np.ndarray:
        g = psi * self.gammas
        return g / (1.0 + g)

    def log_tilted_laplace(self, u: float, jm: JumpModel):
        psi = float(jm.psi(u))
        lam = self.eigenvalues()
        return float(np.log1p(-lam * (1.0 - psi)).sum()), 0.0

    def count_pmf(self, r_max: int) -> np.ndarray:
        lam = self.eigenvalues()
        return poisson_binomial_pmf(lam[lam > 1e-15], r_max)

    def kernel_rows(self, x) -> np.ndarray:
        """C'(x, grid) for arbitrary x."""
        pp = self.pp
        out = pp.C(x, pp.grid)
        if len(self.anchors):
            out = out - pp.C(x, self.anchors) @ self._Ca_inv @ self._Cag
        return out

    def eigenfunctions(self, x, idx) -> np.ndarray:
        """Nystrom extension of the selected eigenfunctions at x."""
        x = as_points(x, self.pp.dim)
        coef = self.vectors[:, idx] * (math.sqrt(self.pp.w) / self.gammas[idx])
        if self._tab is not None:
            return self._interp(self._tab[:, idx], x[:, 0])
        return self.kernel_rows(x) @ coef

    def _interp(self, tab, x):
        # linear interpolation of all tabulated columns at once
        h = self._xt[1] - self._xt[0]
        t = (x - self._xt[0]) / h
        i = np.clip(t.astype(int), 0, len(self._xt) - 2)
        f = (t - i)[:, None]
        return tab[i] * (1 - f) + tab[i + 1] * f

    def simulate(self, u: float, jm: Optional[JumpModel], rng, init=None) -> np.ndarray:
        psi = 1.0 if jm is None else float(jm.psi(u))
        lam = self.eigenvalues(psi)
        sel = np.nonzero(rng.random(len(lam)) < lam)[0]
        return self._project_sample(sel, rng)

    def _project_sample(self, sel, rng, batch: int = 32) -> np.ndarray:
        """Sequential sampling of the projection DPP spanned by the selected
        eigenfunctions, by rejection from the uniform law on the region.
        """
        q = self.pp.dim
        N = len(sel)
        if N == 0:
            return np.empty((0, q))
        reg = self.pp.region
        coef = self.vectors[:, sel] * (math.sqrt(self.pp.w) / self.gammas[sel])
        if self._tab is not None:
            tab = self._tab[:, sel]
            env = float((tab ** 2).sum(1).max()) * 1.05

            def evalf(x):
                return self._interp(tab, x[:, 0])
        else:
            # the squared norm is largest where the grid values are; pad for
            # the interpolation between grid nodes
            gvals = self.vectors[:, sel] / math.sqrt(self.pp.w)
            env = float((gvals ** 2).sum(1).max()) * 1.5

            def evalf(x):
                return self.kernel_rows(x) @ coef
        basis = np.empty((0, N))
        out = []
        for _ in range(N):
            while True:
                x = reg.uniform(rng, batch)
                V = evalf(x)
                dens = (V ** 2).sum(1)
                if len(basis):
                    dens = dens - ((V @ basis.T) ** 2).sum(1)
                acc = np.nonzero(rng.random(batch) * env < dens)[0]
                if len(acc):
                    j = acc[0]
                    break
            out.append(x[j])
            v = V[j]
            if len(basis):
                v = v - basis.T @ (basis @ v)
            basis = np.vstack([basis, v / np.linalg.norm(v)])
        return np.asarray(out)


# ---------------------------------------------------------------------------
# Shot-noise Cox process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sncp:
    """Shot-noise Cox process: centers Lambda ~ PP(lam * base), and given the
    centers, a Poisson process with intensity gamma * sum_c k(x - c), where k
    is an isotropic Gaussian density with sd alpha_k.
    """

    gamma: float
    alpha_k: float
    lam: float = 1.0
    base: str = "gaussian"
    m0: tuple = (0.0,)
    s0: float = 1.0
    region: Optional[Region] = None

    def __post_init__(self):
        if self.gamma <= 0 or self.alpha_k <= 0 or self.lam <= 0:
            raise ValueError("gamma, alpha_k and lam must be positive")
        if self.base not in ("gaussian", "uniform"):
            raise ValueError("base must be 'gaussian' or 'uniform'")
        if self.base == "uniform" and self.region is None:
            raise ValueError("uniform base needs a region")
        object.__setattr__(self, "m0", tuple(float(v) for v in np.atleast_1d(self.m0)))
        if self.base == "gaussian" and self.s0 <= 0:
            raise ValueError("s0 must be positive")

    @property
    def dim(self) -> int:
        return self.region.dim if self.base == "uniform" else len(self.m0)

    @property
    def mean_count(self) -> float:
        return self.lam * self.gamma

    def sample_centers(self, rng, n: int, mass_scale: float = 1.0) -> np.ndarray:
        if self.base == "uniform":
            return self.region.uniform(rng, n)
        return np.asarray(self.m0) + self.s0 * rng.standard_normal((n, self.dim))

    def log_base_density(self, c) -> np.ndarray:
        c = as_points(c, self.dim)
        if self.base == "uniform":
            return np.where(self.region.contains(c), -math.log(self.region.volume), -np.inf)
        return stats.norm.logpdf(c, np.asarray(self.m0), self.s0).sum(1)

    def log_kernel(self, x, c) -> np.ndarray:
        """log k(x_i - c_j) as an (len(x), len(c)) matrix."""
        x, c = as_points(x, self.dim), as_points(c, self.dim)
        q = self.dim
        return -0.5 * _sqdist(x, c) / self.alpha_k ** 2 - q * (math.log(self.alpha_k) + 0.5 * math.log(2 * math.pi))

    def simulate_latent(self, rng):
        """Points, their center labels, and the centers."""
        nc = rng.poisson(self.lam)
        centers = self.sample_centers(rng, nc)
        counts = rng.poisson(self.gamma, size=nc)
        labels = np.repeat(np.arange(nc), counts)
        pts = centers[labels] + self.alpha_k * rng.standard_normal((len(labels), self.dim))
        return pts, labels, centers

    def simulate(self, rng) -> np.ndarray:
        return self.simulate_latent(rng)[0]

    def log_eta(self, pts) -> float:
        """log of lam * int prod_i k(x_i - v) base(dv)."""
        pts = as_points(pts, self.dim)
        c = len(pts)
        a2 = self.alpha_k ** 2
        ybar = pts.mean(0)
        S = ((pts - ybar) ** 2).sum(0)
        out = math.log(self.lam)
        out += np.sum(-0.5 * c * math.log(2 * math.pi * a2) - S / (2 * a2)
                      + 0.5 * math.log(2 * math.pi * a2 / c))
        sd = math.sqrt(a2 / c)
        if self.base == "gaussian":
            out += np.sum(stats.norm.logpdf(ybar, np.asarray(self.m0), math.sqrt(a2 / c + self.s0 ** 2)))
        else:
            lo, hi = self.region.lo, self.region.hi
            for d in range(self.dim):
                a, b = (lo[d] - ybar[d]) / sd, (hi[d] - ybar[d]) / sd
                out += _log_norm_interval(a, b) - math.log(hi[d] - lo[d])
        return float(out)

    def center_posterior(self, pts, rng, size=None):
        """Draw a center from base(v) prod_i k(x_i - v)."""
        pts = as_points(pts, self.dim)
        c = len(pts)
        a2 = self.alpha_k ** 2
        if c == 0:
            return self.sample_centers(rng, 1)[0]
        ybar = pts.mean(0)
        if self.base == "gaussian":
            prec = c / a2 + 1 / self.s0 ** 2
            mean = (c * ybar / a2 + np.asarray(self.m0) / self.s0 ** 2) / prec
            return mean + rng.standard_normal(self.dim) / math.sqrt(prec)
        sd = math.sqrt(a2 / c)
        lo, hi = self.region.lo, self.region.hi
        return stats.truncnorm.rvs((lo - ybar) / sd, (hi - ybar) / sd, loc=ybar, scale=sd,
                                   random_state=rng)

    def log_eta_subsets(self, pts) -> np.ndarray:
        """log_eta of every nonempty subset of pts, indexed by bitmask (entry 0 is -inf)."""
        pts = as_points(pts, self.dim)
        k = len(pts)
        masks = np.arange(1 << k)
        M = ((masks[:, None] >> np.arange(k)[None, :]) & 1).astype(float)
        c = M.sum(1)
        out = np.full(1 << k, -np.inf)
        if k == 0:
            return out
        c1 = c[1:]
        a2 = self.alpha_k ** 2
        sums = M[1:] @ pts
        ybar = sums / c1[:, None]
        S = (M[1:] @ pts ** 2).sum(1) - (c1[:, None] * ybar ** 2).sum(1)
        val = (math.log(self.lam) + self.dim * (-0.5 * c1 * math.log(2 * math.pi * a2)
                                                 + 0.5 * np.log(2 * math.pi * a2 / c1))
               - S / (2 * a2))
        if self.base == "gaussian":
            var = a2 / c1 + self.s0 ** 2
            d2 = ((ybar - np.asarray(self.m0)) ** 2).sum(1)
            val += -0.5 * self.dim * np.log(2 * math.pi * var) - 0.5 * d2 / var
        else:
            sd = np.sqrt(a2 / c1)
            lo, hi = self.region.lo, self.region.hi
            for d in range(self.dim):
                a = (lo[d] - ybar[:, d]) / sd
                b = (hi[d] - ybar[:, d]) / sd
                flip = a > 0
                a2_, b2_ = np.where(flip, -b, a), np.where(flip, -a, b)
                lb, la = log_ndtr(b2_), log_ndtr(a2_)
                val += lb + np.log1p(-np.exp(la - lb)) - math.log(hi[d] - lo[d])
        out[1:] = val
        return out

    def _block_logw(self, pts):
        pts = as_points(pts, self.dim)
        k = len(pts)
        counts = np.array([bin(m).count("1") for m in range(1 << k)])
        return counts * math.log(self.gamma) + self.log_eta_subsets(pts)

    def log_moment_density(self, pts, log_block_tilt: float = 0.0) -> float:
        """log of gamma^k sum over set partitions of prod_blocks eta(x_block),
        optionally with an extra factor exp(log_block_tilt) per block.
        """
        pts = as_points(pts, self.dim)
        k = len(pts)
        if k > SNCP_MAX_K:
            raise ValueError(f"SNCP moment density limited to k <= {SNCP_MAX_K}")
        _check_distinct(pts)
        if k == 0:
            return 0.0
        logw = self._block_logw(pts) + log_block_tilt
        return float(_partition_logsum(logw, k))

    def log_tilted_joint(self, pts, log_psi: float) -> float:
        t = self.gamma * math.expm1(log_psi)
        base = self.lam * math.expm1(t)
        return self.log_moment_density(pts, log_block_tilt=t) + base

    def reduced_palm(self, anchors) -> "PalmSncp":
        return PalmSncp(self, as_points(anchors, self.dim))


def _log_norm_interval(a, b) -> float:
    # log(Phi(b) - Phi(a)) for a < b
    if a > 0:
        a, b = -b, -a
    lb, la = log_ndtr(b), log_ndtr(a)
    return float(lb + np.log1p(-np.exp(la - lb)))


def _partition_table(logw: np.ndarray, k: int) -> np.ndarray:
    """F[S] = log sum over set partitions of the subset S of prod exp(logw[block])."""
    full = (1 << k) - 1
    F = np.full(1 << k, -np.inf)
    F[0] = 0.0
    for S in range(1, full + 1):
        low = S & -S
        rest = S ^ low
        subs = [rest]
        sub = rest
        while sub:
            sub = (sub - 1) & rest
            subs.append(sub)
        blk = np.array(subs) | low
        F[S] = logsumexp(logw[blk] + F[S ^ blk])
    return F


def _partition_logsum(logw: np.ndarray, k: int) -> float:
    """log sum over set partitions of {0..k-1} of prod exp(logw[block mask])."""
    return float(_partition_table(logw, k)[(1 << k) - 1])


@dataclass
class PalmSncp:
    """Reduced Palm SNCP: a fresh copy of the process plus one extra Poisson
    cluster per block of a random set partition of the anchors, with partition
    weights proportional to prod_blocks eta(anchor block).
    """

    pp: Sncp
    anchors: np.ndarray
    partitions: list = field(init=False)
    log_weights: np.ndarray = field(init=False)

    def __post_init__(self):
        k = len(self.anchors)
        if k > 10:
            raise ValueError("explicit SNCP Palm decomposition limited to 10 anchors")
        self.partitions = list(set_partitions(range(k)))
        lw = np.array([sum(self.pp.log_eta(self.anchors[b]) for b in part)
                       for part in self.partitions])
        self.log_weights = lw - logsumexp(lw) if len(lw) else lw

    def components(self, partition_index: int) -> list:
        """Blocks of anchors that each receive their own offspring cluster."""
        return [self.anchors[b] for b in self.partitions[partition_index]]

    def log_tilted_laplace(self, u: float, jm: JumpModel):
        psi = float(jm.psi(u))
        t = self.pp.gamma * (psi - 1.0)
        nblocks = np.array([len(p) for p in self.partitions])
        return float(self.pp.lam * math.expm1(t) + logsumexp(self.log_weights + nblocks * t)), 0.0

    def count_pmf(self, r_max: int) -> np.ndarray:
        return sncp_palm_count_pmf(self.pp, [len(p) for p in self.partitions],
                                   np.exp(self.log_weights), r_max)

    def simulate(self, u: float, jm: JumpModel, rng, init=None) -> np.ndarray:
        psi = float(jm.psi(u))
        pp = self.pp
        p = np.exp(self.log_weights)
        part = self.partitions[rng.choice(len(p), p=p / p.sum())]
        thin = math.exp(pp.gamma * (psi - 1.0))
        nc = rng.poisson(pp.lam * thin)
        centers = [pp.sample_centers(rng, nc)]
        for b in part:
            centers.append(pp.center_posterior(self.anchors[b], rng)[None, :])
        centers = np.vstack(centers) if centers else np.empty((0, pp.dim))
        counts = rng.poisson(pp.gamma * psi, size=len(centers))
        labels = np.repeat(np.arange(len(centers)), counts)
        return centers[labels] + pp.alpha_k * rng.standard_normal((len(labels), pp.dim))


def sncp_count_pmf(pp: Sncp, extra_clusters: int, r_max: int, tail: float = 1e-14) -> np.ndarray:
    """pmf of N_SNCP + Poisson(extra_clusters * gamma), N_SNCP compound Poisson."""
    r = np.arange(r_max + 1)
    lmax = int(stats.poisson.ppf(1 - tail, pp.lam)) + 5
    ls = np.arange(lmax + 1)
    wl = stats.poisson.pmf(ls, pp.lam)
    rates = (ls + extra_clusters) * pp.gamma
    with np.errstate(divide="ignore"):
        pm = np.where(rates[:, None] > 0, stats.poisson.pmf(r[None, :], np.maximum(rates[:, None], 1e-300)),
                      (r[None, :] == 0).astype(float))
    return wl @ pm


def sncp_palm_count_pmf(pp: Sncp, nblocks, weights, r_max: int) -> np.ndarray:
    out = np.zeros(r_max + 1)
    for j, w in zip(nblocks, weights):
        out += w * sncp_count_pmf(pp, j, r_max)
    return out


# ---------------------------------------------------------------------------
# module-level dispatch in the vocabulary of the docs
# ---------------------------------------------------------------------------


def simulate(pp, rng) -> np.ndarray:
    return pp.simulate(rng)


def log_papangelou(pp, nu, xs) -> float:
    if isinstance(pp, (Poisson, Strauss, Dpp)):
        return pp.log_papangelou(nu, xs)
    raise TypeError("Papangelou intensity is implemented for Poisson, Strauss and DPP processes")


def log_moment_density(pp, pts, **kw):
    return pp.log_moment_density(pts, **kw)


def reduced_palm(pp, anchors):
    return pp.reduced_palm(anchors)


def log_tilted_laplace(pp, anchors, u: float, jm: JumpModel, mc_samples: Optional[int] = None,
                       rng=None):
    """log E[psi(u)^N] for the reduced Palm process at the anchors, with
    a standard error (zero for the analytic families).
    """
    if u < 0:
        raise ValueError("u must be non-negative")
    palm = pp.reduced_palm(anchors)
    if isinstance(pp, Strauss):
        return palm.log_tilted_laplace(u, jm, rng=rng, mc_samples=mc_samples)
    return palm.log_tilted_laplace(u, jm)
