"""Normalized random measures: sampling, prior moments and distinct-value laws."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp, stirling2

from . import pointproc as ppm
from .jumps import JumpModel
from .mixture import InvGamma
from .pointproc import Dpp, Poisson, Region, Sncp, Strauss, as_points
from .specfun import bell, gfc, integrate_halfline

__all__ = [
    "DiscreteMeasure",
    "sample_nrm",
    "prior_moments",
    "joint_kn_law",
    "sncp_kn_pmf",
    "log_gamma_ratio_series",
]


@dataclass
class DiscreteMeasure:
    """Atoms (location, variance mark, jump) of an unnormalized measure."""

    locations: np.ndarray
    variances: np.ndarray
    jumps: np.ndarray

    def __post_init__(self):
        self.jumps = np.asarray(self.jumps, float)
        self.variances = np.asarray(self.variances, float)
        loc = np.asarray(self.locations, float)
        if loc.ndim != 2:
            loc = loc.reshape(len(self.jumps), -1) if loc.size else loc.reshape(len(self.jumps), 1)
        self.locations = loc

    @property
    def total_mass(self) -> float:
        return float(self.jumps.sum())

    @property
    def n_atoms(self) -> int:
        return len(self.jumps)

    def weights(self) -> np.ndarray:
        """Normalized jumps; the zero vector for the empty measure."""
        T = self.total_mass
        return self.jumps / T if T > 0 else np.zeros_like(self.jumps)

    def mass_of(self, region: Region) -> float:
        if self.n_atoms == 0:
            return 0.0
        return float(self.jumps[region.contains(self.locations)].sum())


def sample_nrm(pp, jm: JumpModel, variance_prior: InvGamma, rng) -> DiscreteMeasure:
    x = pp.simulate(rng)
    m = len(x)
    return DiscreteMeasure(x, variance_prior.sample(rng, m), jm.sample(0.0, 0, rng, size=m))


# ---------------------------------------------------------------------------
# prior moments
# ---------------------------------------------------------------------------


def _gl_nodes(box: Region, n: int):
    """Tensor Gauss-Legendre nodes and weights on a box."""
    t, w = np.polynomial.legendre.leggauss(n)
    axes, wts = [], []
    for lo, hi in zip(box.lower, box.upper):
        axes.append(0.5 * (hi - lo) * t + 0.5 * (hi + lo))
        wts.append(0.5 * (hi - lo) * w)
    X = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], 1)
    W = np.prod(np.stack([g.ravel() for g in np.meshgrid(*wts, indexing="ij")], 1), 1)
    return X, W


def _support(pp) -> Optional[Region]:
    return getattr(pp, "region", None)


def _clip_box(A: Region, pp) -> Optional[Region]:
    R = _support(pp)
    return A if R is None else A.intersect(R)


def _first_moment(pp, A: Region, n_nodes: int) -> float:
    if isinstance(pp, Poisson):
        sub = A.intersect(pp.region)
        return 0.0 if sub is None else pp.rate * sub.volume
    sub = _clip_box(A, pp)
    if sub is None:
        return 0.0
    X, W = _gl_nodes(sub, n_nodes)
    return float(W @ np.exp([pp.log_moment_density(x[None, :]) for x in X]))


def _second_factorial(pp, A: Region, B: Region, n_nodes: int) -> float:
    """Integral over A x B of the second factorial moment density."""
    if isinstance(pp, Poisson):
        return _first_moment(pp, A, n_nodes) * _first_moment(pp, B, n_nodes)
    a, b = _clip_box(A, pp), _clip_box(B, pp)
    if a is None or b is None:
        return 0.0
    Xa, Wa = _gl_nodes(a, n_nodes)
    Xb, Wb = _gl_nodes(b, n_nodes)
    if isinstance(pp, Dpp):
        Ka = np.array([pp.K(x[None], x[None])[0, 0] for x in Xa])
        Kb = np.array([pp.K(x[None], x[None])[0, 0] for x in Xb])
        Kab = pp.K(Xa, Xb)
        return float(Wa @ (np.outer(Ka, Kb) - Kab ** 2) @ Wb)
    vals = np.empty((len(Xa), len(Xb)))
    for i, x in enumerate(Xa):
        for j, y in enumerate(Xb):
            vals[i, j] = math.exp(pp.log_moment_density(np.vstack([x, y]))) if np.any(x != y) else 0.0
    return float(Wa @ vals @ Wb)


def _mean_p(pp, jm: JumpModel, A: Region, n_nodes: int, rel_tol: float) -> float:
    """E[p(A)] = int du int_A kappa(u,1) E[exp(-u mu^!_x(X))] M(dx)."""
    if isinstance(pp, Poisson):
        frac = _first_moment(pp, A, n_nodes)
        w = pp.mean_count

        def f(u):
            return float(jm.kappa(u, 1)) * frac * math.exp(w * (float(jm.psi(u)) - 1.0))
        return integrate_halfline(f, rel_tol)
    sub = _clip_box(A, pp)
    if sub is None:
        return 0.0
    X, W = _gl_nodes(sub, n_nodes)
    if isinstance(pp, Dpp):
        # first moment density and untilted Palm eigenvalues at each node
        dens = np.array([math.exp(pp.log_moment_density(x[None])) for x in X])
        lams = [pp.reduced_palm(x[None]).eigenvalues() for x in X]

        def inner(u):
            psi = float(jm.psi(u))
            e = np.array([np.exp(np.log1p(-l * (1 - psi)).sum()) for l in lams])
            return float(W @ (dens * e))
    elif isinstance(pp, Sncp):
        def inner(u):
            lp = float(jm.log_psi(u))
            return float(W @ np.exp([pp.log_tilted_joint(x[None], lp) for x in X]))
    else:
        rng = np.random.default_rng(12345)
        dens = np.exp([pp.log_moment_density(x[None], rng=np.random.default_rng(7)) for x in X])
        palms = [pp.reduced_palm(x[None]) for x in X]

        def inner(u):
            e = np.exp([p.log_tilted_laplace(u, jm, rng=np.random.default_rng(11))[0] for p in palms])
            return float(W @ (dens * e))
    return integrate_halfline(lambda u: float(jm.kappa(u, 1)) * inner(u), rel_tol)


def prior_moments(pp, jm: JumpModel, A: Region, B: Region, n_nodes: int = 24,
                  rel_tol: float = 1e-10) -> dict:
    """Mean and covariance of mu(A), mu(B) and the mean of p(A).

    Cov(mu(A), mu(B)) = M(A n B) E[S^2] + (M2(A x B) - M(A) M(B)) E[S]^2,
    with M2 the second factorial moment measure.
    """
    R = _support(pp)
    if R is not None and not (A.is_subset_of(R) and B.is_subset_of(R)):
        raise ValueError("A and B must lie inside the region of the process")
    mA = _first_moment(pp, A, n_nodes)
    mB = _first_moment(pp, B, n_nodes)
    AB = A.intersect(B)
    mAB = 0.0 if AB is None else _first_moment(pp, AB, n_nodes)
    m2 = _second_factorial(pp, A, B, n_nodes)
    cov = mAB * jm.second_moment + (m2 - mA * mB) * jm.mean ** 2
    return {
        "mean_mu_A": mA * jm.mean,
        "mean_mu_B": mB * jm.mean,
        "cov_mu_AB": cov,
        "mean_p_A": _mean_p(pp, jm, A, n_nodes, rel_tol),
    }


# ---------------------------------------------------------------------------
# distinct-value laws
# ---------------------------------------------------------------------------


def log_gamma_ratio_series(k: int, n: int, alpha: float, r_max: int) -> np.ndarray:
    """log Gamma((k+r) alpha) - log Gamma((k+r) alpha + n) for r = 0..r_max."""
    x = (k + np.arange(r_max + 1)) * alpha
    return gammaln(x) - gammaln(x + n)


def _log_gfc_weight(n: int, k: int, alpha: float) -> float:
    """log of (-1)^n C(n, k; -alpha), which is positive for alpha > 0."""
    c = gfc(n, k, -alpha)
    sgn = c.sign * (-1) ** n
    if sgn <= 0:
        raise ArithmeticError(f"(-1)^n C(n,k;-alpha) not positive for n={n}, k={k}")
    return c.log_magnitude


def _series(qr: np.ndarray, k: int, n: int, alpha: float, tol: float):
    r_max = len(qr) - 1
    lg = log_gamma_ratio_series(k, n, alpha, r_max + 1)
    with np.errstate(divide="ignore"):
        terms = np.log(np.clip(qr, 0, None)) + lg[:-1]
    partial = logsumexp(terms)
    tail_mass = max(0.0, 1.0 - float(np.sum(qr)))
    tail = tail_mass * math.exp(lg[-1] - partial)
    if tail > tol:
        raise ArithmeticError(f"series truncation tail {tail:.2e} exceeds {tol:.0e}; widen r_max")
    return partial, tail


def joint_kn_law(pp, jm: JumpModel, n: int, anchors, r_max: int = 200,
                 tol: float = 1e-8, return_tail: bool = False, **palm_kw):
    """Joint density of (K_n = k, Y* = anchors) under Gamma jumps:

        (-1)^n C(n,k;-alpha) sum_r q_r Gamma((k+r) alpha) / Gamma((k+r) alpha + n) m_k(anchors)

    with q_r the count law of the reduced Palm process at the anchors. The
    expression does not depend on the Gamma rate.
    """
    anchors = as_points(anchors, pp.dim)
    k = len(anchors)
    if not 1 <= k <= n:
        raise ValueError("need 1 <= number of anchors <= n")
    lm = pp.log_moment_density(anchors)
    if lm == -math.inf:
        return (0.0, 0.0) if return_tail else 0.0
    qr = pp.reduced_palm(anchors).count_pmf(r_max, **palm_kw)
    ls, tail = _series(qr, k, n, jm.shape, tol)
    val = math.exp(_log_gfc_weight(n, k, jm.shape) + ls + lm)
    return (val, tail) if return_tail else val


def sncp_kn_pmf(sncp: Sncp, jm: JumpModel, n: int, r_max: int = 200, form: str = "exact",
                tol: float = 1e-8):
    """Prior law of the number of distinct values K_n under an SNCP.

    form="exact" couples the Palm count with the set partition of the
    anchors into shared centers; form="bell" uses independent clusters for
    every anchor with a Bell-number multiplicity. Both carry the (-1)^n sign.

    Returns (pmf over k = 1..n, normalizing constant before renormalization).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if form not in ("exact", "bell"):
        raise ValueError("form must be 'exact' or 'bell'")
    alpha = jm.shape
    logmass = np.full(n, -np.inf)
    for k in range(1, n + 1):
        lw = _log_gfc_weight(n, k, alpha) + k * math.log(sncp.gamma)
        if form == "exact":
            parts = []
            for j in range(1, k + 1):
                qr = ppm.sncp_count_pmf(sncp, j, r_max)
                ls, _ = _series(qr, k, n, alpha, tol)
                parts.append(math.log(stirling2(k, j, exact=True)) + j * math.log(sncp.lam) + ls)
            logmass[k - 1] = lw + logsumexp(parts)
        else:
            qr = ppm.sncp_count_pmf(sncp, k, r_max)
            ls, _ = _series(qr, k, n, alpha, tol)
            logmass[k - 1] = lw + math.log(bell(k)) + k * math.log(sncp.lam) + ls
    mass = np.exp(logmass)
    if np.any(mass < 0) or not np.all(np.isfinite(mass)):
        raise ArithmeticError("negative or non-finite mass in K_n law")
    const = float(mass.sum())
    return mass / const, const
