"""MCMC for Gaussian mixtures driven by normalized random measures.

conditional_step keeps the whole measure (active and non-active atoms) in the
state, marginal_step integrates it out and moves allocations with auxiliary
tables, sncp_conditional_step additionally carries the latent centers of a
shot-noise Cox prior.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .jumps import JumpModel
from .mixture import InvGamma, log_kernel_matrix
from .nrm import DiscreteMeasure
from .pointproc import Dpp, Poisson, Sncp, Strauss, as_points, _partition_table, _sqdist

__all__ = [
    "ChainConfig",
    "MixtureState",
    "Trace",
    "conditional_step",
    "marginal_step",
    "sncp_conditional_step",
    "sample_nonactive",
    "predictive_weights",
    "init_state",
    "run_chain",
    "log_papangelou_any",
]


@dataclass
class ChainConfig:
    n_iter: int = 2000
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    algorithm: str = "conditional"
    neal_L: int = 3
    mh_step: float = 0.5
    u_step: float = 0.7
    gibbs_bd_steps: int = 100
    mh_repeats: int = 2
    store_measures: bool = True
    sncp_scheme: str = "grouped"
    flat_likelihood: bool = False
    check_invariants: bool = False

    def __post_init__(self):
        if not self.n_iter > self.burn_in >= 0:
            raise ValueError("need n_iter > burn_in >= 0")
        if self.neal_L < 1 or self.thin < 1:
            raise ValueError("neal_L and thin must be at least 1")
        if self.algorithm not in ("conditional", "marginal"):
            raise ValueError("algorithm must be 'conditional' or 'marginal'")
        if self.sncp_scheme not in ("grouped", "per_atom"):
            raise ValueError("sncp_scheme must be 'grouped' or 'per_atom'")


@dataclass
class MixtureState:
    """Allocations index atoms; the first k atoms are the active ones.

    For the marginal sampler the atoms are the distinct values only and
    `jumps` is None.
    """

    alloc: np.ndarray
    locs: np.ndarray
    variances: np.ndarray
    jumps: Optional[np.ndarray]
    u: float
    centers: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return int(self.alloc.max()) + 1 if len(self.alloc) else 0

    @property
    def n_atoms(self) -> int:
        return len(self.variances)

    @property
    def total_mass(self) -> float:
        return float(self.jumps.sum()) if self.jumps is not None else float("nan")

    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.locs, self.variances, self.jumps)

    def copy(self) -> "MixtureState":
        cp = lambda a: None if a is None else np.array(a, copy=True)
        return MixtureState(cp(self.alloc), cp(self.locs), cp(self.variances), cp(self.jumps),
                            float(self.u), cp(self.centers), cp(self.labels))

    def check(self, n: int):
        k = self.k
        assert len(self.alloc) == n
        counts = np.bincount(self.alloc, minlength=k)
        assert np.all(counts[:k] >= 1), "active atom without observations"
        assert self.alloc.max() < self.n_atoms
        assert self.u > 0
        if self.jumps is not None:
            assert self.total_mass > 0 and np.all(self.jumps > 0)
        if self.labels is not None:
            assert len(self.labels) == self.n_atoms and np.all(self.labels < len(self.centers))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _lse(a, axis=None):
    """log-sum-exp without the input validation overhead of scipy's version."""
    a = np.asarray(a, float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.item() if axis is None else np.squeeze(out, axis=axis)


def _loglik(z, locs, variances, flat: bool):
    if flat:
        return np.zeros((len(z), len(variances)))
    return log_kernel_matrix(z, locs, variances)


def _categorical_rows(logp, rng):
    """One categorical draw per row of unnormalized log-probabilities."""
    g = rng.gumbel(size=logp.shape)
    return np.argmax(logp + g, axis=1)


def _relabel(alloc, m_atoms):
    """Order of atoms with active ones first (by first appearance) and the new allocation."""
    _, first = np.unique(alloc, return_index=True)
    active = alloc[np.sort(first)]
    mask = np.ones(m_atoms, bool)
    mask[active] = False
    order = np.concatenate([active, np.nonzero(mask)[0]])
    inv = np.empty(m_atoms, int)
    inv[order] = np.arange(m_atoms)
    return order, inv[alloc], len(active)


def _update_variances(z, alloc, locs, k, vprior: InvGamma, rng, flat: bool):
    q = z.shape[1]
    if flat:
        return vprior.sample(rng, k)
    resid = ((z - locs[alloc]) ** 2).sum(1)
    ss = np.bincount(alloc, weights=resid, minlength=k)[:k]
    cnt = np.bincount(alloc, minlength=k)[:k]
    a = vprior.a + 0.5 * q * cnt
    b = vprior.b + 0.5 * ss
    return b / rng.gamma(a, 1.0)


def log_papangelou_any(pp, x, others) -> float:
    """log of the conditional intensity of adding x to `others`."""
    if isinstance(pp, (Poisson, Strauss, Dpp)):
        return pp.log_papangelou(x, others)
    raise TypeError(f"no conditional intensity for {type(pp).__name__}")


# ---------------------------------------------------------------------------
# conditional sampler
# ---------------------------------------------------------------------------


def sample_nonactive(pp, palm, u: float, jm: JumpModel, vprior: InvGamma, rng, init=None,
                     bd_steps: Optional[int] = None):
    """Non-active atoms from the tilted reduced Palm law, with tilted jumps and prior variances."""
    if isinstance(pp, Strauss):
        x = palm.simulate(u, jm, rng, init=init, n_steps=bd_steps)
    else:
        x = palm.simulate(u, jm, rng)
    m = len(x)
    return as_points(x, pp.dim).reshape(m, pp.dim), vprior.sample(rng, m), jm.sample(u, 0, rng, size=m)


def _mh_active_atoms(z, alloc, locs, variances, k, pp, rng, step, repeats, flat):
    """Random-walk Metropolis on each coordinate of the active atoms."""
    q = z.shape[1]
    if isinstance(pp, Poisson):
        # conditionally independent across atoms: vectorize
        for _ in range(repeats):
            for d in range(q):
                prop = locs[:k].copy()
                prop[:, d] += step * rng.standard_normal(k)
                inside = pp.region.contains(prop)
                if flat:
                    delta = np.zeros(k)
                else:
                    v = variances[alloc]
                    cur = -0.5 * ((z - locs[alloc]) ** 2).sum(1) / v
                    new = -0.5 * ((z - prop[alloc]) ** 2).sum(1) / v
                    delta = np.bincount(alloc, weights=new - cur, minlength=k)[:k]
                acc = inside & (np.log(rng.random(k)) < delta)
                locs[:k][acc] = prop[acc]
        return locs
    members = [np.nonzero(alloc == h)[0] for h in range(k)]
    M = len(locs)
    for _ in range(repeats):
        for h in range(k):
            idx = members[h]
            others = np.delete(locs, h, axis=0)
            for d in range(q):
                x = locs[h].copy()
                y = x.copy()
                y[d] += step * rng.standard_normal()
                lp_new = log_papangelou_any(pp, y[None], others)
                if lp_new == -math.inf:
                    continue
                lp_old = log_papangelou_any(pp, x[None], others)
                if not flat:
                    zi = z[idx]
                    lp_new += -0.5 * ((zi - y) ** 2).sum() / variances[h]
                    lp_old += -0.5 * ((zi - x) ** 2).sum() / variances[h]
                if math.log(rng.random()) < lp_new - lp_old:
                    locs[h] = y
    return locs


def conditional_step(state: MixtureState, z, pp, jm: JumpModel, vprior: InvGamma, rng,
                     cfg: Optional[ChainConfig] = None) -> MixtureState:
    """One sweep: u | T, allocations, non-active part and active jumps,
    active atoms, variances, relabel."""
    if isinstance(pp, Sncp):
        return sncp_conditional_step(state, z, pp, jm, vprior, rng, cfg)
    cfg = cfg or ChainConfig()
    n = len(z)
    s = state
    # 1. auxiliary u
    u = rng.gamma(n, 1.0 / s.total_mass)
    # 2. allocations
    logp = np.log(s.jumps)[None, :] + _loglik(z, s.locs, s.variances, cfg.flat_likelihood)
    alloc = _categorical_rows(logp, rng)
    order, alloc, k = _relabel(alloc, len(s.jumps))
    locs, variances = s.locs[order], s.variances[order]
    counts = np.bincount(alloc, minlength=k)
    # 3. active jumps and the non-active part of the measure
    act_locs, act_var = locs[:k].copy(), variances[:k].copy()
    act_jumps = jm.sample(u, counts, rng)
    palm = pp.reduced_palm(act_locs)
    x_na, w_na, s_na = sample_nonactive(pp, palm, u, jm, vprior, rng, init=locs[k:],
                                        bd_steps=cfg.gibbs_bd_steps)
    locs = np.vstack([act_locs, x_na])
    variances = np.concatenate([act_var, w_na])
    jumps = np.concatenate([act_jumps, s_na])
    # 4. active atoms
    locs = _mh_active_atoms(z, alloc, locs, variances, k, pp, rng, cfg.mh_step,
                            cfg.mh_repeats, cfg.flat_likelihood)
    # 5. variances of the active atoms
    variances[:k] = _update_variances(z, alloc, locs, k, vprior, rng, cfg.flat_likelihood)
    out = MixtureState(alloc, locs, variances, jumps, u)
    if cfg.check_invariants:
        out.check(n)
    return out


# ---------------------------------------------------------------------------
# shot-noise Cox conditional sampler
# ---------------------------------------------------------------------------


def _sncp_offspring(pp: Sncp, centers, rate, rng):
    counts = rng.poisson(rate, size=len(centers))
    labels = np.repeat(np.arange(len(centers)), counts)
    pts = centers[labels] + pp.alpha_k * rng.standard_normal((len(labels), pp.dim))
    return pts, labels


def sncp_conditional_step(state: MixtureState, z, pp: Sncp, jm: JumpModel, vprior: InvGamma, rng,
                          cfg: Optional[ChainConfig] = None) -> MixtureState:
    """One sweep of the conditional sampler with latent centers.

    The state carries the centers and a center label for every atom, so that
    given the centers the atoms of each center form independent Poisson
    clusters. Non-active atoms are regenerated around every center at rate
    gamma psi(u), active atoms have Gaussian full conditionals, labels are
    drawn proportionally to the kernel, occupied centers from their Gaussian
    posterior and empty centers from a Poisson process with intensity
    exp(-gamma) lam base.
    """
    cfg = cfg or ChainConfig()
    n, q = z.shape
    s = state
    flat = cfg.flat_likelihood
    u = rng.gamma(n, 1.0 / s.total_mass)
    psi = float(jm.psi(u))
    logp = np.log(s.jumps)[None, :] + _loglik(z, s.locs, s.variances, flat)
    alloc = _categorical_rows(logp, rng)
    order, alloc, k = _relabel(alloc, len(s.jumps))
    locs, variances, labels = s.locs[order][:k], s.variances[order][:k], s.labels[order][:k]
    centers = s.centers
    counts = np.bincount(alloc, minlength=k)
    # active jumps, locations (Gaussian prior around their center) and variances
    jumps = jm.sample(u, counts, rng)
    a2 = pp.alpha_k ** 2
    if flat:
        locs = centers[labels] + pp.alpha_k * rng.standard_normal((k, q))
    else:
        zsum = np.zeros((k, q))
        np.add.at(zsum, alloc, z)
        prec = counts / variances + 1.0 / a2
        mean = (zsum / variances[:, None] + centers[labels] / a2) / prec[:, None]
        locs = mean + rng.standard_normal((k, q)) / np.sqrt(prec)[:, None]
    variances = _update_variances(z, alloc, locs, k, vprior, rng, flat)

    if cfg.sncp_scheme == "per_atom":
        centers, labels, x_na, l_na = _sncp_nonactive_per_atom(pp, locs, psi, rng)
    else:
        # keep only centers that carry active atoms; the others are redrawn below
        used = np.unique(labels)
        remap = -np.ones(len(centers), int)
        remap[used] = np.arange(len(used))
        centers, labels = centers[used], remap[labels]
        x_na, l_na = _sncp_offspring(pp, centers, pp.gamma * psi, rng)
        # centers without active atoms: Poisson(lam e^{-gamma(1-psi)}), clusters at rate gamma psi
        n0 = rng.poisson(pp.lam * math.exp(-pp.gamma * (1.0 - psi)))
        c0 = pp.sample_centers(rng, n0)
        x0, l0 = _sncp_offspring(pp, c0, pp.gamma * psi, rng)
        x_na = np.vstack([x_na, x0])
        l_na = np.concatenate([l_na, l0 + len(centers)])
        centers = np.vstack([centers, c0])
    m_na = len(x_na)
    all_locs = np.vstack([locs, x_na])
    all_var = np.concatenate([variances, vprior.sample(rng, m_na)])
    all_jumps = np.concatenate([jumps, jm.sample(u, 0, rng, size=m_na)])
    all_labels = np.concatenate([labels, l_na]).astype(int)

    # center labels of every atom
    if len(centers):
        lk = pp.log_kernel(all_locs, centers)
        all_labels = _categorical_rows(lk, rng)
    # occupied centers from their posterior, empty ones redrawn
    occ = np.unique(all_labels)
    new_c = np.empty((len(occ), q))
    for j, c in enumerate(occ):
        new_c[j] = pp.center_posterior(all_locs[all_labels == c], rng)
    remap = -np.ones(len(centers), int)
    remap[occ] = np.arange(len(occ))
    all_labels = remap[all_labels]
    n_empty = rng.poisson(pp.lam * math.exp(-pp.gamma))
    centers = np.vstack([new_c, pp.sample_centers(rng, n_empty)])
    out = MixtureState(alloc, all_locs, all_var, all_jumps, u, centers, all_labels)
    if cfg.check_invariants:
        out.check(n)
    return out


def _sncp_nonactive_per_atom(pp: Sncp, act_locs, psi, rng):
    """Regeneration with one fresh center per active atom."""
    k, q = act_locs.shape
    zeta = np.array([pp.center_posterior(act_locs[h][None], rng) for h in range(k)]).reshape(k, q)
    rate = pp.gamma * psi
    x1, l1 = _sncp_offspring(pp, zeta, rate, rng)
    n0 = rng.poisson(pp.lam * math.exp(-pp.gamma * (1.0 - psi)))
    c0 = pp.sample_centers(rng, n0)
    x0, l0 = _sncp_offspring(pp, c0, rate, rng)
    centers = np.vstack([zeta, c0])
    return centers, np.arange(k), np.vstack([x1, x0]), np.concatenate([l1, l0 + k])


# ---------------------------------------------------------------------------
# marginal sampler
# ---------------------------------------------------------------------------


class _Terms:
    """log D_k(Y; psi) = log m_k(Y) + log E[psi^N] for the reduced Palm
    process at Y, and the new-table ratios D_{k+1}(Y, y) / D_k(Y).
    """

    def __init__(self, pp, rng):
        self.pp = pp

    def refresh(self, rng):
        pass

    def log_joint(self, Y, log_psi):
        return self.pp.log_tilted_joint(Y, log_psi)

    def new_ratio(self, Y, ys, log_psi):
        base = self.log_joint(Y, log_psi)
        return np.array([self.log_joint(np.vstack([Y, y[None]]), log_psi) for y in ys]) - base

    def support(self, ys):
        return np.ones(len(ys), bool)


class _PoissonTerms(_Terms):
    def new_ratio(self, Y, ys, log_psi):
        return np.where(self.pp.region.contains(ys), math.log(self.pp.rate), -np.inf)


class _DppTerms(_Terms):
    def __init__(self, pp: Dpp, rng):
        super().__init__(pp, rng)
        self._key = None

    def _prep(self, Y, log_psi):
        key = (Y.tobytes(), log_psi)
        if key == self._key:
            return
        pp = self.pp
        self._key = key
        self.Y = Y
        self.Cp = pp.palm_grid_kernel(Y)
        psi = math.exp(log_psi)
        m = len(pp.grid)
        self.Minv = np.linalg.inv(np.eye(m) + psi * pp.w * self.Cp)
        if len(Y):
            self.CY_inv = np.linalg.inv(pp.C(Y, Y))

    def new_ratio(self, Y, ys, log_psi):
        """D_{k+1}/D_k = s(y) - psi w v^T (I + psi w C')^{-1} v with
        s(y) = C'(y, y), v = C'(grid, y)."""
        pp = self.pp
        self._prep(Y, log_psi)
        psi = math.exp(log_psi)
        v = pp.C(ys, pp.grid)
        sy = np.array([pp.C(y[None], y[None])[0, 0] for y in ys])
        if len(Y):
            cyY = pp.C(ys, Y)
            v = v - cyY @ self.CY_inv @ pp.C(Y, pp.grid)
            sy = sy - np.einsum("ij,jk,ik->i", cyY, self.CY_inv, cyY)
        r = sy - psi * pp.w * np.einsum("ij,jk,ik->i", v, self.Minv, v)
        inside = pp.region.contains(ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(inside & (r > 0), np.log(np.where(r > 0, r, 1.0)), -np.inf)
        return out


class _StraussTerms(_Terms):
    """Common-random-number estimates from one batch of Poisson(beta)
    configurations per sweep, tilted by independent thinning."""

    def __init__(self, pp: Strauss, rng, n_batch: int = 400):
        super().__init__(pp, rng)
        self.n_batch = n_batch
        self.refresh(rng)

    def refresh(self, rng):
        pp = self.pp
        counts = rng.poisson(pp.beta * pp.region.volume, size=self.n_batch)
        self.points = pp.region.uniform(rng, int(counts.sum()))
        self.owner = np.repeat(np.arange(self.n_batch), counts)
        self.thin_u = rng.random(len(self.owner))
        self._psi = None

    def _prep(self, psi):
        if psi == self._psi:
            return
        pp = self.pp
        self._psi = psi
        keep = self.thin_u < psi
        self.P, self.own = self.points[keep], self.owner[keep]
        close = np.triu(_sqdist(self.P, self.P) <= pp.radius ** 2, 1)
        same = self.own[:, None] == self.own[None, :]
        i, _ = np.nonzero(close & same)
        self.within = np.bincount(self.own[i], minlength=self.n_batch).astype(float)

    def _cross(self, Y):
        """(n_batch, len(Y)) counts of close pairs between batch configurations and each point of Y."""
        near = (_sqdist(self.P, Y) <= self.pp.radius ** 2).astype(float)
        out = np.zeros((self.n_batch, len(Y)))
        np.add.at(out, self.own, near)
        return out

    def _lg(self):
        return math.log(self.pp.gamma_s) if self.pp.gamma_s > 0 else -1e300

    def log_joint(self, Y, log_psi):
        pp = self.pp
        Y = as_points(Y, pp.dim)
        if not np.all(pp.region.contains(Y)):
            return -math.inf
        psi = math.exp(log_psi)
        self._prep(psi)
        s = self.within + self._cross(Y).sum(1)
        lh = logsumexp(s * self._lg()) - math.log(self.n_batch)
        return pp.log_g(Y) + pp.beta * pp.region.volume * (psi - 1.0) + lh

    def new_ratio(self, Y, ys, log_psi):
        pp = self.pp
        Y, ys = as_points(Y, pp.dim), as_points(ys, pp.dim)
        psi = math.exp(log_psi)
        self._prep(psi)
        lg = self._lg()
        s0 = self.within + (self._cross(Y).sum(1) if len(Y) else 0.0)
        base = logsumexp(s0 * lg)
        cy = self._cross(ys)
        lh = logsumexp((s0[:, None] + cy) * lg, axis=0) - base
        own = (_sqdist(ys, Y) <= pp.radius ** 2).sum(1) if len(Y) else np.zeros(len(ys))
        out = math.log(pp.beta) + own * lg + lh
        return np.where(pp.region.contains(ys), out, -np.inf)


class _SncpTerms(_Terms):
    """Caches the partition-sum table over subsets of Y so that adding a
    point costs one pass over the subsets."""

    def __init__(self, pp: Sncp, rng):
        super().__init__(pp, rng)
        self._key = None

    def new_ratio(self, Y, ys, log_psi):
        pp = self.pp
        Y, ys = as_points(Y, pp.dim), as_points(ys, pp.dim)
        k = len(Y)
        t = pp.gamma * math.expm1(log_psi)
        key = (Y.tobytes(), log_psi)
        if key != self._key:
            self._key = key
            self._F = _partition_table(pp._block_logw(Y) + t, k)
        F = self._F
        full = (1 << k) - 1
        masks = np.arange(1 << k)
        out = np.empty(len(ys))
        for j, y in enumerate(ys):
            # blocks containing the new point: B + {y} for every subset B of Y
            lw = pp._block_logw(np.vstack([Y, y[None]]))[masks | (1 << k)] + t
            out[j] = logsumexp(lw + F[full ^ masks]) - F[full]
        return out


def _terms_for(pp, rng):
    if isinstance(pp, Poisson):
        return _PoissonTerms(pp, rng)
    if isinstance(pp, Dpp):
        return _DppTerms(pp, rng)
    if isinstance(pp, Strauss):
        return _StraussTerms(pp, rng)
    if isinstance(pp, Sncp):
        return _SncpTerms(pp, rng)
    return _Terms(pp, rng)


class _Proposal:
    """Mixture of a broad law and Gaussians centered at the data, used to
    draw auxiliary table values; its density enters the weights."""

    def __init__(self, pp, z, sd):
        self.pp, self.z, self.sd = pp, z, sd
        self.q = z.shape[1]
        reg = getattr(pp, "region", None)
        if reg is not None:
            self.broad = ("uniform", reg)
        else:
            self.broad = ("normal", z.mean(0), 3.0 * z.std(0).max() + pp.alpha_k)

    def sample(self, rng, m):
        out = np.empty((m, self.q))
        pick = rng.random(m) < 0.5
        nb = int(pick.sum())
        if self.broad[0] == "uniform":
            out[pick] = self.broad[1].uniform(rng, nb)
        else:
            out[pick] = self.broad[1] + self.broad[2] * rng.standard_normal((nb, self.q))
        nd = m - nb
        idx = rng.integers(len(self.z), size=nd)
        out[~pick] = self.z[idx] + self.sd * rng.standard_normal((nd, self.q))
        return out

    def logpdf(self, ys):
        ys = as_points(ys, self.q)
        if self.broad[0] == "uniform":
            reg = self.broad[1]
            lb = np.where(reg.contains(ys), -math.log(reg.volume), -np.inf)
        else:
            mu, sd = self.broad[1], self.broad[2]
            lb = (-0.5 * ((ys - mu) ** 2).sum(1) / sd ** 2
                  - self.q * (math.log(sd) + 0.5 * math.log(2 * math.pi)))
        d2 = _sqdist(ys, self.z)
        ld = (_lse(-0.5 * d2 / self.sd ** 2, axis=1) - math.log(len(self.z))
              - self.q * (math.log(self.sd) + 0.5 * math.log(2 * math.pi)))
        return np.logaddexp(lb, ld) - math.log(2.0)


def _marginal_u_step(state, n, pp, jm, terms, rng, step):
    Y = state.locs
    counts = np.bincount(state.alloc, minlength=len(Y))

    def logt(lu):
        u = math.exp(lu)
        return (n * lu + terms.log_joint(Y, float(jm.log_psi(u)))
                + float(np.sum(jm.log_kappa(u, counts))))

    lu = math.log(state.u)
    cur = logt(lu)
    prop = lu + step * rng.standard_normal()
    new = logt(prop)
    if math.log(rng.random()) < new - cur:
        return math.exp(prop)
    return state.u


def predictive_weights(z_i, Y, V, counts, u, jm: JumpModel, terms, aux_y, aux_v, aux_logq,
                       flat: bool = False):
    """Unnormalized log weights of the existing tables followed by the L auxiliary ones."""
    L = len(aux_y)
    lw_old = np.log(jm.kappa_ratio(u, counts)) if len(counts) else np.empty(0)
    lw_new = (float(jm.log_kappa(u, 1)) - math.log(L)
              + terms.new_ratio(Y, aux_y, float(jm.log_psi(u))) - aux_logq)
    if not flat:
        zz = z_i[None, :]
        if len(Y):
            lw_old = lw_old + log_kernel_matrix(zz, Y, V)[0]
        lw_new = lw_new + log_kernel_matrix(zz, aux_y, aux_v)[0]
    return np.concatenate([lw_old, lw_new])


def marginal_step(state: MixtureState, z, pp, jm: JumpModel, vprior: InvGamma, rng,
                  cfg: Optional[ChainConfig] = None, terms=None, proposal=None) -> MixtureState:
    """One sweep: u by random-walk Metropolis on log u, allocations with L
    auxiliary tables, distinct values by random-walk Metropolis, variances."""
    cfg = cfg or ChainConfig(algorithm="marginal")
    n, q = z.shape
    flat = cfg.flat_likelihood
    terms = terms or _terms_for(pp, rng)
    terms.refresh(rng)
    proposal = proposal or _Proposal(pp, z, max(0.5 * float(z.std()), 1e-3))
    L = cfg.neal_L
    alloc = state.alloc.copy()
    Y, V = state.locs.copy(), state.variances.copy()
    u = _marginal_u_step(MixtureState(alloc, Y, V, None, state.u), n, pp, jm, terms, rng, cfg.u_step)
    for i in range(n):
        j = alloc[i]
        alloc[i] = -1
        counts = np.bincount(alloc[alloc >= 0], minlength=len(Y))
        aux_y = proposal.sample(rng, L)
        aux_v = vprior.sample(rng, L)
        if counts[j] == 0:
            # the vacated value takes one auxiliary slot
            aux_y[0], aux_v[0] = Y[j], V[j]
            Y, V = np.delete(Y, j, 0), np.delete(V, j)
            alloc[alloc > j] -= 1
            counts = np.delete(counts, j)
        aux_logq = proposal.logpdf(aux_y)
        lw = predictive_weights(z[i], Y, V, counts, u, jm, terms, aux_y, aux_v, aux_logq, flat)
        lw = lw - _lse(lw)
        c = rng.choice(len(lw), p=np.exp(lw))
        if c < len(Y):
            alloc[i] = c
        else:
            l = c - len(Y)
            Y = np.vstack([Y, aux_y[l][None]])
            V = np.append(V, aux_v[l])
            alloc[i] = len(Y) - 1
    order, alloc, k = _relabel(alloc, len(Y))
    Y, V = Y[order][:k], V[order][:k]
    # distinct values
    lpsi = float(jm.log_psi(u))
    cur_joint = terms.log_joint(Y, lpsi)
    for _ in range(cfg.mh_repeats):
        for h in range(k):
            idx = np.nonzero(alloc == h)[0]
            for d in range(q):
                y = Y[h].copy()
                y[d] += cfg.mh_step * rng.standard_normal()
                Yp = Y.copy()
                Yp[h] = y
                new_joint = terms.log_joint(Yp, lpsi)
                if new_joint == -math.inf:
                    continue
                dl = new_joint - cur_joint
                if not flat:
                    zi = z[idx]
                    dl += -0.5 * (((zi - y) ** 2).sum() - ((zi - Y[h]) ** 2).sum()) / V[h]
                if math.log(rng.random()) < dl:
                    Y, cur_joint = Yp, new_joint
    V = _update_variances(z, alloc, Y, k, vprior, rng, flat)
    out = MixtureState(alloc, Y, V, None, u)
    if cfg.check_invariants:
        out.check(n)
    return out


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    iterations: list = field(default_factory=list)
    kn: list = field(default_factory=list)
    alloc: list = field(default_factory=list)
    u: list = field(default_factory=list)
    total_mass: list = field(default_factory=list)
    n_atoms: list = field(default_factory=list)
    groups: list = field(default_factory=list)
    n_groups: list = field(default_factory=list)
    measures: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def is_sncp(self) -> bool:
        return len(self.groups) > 0

    def as_arrays(self) -> dict:
        out = {k: np.asarray(getattr(self, k)) for k in
               ("iterations", "kn", "alloc", "u", "total_mass", "n_atoms")}
        if self.is_sncp:
            out["groups"] = np.asarray(self.groups)
            out["n_groups"] = np.asarray(self.n_groups)
        return out

    def __len__(self):
        return len(self.kn)


def init_state(z, pp, jm: JumpModel, vprior: InvGamma, rng, algorithm: str = "conditional",
               n_init: Optional[int] = None) -> MixtureState:
    """Start from a few clusters formed by sorting the first coordinate."""
    n, q = z.shape
    k = n_init or min(n, 3)
    rank = np.argsort(np.argsort(z[:, 0]))
    alloc = (rank * k) // n
    locs = np.array([z[alloc == h].mean(0) for h in range(k)])
    reg = getattr(pp, "region", None)
    if reg is not None:
        locs = np.clip(locs, reg.lo + 1e-6, reg.hi - 1e-6)
        locs = locs + 1e-6 * np.arange(k)[:, None]
    var = np.full(k, max(float(z.var()), 1e-2))
    u = float(n)
    if algorithm == "marginal":
        return MixtureState(alloc, locs, var, None, 1.0)
    jumps = jm.sample(0.0, np.bincount(alloc), rng)
    if isinstance(pp, Sncp):
        centers = locs.copy()
        return MixtureState(alloc, locs, var, jumps, u, centers, np.arange(k))
    return MixtureState(alloc, locs, var, jumps, u)


def _canonical(alloc):
    _, first, inv = np.unique(alloc, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inv]


def run_chain(cfg: ChainConfig, z, pp, jm: JumpModel, vprior: InvGamma, state=None,
              callback=None) -> Trace:
    """Run burn-in plus saved iterations; deterministic given cfg.seed."""
    z = as_points(z, pp.dim)
    rng = np.random.default_rng(cfg.seed)
    state = state or init_state(z, pp, jm, vprior, rng, cfg.algorithm)
    trace = Trace()
    t0 = time.perf_counter()
    terms = proposal = None
    if cfg.algorithm == "marginal":
        terms = _terms_for(pp, rng)
        proposal = _Proposal(pp, z, max(0.5 * float(z.std()), 1e-3))
    for it in range(cfg.n_iter):
        try:
            if cfg.algorithm == "marginal":
                state = marginal_step(state, z, pp, jm, vprior, rng, cfg, terms, proposal)
            else:
                state = conditional_step(state, z, pp, jm, vprior, rng, cfg)
        except Exception as exc:
            raise RuntimeError(f"sampler failed at iteration {it}: {exc}") from exc
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            trace.iterations.append(it)
            trace.kn.append(state.k)
            trace.alloc.append(_canonical(state.alloc))
            trace.u.append(state.u)
            trace.total_mass.append(state.total_mass)
            trace.n_atoms.append(state.n_atoms)
            if state.labels is not None:
                g = state.labels[state.alloc]
                trace.groups.append(_canonical(g))
                trace.n_groups.append(len(np.unique(g)))
            if cfg.store_measures and state.jumps is not None:
                trace.measures.append(state.measure())
            if callback is not None:
                callback(it, state)
    trace.wall_time = time.perf_counter() - t0
    return trace
