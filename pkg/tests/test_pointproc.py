import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from nrmpp import pointproc as ppm
from nrmpp.jumps import JumpModel
from nrmpp.pointproc import (Dpp, DppExistenceError, Poisson, Region, Sncp, Strauss, nystrom,
                             poisson_binomial_pmf, set_partitions, spectral_decompose)
from nrmpp.specfun import bell

UNIT = Region((-0.5,), (0.5,))


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------


def test_region_geometry():
    r = Region((0.0, -1.0), (2.0, 1.0))
    assert r.volume == 4.0 and r.dim == 2
    assert r.contains([[1.0, 0.0], [3.0, 0.0]]).tolist() == [True, False]
    assert r.grid(3).shape == (9, 2)
    assert Region((0.5, 0.0), (1.0, 0.5)).is_subset_of(r)
    assert r.intersect(Region((5.0, 5.0), (6.0, 6.0))) is None
    with pytest.raises(ValueError):
        Region((1.0,), (0.0,))


def test_set_partitions_are_counted_by_bell_numbers():
    for k in range(1, 7):
        assert sum(1 for _ in set_partitions(range(k))) == bell(k)


def test_poisson_binomial_matches_enumeration():
    p = np.array([0.1, 0.5, 0.8, 0.3])
    ref = np.zeros(5)
    for bits in itertools.product([0, 1], repeat=4):
        ref[sum(bits)] += np.prod([pi if b else 1 - pi for pi, b in zip(p, bits)])
    assert np.allclose(poisson_binomial_pmf(p), ref, atol=1e-14)


# ---------------------------------------------------------------------------
# Poisson
# ---------------------------------------------------------------------------


def test_poisson_densities():
    pp = Poisson(2.0, Region((0.0,), (3.0,)))
    assert pp.log_moment_density([[0.5], [1.0]]) == pytest.approx(2 * math.log(2.0))
    assert pp.log_papangelou([[1.0]], [[0.5]]) == pytest.approx(math.log(2.0))
    assert pp.log_moment_density([[4.0]]) == -math.inf
    with pytest.raises(ValueError):
        pp.log_moment_density([[1.0], [1.0]])


def test_poisson_tilted_nonactive_count(rng):
    # psi(u) = 0.5 for Gamma(1,1) at u = 1: non-active count is Poisson(0.5)
    pp = Poisson(1.0, Region((0.0,), (1.0,)))
    palm = pp.reduced_palm([[0.3]])
    jm = JumpModel(1.0, 1.0)
    counts = np.array([len(palm.simulate(1.0, jm, rng)) for _ in range(100_000)])
    assert counts.mean() == pytest.approx(0.5, abs=4 * math.sqrt(0.5 / 100_000))
    untilted = np.array([len(palm.simulate(0.0, jm, rng)) for _ in range(20_000)])
    assert untilted.mean() == pytest.approx(1.0, abs=4 * math.sqrt(1.0 / 20_000))


def test_poisson_palm_laplace_and_count():
    pp = Poisson(1.5, Region((0.0,), (2.0,)))
    palm = pp.reduced_palm([[0.3]])
    jm = JumpModel(1.0, 1.0)
    assert palm.log_tilted_laplace(1.0, jm)[0] == pytest.approx(3.0 * (0.5 - 1.0))
    assert np.allclose(palm.count_pmf(30), stats.poisson.pmf(np.arange(31), 3.0))


# ---------------------------------------------------------------------------
# Strauss
# ---------------------------------------------------------------------------


def test_strauss_papangelou_counts_close_pairs():
    st = Strauss(2.0, 0.5, 1.0, Region((0.0,), (10.0,)))
    xs = np.array([[1.0], [1.5], [5.0]])
    assert st.log_papangelou([[1.2]], xs) == pytest.approx(math.log(2.0) + 2 * math.log(0.5))
    assert st.log_papangelou([[8.0]], xs) == pytest.approx(math.log(2.0))
    assert st.log_g(xs) == pytest.approx(3 * math.log(2.0) + math.log(0.5))
    assert ppm.log_papangelou(st, [[8.0]], xs) == st.log_papangelou([[8.0]], xs)


def test_strauss_without_interaction_is_poisson(rng):
    st = Strauss(1.5, 1.0, 0.5, Region((0.0,), (4.0,)), bd_steps=300)
    counts = []
    x = None
    for _ in range(3000):
        x = st.birth_death(rng, init=x, n_steps=60)
        counts.append(len(x))
    counts = np.array(counts[200:])
    assert counts.mean() == pytest.approx(6.0, rel=0.08)
    assert st.log_moment_density([[1.0], [2.0]], rng=rng) == pytest.approx(2 * math.log(1.5))


def test_strauss_repulsion_lowers_count(rng):
    reg = Region((0.0,), (5.0,))
    free = [len(Strauss(2.0, 1.0, 0.5, reg).simulate(rng)) for _ in range(300)]
    hard = [len(Strauss(2.0, 0.05, 0.5, reg).simulate(rng)) for _ in range(300)]
    assert np.mean(hard) < np.mean(free) - 1.0


def test_strauss_palm_laplace_untilted_is_zero(rng):
    st = Strauss(1.0, 0.5, 0.5, Region((0.0,), (3.0,)))
    val, se = st.reduced_palm([[1.0]]).log_tilted_laplace(0.0, JumpModel(1.0, 1.0), rng=rng)
    assert val == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        st.reduced_palm([[1.0]]).log_tilted_laplace(1.0, JumpModel(), mc_samples=10)


# ---------------------------------------------------------------------------
# DPP
# ---------------------------------------------------------------------------


def test_wide_kernel_spectrum_and_existence_guard():
    wide = Dpp(5.0, 0.3, UNIT, "likelihood")
    basis = spectral_decompose(wide, check=False)
    assert 4.995 <= basis.total <= 5.0
    assert not basis.valid
    with pytest.raises(DppExistenceError):
        spectral_decompose(wide)
    with pytest.raises(DppExistenceError):
        Dpp(5.0, 0.3, UNIT, "marginal")


def test_nystrom_trace_matches_kernel_trace():
    wide = Dpp(5.0, 0.3, UNIT, "likelihood", m_landmarks=150)
    nb = nystrom(wide.gaussian, UNIT, 150)
    assert nb.eigenvalues.sum() == pytest.approx(5.0, rel=1e-10)
    with pytest.raises(ValueError):
        nystrom(wide.gaussian, UNIT, 4)


def test_dpp_likelihood_and_marginal_kernels_agree():
    # a weak Gaussian K is admissible; the C built from it must map back to K
    # through K(x, y) = C(x, y) - w C(x, grid) (I + w C)^{-1} C(grid, y)
    reg = Region((0.0,), (2.0,))
    marg = Dpp(0.8, 0.1, reg, "marginal", m_landmarks=120)
    x = np.array([[0.3], [0.7], [1.6]])
    C = marg.C(x, x)
    K = marg.K(x, x)
    w = marg.w
    Cg = marg.C(marg.grid, marg.grid)
    cx = marg.C(marg.grid, x)
    Kr = C - w * cx.T @ np.linalg.solve(np.eye(len(Cg)) + w * Cg, cx)
    assert np.allclose(Kr, K, atol=1e-6)


def test_dpp_simulation_moments(rng):
    pp = Dpp(2.0, 0.2, Region((0.0,), (2.0,)), "likelihood", m_landmarks=100)
    lam = pp.base_eigenvalues()
    counts = np.array([len(x) for x in pp.simulate_many(rng, 8000)])
    mean, var = lam.sum(), (lam * (1 - lam)).sum()
    assert counts.mean() == pytest.approx(mean, abs=4 * math.sqrt(var / 8000))
    assert counts.var() == pytest.approx(var, rel=0.1)


def test_dpp_intensity_of_simulation(rng):
    pp = Dpp(2.0, 0.2, Region((0.0,), (2.0,)), "likelihood", m_landmarks=100)
    pts = np.concatenate([x[:, 0] for x in pp.simulate_many(rng, 8000)])
    edge = np.mean(pts < 0.25) / 0.25
    centre = np.mean((pts > 0.875) & (pts < 1.125)) / 0.25
    n_per = len(pts) / 8000
    ref_edge = pp.intensity(np.linspace(0.01, 0.24, 24)[:, None]).mean() / n_per
    ref_centre = pp.intensity(np.linspace(0.88, 1.12, 24)[:, None]).mean() / n_per
    assert edge == pytest.approx(ref_edge, rel=0.05)
    assert centre == pytest.approx(ref_centre, rel=0.05)


def test_dpp_palm_kernel_annihilates_anchors():
    wide = Dpp(5.0, 0.3, UNIT, "likelihood")
    y = np.array([[-0.2], [0.25]])
    rows = wide.palm_kernel(y, y, wide.grid)
    assert np.max(np.abs(rows)) < 1e-8


def test_dpp_papangelou_is_determinant_ratio():
    pp = Dpp(3.0, 0.2, UNIT, "likelihood", m_landmarks=60)
    xs = np.array([[-0.3], [0.1]])
    nu = np.array([[0.35]])
    full = np.vstack([xs, nu])
    ref = np.linalg.slogdet(pp.C(full, full))[1] - np.linalg.slogdet(pp.C(xs, xs))[1]
    assert pp.log_papangelou(nu, xs) == pytest.approx(ref, rel=1e-10)
    assert ppm.log_papangelou(pp, [[0.7]], xs) == -math.inf


def test_dpp_palm_count_law_and_laplace():
    pp = Dpp(5.0, 0.3, UNIT, "likelihood")
    palm = pp.reduced_palm([[-0.2], [0.2]])
    q = palm.count_pmf(40)
    assert q.sum() == pytest.approx(1.0, abs=1e-12)
    jm = JumpModel(1.0, 1.0)
    r = np.arange(41)
    assert palm.log_tilted_laplace(1.0, jm)[0] == pytest.approx(math.log(np.sum(q * 0.5 ** r)), rel=1e-10)


def test_dpp_degenerate_anchors_rejected():
    pp = Dpp(5.0, 0.3, UNIT, "likelihood")
    with pytest.raises(ValueError):
        pp.palm_grid_kernel([[0.1], [0.1 + 1e-9]])


# ---------------------------------------------------------------------------
# shot-noise Cox
# ---------------------------------------------------------------------------


def _eta_quadrature(pp, pts):
    pts = np.atleast_2d(pts)

    def f(v):
        lk = pp.log_kernel(pts, [[v]]).sum()
        return math.exp(lk + pp.log_base_density([[v]])[0])
    lo, hi = pp.m0[0] - 12 * pp.s0, pp.m0[0] + 12 * pp.s0
    return pp.lam * integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-11, limit=400, points=list(pts[:, 0]))[0]


def test_sncp_eta_against_quadrature(rng):
    pp = Sncp(1.3, 0.7, 2.0, "gaussian", (0.5,), 1.2)
    for x in rng.normal(size=10):
        assert pp.log_eta([[x]]) == pytest.approx(math.log(_eta_quadrature(pp, [[x]])), abs=1e-8)
        assert pp.log_moment_density([[x]]) == pytest.approx(math.log(1.3) + pp.log_eta([[x]]), abs=1e-12)


def test_sncp_uniform_base_eta_against_quadrature():
    reg = Region((-1.0,), (2.0,))
    pp = Sncp(1.0, 0.4, 1.5, "uniform", region=reg)
    pts = np.array([[0.1], [0.6]])

    def f(v):
        return math.exp(pp.log_kernel(pts, [[v]]).sum()) / reg.volume
    ref = 1.5 * integrate.quad(f, -1.0, 2.0, epsrel=1e-12)[0]
    assert pp.log_eta(pts) == pytest.approx(math.log(ref), abs=1e-9)


def test_sncp_second_moment_density_against_two_dimensional_quadrature():
    pp = Sncp(1.0, 0.8, 1.0, "gaussian", (0.0,), 1.0)
    x = np.array([[-0.4], [0.9]])
    g = pp.gamma
    ref = g ** 2 * (_eta_quadrature(pp, x[:1]) * _eta_quadrature(pp, x[1:]) + _eta_quadrature(pp, x))
    assert math.exp(pp.log_moment_density(x)) == pytest.approx(ref, rel=1e-6)


def test_sncp_moment_density_vs_monte_carlo(rng):
    # E[number of ordered pairs in A x B] = int_A int_B m_2
    pp = Sncp(2.0, 0.5, 1.5, "gaussian", (0.0,), 1.0)
    A, B = (-1.0, 0.0), (0.0, 1.0)
    n = 40_000
    tot = 0
    for _ in range(n):
        x = pp.simulate(rng)[:, 0]
        tot += np.sum((x > A[0]) & (x < A[1])) * np.sum((x > B[0]) & (x < B[1]))
    t, w = np.polynomial.legendre.leggauss(12)
    xa, xb = 0.5 * t - 0.5, 0.5 * t + 0.5
    val = sum(0.25 * wi * wj * math.exp(pp.log_moment_density([[a], [b]]))
              for a, wi in zip(xa, w) for b, wj in zip(xb, w))
    assert tot / n == pytest.approx(val, rel=0.05)


def test_sncp_tilted_laplace_without_anchors(rng):
    pp = Sncp(1.0, 1.0, 1.0, "gaussian", (0.0,), 1.0)
    jm = JumpModel(1.0, 1.0)
    val = pp.log_tilted_joint(np.empty((0, 1)), float(jm.log_psi(1.0)))
    assert val == pytest.approx(math.exp(-0.5) - 1.0, abs=1e-14)
    counts = np.array([len(pp.simulate(rng)) for _ in range(200_000)])
    mc = np.mean(0.5 ** counts)
    se = np.std(0.5 ** counts) / math.sqrt(len(counts))
    assert abs(math.log(mc) - val) < 4 * se / mc


def test_sncp_palm_structure_and_count_law(rng):
    pp = Sncp(1.0, 0.6, 1.0, "gaussian", (0.0,), 1.0)
    palm = pp.reduced_palm([[-0.5], [0.4]])
    assert len(palm.partitions) == 2
    assert sorted(len(palm.components(i)) for i in range(2)) == [1, 2]
    q = palm.count_pmf(60)
    assert q.sum() == pytest.approx(1.0, abs=1e-10)
    jm = JumpModel(1.0, 1.0)
    counts = np.array([len(palm.simulate(0.0, jm, rng)) for _ in range(40_000)])
    emp = np.bincount(counts, minlength=61)[:61] / len(counts)
    assert 0.5 * np.abs(emp - q).sum() < 0.02
    lap = palm.log_tilted_laplace(1.0, jm)[0]
    assert lap == pytest.approx(math.log(np.sum(q * 0.5 ** np.arange(61))), rel=1e-8)


def test_sncp_moment_density_guard():
    pp = Sncp(1.0, 0.6)
    with pytest.raises(ValueError):
        pp.log_moment_density(np.arange(13.0)[:, None])
    with pytest.raises(ValueError):
        Sncp(1.0, 0.6, base="uniform")
