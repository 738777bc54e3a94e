import math

import numpy as np
import pytest

from nrmpp.jumps import JumpModel
from nrmpp.mixture import InvGamma
from nrmpp.nrm import DiscreteMeasure, joint_kn_law, prior_moments, sample_nrm, sncp_kn_pmf
from nrmpp.pointproc import Dpp, Poisson, Region, Sncp
from nrmpp.specfun import gfc

UNIT = Region((-0.5,), (0.5,))


def _mc_mu(pp, jm, A, B, n, rng):
    muA, muB, pA = np.empty(n), np.empty(n), np.empty(n)
    for i in range(n):
        x = pp.simulate(rng)
        s = jm.sample(0.0, 0, rng, size=len(x))
        inA, inB = A.contains(x), B.contains(x)
        muA[i], muB[i] = s[inA].sum(), s[inB].sum()
        pA[i] = muA[i] / s.sum() if len(s) else 0.0
    return muA, muB, pA


def test_sample_nrm_weights_normalize(rng):
    pp = Poisson(3.0, Region((0.0,), (2.0,)))
    for _ in range(50):
        m = sample_nrm(pp, JumpModel(2.0, 2.0), InvGamma(), rng)
        if m.n_atoms:
            assert abs(m.weights().sum() - 1.0) < 1e-12
    empty = DiscreteMeasure(np.empty((0, 1)), [], [])
    assert empty.weights().size == 0 and empty.total_mass == 0.0


def test_poisson_prior_moments_against_monte_carlo(rng):
    pp = Poisson(2.0, Region((0.0,), (3.0,)))
    jm = JumpModel(2.0, 1.5)
    for _ in range(3):
        a, b = np.sort(rng.uniform(0, 3, 2)), np.sort(rng.uniform(0, 3, 2))
        A, B = Region((a[0],), (a[1],)), Region((b[0],), (b[1],))
        mo = prior_moments(pp, jm, A, B)
        muA, muB, pA = _mc_mu(pp, jm, A, B, 20_000, rng)
        n = len(muA)
        assert abs(muA.mean() - mo["mean_mu_A"]) < 4 * muA.std() / math.sqrt(n)
        prod = (muA - muA.mean()) * (muB - muB.mean())
        assert abs(prod.mean() - mo["cov_mu_AB"]) < 4 * prod.std() / math.sqrt(n) + 1e-3
        assert abs(pA.mean() - mo["mean_p_A"]) < 4 * pA.std() / math.sqrt(n)


def test_poisson_covariance_closed_form():
    pp = Poisson(2.0, Region((0.0,), (3.0,)))
    jm = JumpModel(2.0, 1.5)
    A, B = Region((0.0,), (2.0,)), Region((1.0,), (3.0,))
    mo = prior_moments(pp, jm, A, B)
    assert mo["cov_mu_AB"] == pytest.approx(2.0 * 1.0 * jm.second_moment, rel=1e-12)
    assert mo["mean_mu_A"] == pytest.approx(2.0 * 2.0 * jm.mean, rel=1e-12)


@pytest.mark.parametrize("omega", [0.5, 1.0, 2.0, 5.0])
def test_mean_probability_of_whole_space_is_nonempty_probability(omega):
    R = Region((0.0,), (1.0,))
    mo = prior_moments(Poisson(omega, R), JumpModel(1.0, 1.0), R, R)
    assert mo["mean_p_A"] == pytest.approx(1.0 - math.exp(-omega), abs=1e-9)


def test_dpp_mean_probability_against_monte_carlo(rng):
    pp = Dpp(3.0, 0.1, Region((0.0,), (1.0,)), "likelihood", m_landmarks=80)
    jm = JumpModel(1.0, 1.0)
    A = Region((0.0,), (0.3,))
    mo = prior_moments(pp, jm, A, A, n_nodes=16)
    _, _, pA = _mc_mu(pp, jm, A, A, 20_000, rng)
    assert abs(pA.mean() - mo["mean_p_A"]) < 4 * pA.std() / math.sqrt(len(pA))


def test_prior_moments_rejects_sets_outside_region():
    R = Region((0.0,), (1.0,))
    with pytest.raises(ValueError):
        prior_moments(Poisson(1.0, R), JumpModel(), Region((0.5,), (1.5,)), R)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_joint_law_sums_to_nonempty_probability_for_poisson(alpha):
    omega, n = 1.3, 5
    pp = Poisson(omega, Region((0.0,), (1.0,)))
    jm = JumpModel(alpha, 1.0)
    total = 0.0
    for k in range(1, n + 1):
        anchors = np.linspace(0.1, 0.9, k)[:, None]
        # the density is constant in the anchors, so integrating over R^k multiplies by |R|^k = 1
        total += joint_kn_law(pp, jm, n, anchors)
    assert total == pytest.approx(1.0 - math.exp(-omega), rel=1e-9)


def test_joint_law_composition_factor():
    assert (-1) ** 5 * float(gfc(5, 2, -1.0)) == pytest.approx(240.0)
    pp = Poisson(1.0, Region((0.0,), (1.0,)))
    val = joint_kn_law(pp, JumpModel(1.0, 1.0), 5, [[0.2], [0.7]])
    r = np.arange(400)
    q = np.exp(-1.0) / np.array([math.factorial(int(v)) if v < 170 else np.inf for v in r])
    series = np.sum(q * np.array([math.gamma(2 + v) / math.gamma(7 + v) if v < 160 else 0.0 for v in r]))
    assert val == pytest.approx(240.0 * series, rel=1e-10)


def test_joint_law_does_not_depend_on_gamma_rate():
    pp = Poisson(1.0, UNIT)
    a = joint_kn_law(pp, JumpModel(1.5, 0.3), 4, [[0.1], [-0.2]])
    b = joint_kn_law(pp, JumpModel(1.5, 7.0), 4, [[0.1], [-0.2]])
    assert a == pytest.approx(b, rel=1e-14)


def test_figure_one_shapes():
    jm = JumpModel(1.0, 1.0)
    pois = Poisson(1.0, UNIT)
    dpp = Dpp(5.0, 0.3, UNIT, "likelihood")
    xs = np.linspace(0.05, 0.35, 7)
    p = [joint_kn_law(pois, jm, 5, [[-x], [x]]) for x in xs]
    d1 = [joint_kn_law(dpp, jm, 5, [[-x], [x]]) for x in xs]
    d2 = [joint_kn_law(dpp, jm, 5, [[-0.3], [-0.3 + 2 * x]]) for x in xs]
    assert np.ptp(p) < 1e-8
    assert np.all(np.diff(d1) > 0)
    assert np.max(np.abs(np.array(d1) - d2)) > 1e-3 * max(d1)


def test_dpp_joint_law_reflection_symmetry():
    dpp = Dpp(5.0, 0.3, UNIT, "likelihood")
    jm = JumpModel(1.0, 1.0)
    for y in ([[-0.1], [0.3]], [[-0.4], [0.05], [0.2]]):
        a = joint_kn_law(dpp, jm, 5, y)
        b = joint_kn_law(dpp, jm, 5, -np.asarray(y))
        assert a == pytest.approx(b, rel=1e-8)


def test_joint_law_input_errors():
    pp = Poisson(1.0, UNIT)
    with pytest.raises(ValueError):
        joint_kn_law(pp, JumpModel(), 1, [[0.1], [0.2]])
    with pytest.raises(ArithmeticError):
        joint_kn_law(Poisson(30.0, UNIT), JumpModel(), 3, [[0.1]], r_max=5)
    assert joint_kn_law(pp, JumpModel(), 3, [[0.9]]) == 0.0


def test_sncp_pmf_basic_properties():
    jm = JumpModel(1.0, 1.0)
    pmf, const = sncp_kn_pmf(Sncp(1.0, 1.0), jm, 1)
    assert pmf.tolist() == [1.0]
    pmf, const = sncp_kn_pmf(Sncp(1.0, 1.0, 1.0), jm, 5)
    assert np.all(pmf >= 0) and pmf.sum() == pytest.approx(1.0)
    assert const == pytest.approx(1.0 - math.exp(-(1.0 - math.exp(-1.0))), rel=1e-10)
    bell_form, _ = sncp_kn_pmf(Sncp(1.0, 1.0, 1.0), jm, 5, form="bell")
    assert np.all(bell_form >= 0)
    with pytest.raises(ValueError):
        sncp_kn_pmf(Sncp(1.0, 1.0), jm, 5, form="other")


def test_sncp_expected_clusters_increase_with_gamma(rng):
    jm = JumpModel(1.0, 1.0)
    means = []
    for g in (0.5, 1.0, 2.0):
        pmf, _ = sncp_kn_pmf(Sncp(g, 1.0, 1.0), jm, 10)
        means.append(float(np.arange(1, 11) @ pmf))
    assert means[0] < means[1] < means[2]
    # the same ordering from the generative model
    mc = []
    for g in (0.5, 2.0):
        pp = Sncp(g, 1.0, 1.0)
        ks = []
        while len(ks) < 20_000:
            x = pp.simulate(rng)
            if len(x) == 0:
                continue
            s = jm.sample(0.0, 0, rng, size=len(x))
            ks.append(len(np.unique(rng.choice(len(x), size=10, p=s / s.sum()))))
        mc.append(np.mean(ks))
    assert mc[0] < mc[1]
    assert mc[0] == pytest.approx(means[0], abs=0.05)
    assert mc[1] == pytest.approx(means[2], abs=0.05)
