import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from cebm.expfam import (
    IDENTITY_TOL,
    QUADRATURE_TOL,
    DomainError,
    GaussianDualLogNormalizer,
    GaussianMeanParams,
    GaussianNaturalParams,
    LikelihoodFamily,
    LikelihoodKind,
    NegativeEntropy,
    SquaredNorm,
    bregman_divergence,
    dual_b_star,
    exp_family_log_density,
    gaussian_sample,
    log_normalizer_b,
    mean_to_natural,
    natural_to_mean,
    posterior_params,
)

lam1_st = st.floats(-5, 5)
lam2_st = st.floats(-5, -0.05)


def nat(l1, l2):
    return GaussianNaturalParams([l1], [l2])


def quad_log_normalizer(l1, l2):
    """log of the integral of (2 pi)^-1/2 exp(l1 z + l2 z^2), centred at the mode."""
    mu = -l1 / (2 * l2)
    sd = math.sqrt(-1 / (2 * l2))
    peak = l1 * mu + l2 * mu * mu
    f = lambda z: math.exp(l1 * z + l2 * z * z - peak) / math.sqrt(2 * math.pi)
    val, _ = integrate.quad(f, mu - 40 * sd, mu + 40 * sd, epsabs=0, epsrel=1e-13, limit=200)
    return peak + math.log(val)


# ---- log-normalizer -------------------------------------------------------

def test_b_standard_normal_is_zero():
    assert log_normalizer_b(nat(0.0, -0.5)) == 0.0


def test_b_shifted_mean():
    assert log_normalizer_b(nat(1.0, -0.5)) == pytest.approx(0.5, abs=1e-15)
    assert quad_log_normalizer(1.0, -0.5) == pytest.approx(0.5, abs=1e-9)


@pytest.mark.parametrize("l1,l2", [(0.0, 0.1), (0.0, 0.0), (1.0, float("nan")), (float("inf"), -1.0)])
def test_b_domain_errors(l1, l2):
    with pytest.raises(DomainError):
        log_normalizer_b(nat(l1, l2))


def test_b_matches_quadrature_on_grid():
    worst = 0.0
    for l1 in np.linspace(-4, 4, 9):
        for l2 in (-4.0, -2.0, -1.0, -0.5, -0.25, -0.1):
            worst = max(worst, abs(log_normalizer_b(nat(l1, l2)) - quad_log_normalizer(l1, l2)))
    assert worst < QUADRATURE_TOL


def test_b_sums_over_dimensions():
    p = GaussianNaturalParams([0.3, -1.2, 2.0], [-0.7, -1.5, -0.2])
    parts = sum(log_normalizer_b(nat(a, b)) for a, b in zip(p.lam1, p.lam2))
    assert log_normalizer_b(p) == pytest.approx(parts, abs=1e-13)


@given(lam1_st, lam2_st)
def test_grad_b_is_mean(l1, l2):
    h = 1e-5
    m = natural_to_mean(nat(l1, l2))
    d1 = (log_normalizer_b(nat(l1 + h, l2)) - log_normalizer_b(nat(l1 - h, l2))) / (2 * h)
    d2 = (log_normalizer_b(nat(l1, l2 + h)) - log_normalizer_b(nat(l1, l2 - h))) / (2 * h)
    assert abs(d1 - m.m1[0]) <= 1e-5 * max(1.0, abs(m.m1[0]))
    assert abs(d2 - m.m2[0]) <= 1e-5 * max(1.0, abs(m.m2[0]))


# ---- Legendre maps --------------------------------------------------------

def test_natural_to_mean_examples():
    m = natural_to_mean(nat(0.0, -0.5))
    assert (m.m1[0], m.m2[0]) == (0.0, 1.0)
    m = natural_to_mean(nat(1.0, -0.5))
    assert (m.m1[0], m.m2[0]) == (1.0, 2.0)


def test_natural_to_mean_monte_carlo():
    z = np.random.default_rng(3).normal(1.0, 1.0, 200_000)
    m = natural_to_mean(nat(1.0, -0.5))
    assert abs(z.mean() - m.m1[0]) < 0.01
    assert abs((z**2).mean() - m.m2[0]) < 0.03


def test_mean_to_natural_examples():
    p = mean_to_natural(GaussianMeanParams([0.0], [1.0]))
    assert (p.lam1[0], p.lam2[0]) == (0.0, -0.5)
    p = mean_to_natural(GaussianMeanParams([1.0], [2.0]))
    assert (p.lam1[0], p.lam2[0]) == (1.0, -0.5)


@pytest.mark.parametrize("m1,m2", [(1.0, 1.0), (0.0, -1.0), (2.0, 3.0)])
def test_mean_params_reject_nonpositive_variance(m1, m2):
    with pytest.raises(DomainError):
        mean_to_natural(GaussianMeanParams([m1], [m2]))


@given(st.lists(st.tuples(lam1_st, lam2_st), min_size=1, max_size=6))
def test_legendre_round_trip_natural(pairs):
    p = GaussianNaturalParams([a for a, _ in pairs], [b for _, b in pairs])
    q = mean_to_natural(natural_to_mean(p))
    np.testing.assert_allclose(q.lam1, p.lam1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(q.lam2, p.lam2, rtol=1e-12, atol=1e-12)


@given(st.floats(-3, 3), st.floats(0.2, 5))
def test_legendre_round_trip_mean(m1, var):
    m = GaussianMeanParams([m1], [m1 * m1 + var])
    back = natural_to_mean(mean_to_natural(m))
    assert abs(back.m1[0] - m.m1[0]) < 1e-12 * max(1, abs(m1))
    assert abs(back.m2[0] - m.m2[0]) < 1e-12 * max(1, m.m2[0])


def test_dual_b_star_standard_normal():
    assert dual_b_star(GaussianMeanParams([0.0], [1.0])) == pytest.approx(-0.5, abs=1e-15)


def test_dual_b_star_degenerate():
    with pytest.raises(DomainError):
        dual_b_star(GaussianMeanParams([1.0], [1.0]))


@given(st.lists(st.tuples(lam1_st, lam2_st), min_size=1, max_size=5))
def test_fenchel_young_equality(pairs):
    p = GaussianNaturalParams([a for a, _ in pairs], [b for _, b in pairs])
    m = natural_to_mean(p)
    inner = float(np.sum(p.lam1 * m.m1 + p.lam2 * m.m2))
    assert abs(log_normalizer_b(p) + dual_b_star(m) - inner) < IDENTITY_TOL * max(1.0, abs(inner))


# ---- Bregman divergences --------------------------------------------------

def test_bregman_squared_norm():
    assert bregman_divergence(SquaredNorm(), [1.0, 0.0], [0.0, 0.0]) == 1.0


def test_bregman_negative_entropy_is_kl():
    d = bregman_divergence(NegativeEntropy(), [0.5, 0.5], [0.25, 0.75])
    assert d == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert d == pytest.approx(0.14384, abs=1e-5)


def test_bregman_entropy_domain():
    with pytest.raises(DomainError):
        bregman_divergence(NegativeEntropy(), [0.0, 1.0], [0.5, 0.5])


@pytest.mark.parametrize("f,mu", [
    (SquaredNorm(), [0.3, -2.0]),
    (NegativeEntropy(), [0.2, 0.8]),
    (GaussianDualLogNormalizer(), [0.5, 1.5]),
])
def test_bregman_self_is_zero(f, mu):
    assert bregman_divergence(f, mu, mu) == 0.0


@given(st.lists(st.floats(0.01, 5), min_size=2, max_size=2),
       st.lists(st.floats(0.01, 5), min_size=2, max_size=2))
def test_bregman_nonnegative_and_zero_iff_equal(a, b):
    for f in (SquaredNorm(), NegativeEntropy()):
        d = bregman_divergence(f, a, b)
        assert d >= 0.0
        if not np.allclose(a, b, atol=1e-3):
            assert d > 1e-12


@given(st.floats(-2, 2), st.floats(0.1, 3), st.floats(-2, 2), st.floats(0.1, 3))
def test_gaussian_dual_bregman_is_kl(m_a, v_a, m_b, v_b):
    # D_{B*}(mu_a, mu_b) = KL(N_a || N_b)
    a = [m_a, m_a * m_a + v_a]
    b = [m_b, m_b * m_b + v_b]
    kl = 0.5 * (math.log(v_b / v_a) + (v_a + (m_a - m_b) ** 2) / v_b - 1)
    assert bregman_divergence(GaussianDualLogNormalizer(), a, b) == pytest.approx(kl, abs=1e-9)


# ---- posterior update -----------------------------------------------------

def test_posterior_params_examples():
    bias = nat(0.0, -0.5)
    p = posterior_params(bias, [1.0], [-0.5])
    assert (p.lam1[0], p.lam2[0]) == (1.0, -1.0)
    p = posterior_params(bias, [0.0], [0.0])
    assert (p.lam1[0], p.lam2[0]) == (0.0, -0.5)
    with pytest.raises(DomainError):
        posterior_params(bias, [0.5], [0.6])


def test_posterior_params_batched():
    bias = GaussianNaturalParams.standard(3)
    t1 = np.arange(6.0).reshape(2, 3)
    t2 = -np.ones((2, 3))
    p = posterior_params(bias, t1, t2)
    assert p.lam1.shape == (2, 3)
    np.testing.assert_array_equal(p.lam2, -1.5)


# ---- densities ------------------------------------------------------------

@pytest.mark.parametrize("mode", ["canonical", "bregman"])
def test_standard_normal_density(mode):
    p = nat(0.0, -0.5)
    assert exp_family_log_density(p, [0.0], mode) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-14)
    assert exp_family_log_density(p, [1.0], mode) == pytest.approx(exp_family_log_density(p, [-1.0], mode),
                                                                  abs=1e-15)


@given(st.lists(st.tuples(lam1_st, lam2_st, st.floats(-6, 6)), min_size=1, max_size=4))
def test_bregman_identity_gaussian(rows):
    p = GaussianNaturalParams([r[0] for r in rows], [r[1] for r in rows])
    z = [r[2] for r in rows]
    c = exp_family_log_density(p, z, "canonical")
    b = exp_family_log_density(p, z, "bregman")
    assert abs(c - b) < IDENTITY_TOL * max(1.0, abs(c))
    ref = sum(-0.5 * math.log(2 * math.pi * v) - (zi - m) ** 2 / (2 * v)
              for zi, m, v in zip(z, p.mean, p.variance))
    assert c == pytest.approx(ref, rel=1e-10, abs=1e-10)


def test_bernoulli_log_density_two_point():
    fam = LikelihoodFamily.bernoulli_from_mean([0.3])
    # brute force: normalize exp(eta * x) over x in {0, 1}
    w = np.exp(fam.eta[0] * np.array([0.0, 1.0]))
    brute = math.log(w[1] / w.sum())
    for mode in ("canonical", "bregman"):
        assert exp_family_log_density(fam, [1.0], mode) == pytest.approx(math.log(0.3), abs=1e-12)
        assert exp_family_log_density(fam, [1.0], mode) == pytest.approx(brute, abs=1e-12)


@given(st.lists(st.floats(0.02, 0.98), min_size=1, max_size=5), st.data())
def test_bregman_identity_bernoulli(ps, data):
    fam = LikelihoodFamily.bernoulli_from_mean(ps)
    x = data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=len(ps), max_size=len(ps)))
    c = exp_family_log_density(fam, x, "canonical")
    b = exp_family_log_density(fam, x, "bregman")
    assert abs(c - b) < IDENTITY_TOL
    ref = sum(math.log(p if xi else 1 - p) for p, xi in zip(ps, x))
    assert c == pytest.approx(ref, abs=1e-12)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-4, 4)), min_size=1, max_size=4), st.floats(0.1, 4))
def test_bregman_identity_fixed_variance_gaussian(rows, var):
    fam = LikelihoodFamily(LikelihoodKind.GAUSSIAN_FIXED_VARIANCE, [r[0] / var for r in rows], var)
    x = [r[1] for r in rows]
    c = exp_family_log_density(fam, x, "canonical")
    b = exp_family_log_density(fam, x, "bregman")
    assert abs(c - b) < IDENTITY_TOL * max(1.0, abs(c))
    ref = sum(-0.5 * math.log(2 * math.pi * var) - (xi - r[0]) ** 2 / (2 * var) for xi, r in zip(x, rows))
    assert c == pytest.approx(ref, abs=1e-10)


def test_bernoulli_rejects_non_binary_point():
    fam = LikelihoodFamily.bernoulli_from_mean([0.3])
    with pytest.raises(DomainError):
        exp_family_log_density(fam, [0.5])


def test_fixed_variance_must_be_positive():
    with pytest.raises(DomainError):
        LikelihoodFamily("gaussian-fixed-variance", [0.0], 0.0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        exp_family_log_density(nat(0.0, -0.5), [0.0], "other")


# ---- sampling ---------------------------------------------------------------

def test_gaussian_sample_mean():
    p = GaussianNaturalParams(np.ones(100_000), -0.5 * np.ones(100_000))
    z = gaussian_sample(p, np.random.Generator(np.random.Philox(0)))
    assert abs(z.mean() - 1.0) < 0.02


def test_gaussian_sample_deterministic():
    p = GaussianNaturalParams([0.2, 1.0], [-1.0, -0.3])
    a = gaussian_sample(p, np.random.Generator(np.random.Philox(5)))
    b = gaussian_sample(p, np.random.Generator(np.random.Philox(5)))
    np.testing.assert_array_equal(a, b)


def test_zero_variance_rejected_before_sampling():
    with pytest.raises(DomainError):
        gaussian_sample(nat(1.0, 0.0), np.random.default_rng(0))


def test_params_are_immutable():
    p = nat(0.0, -0.5)
    with pytest.raises(ValueError):
        p.lam1[0] = 3.0
