import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats

from vcplab import geom
from vcplab.specfun import DomainError

# shell probabilities frozen from mpmath quadrature of the spherical-cap area over radius
SHELL_REF = [
    (0.3, 1.0, 2, 0.342767947681908213),
    (0.5, 1.0, 3, 0.178571428571428571),
    (0.2, 1.0, 9, 0.266567816482722028),
    (0.7, 2.0, 5, 0.19873086159086177),
]


@pytest.mark.parametrize("gamma,eps,n,expected", SHELL_REF)
def test_shell_probability_reference(gamma, eps, n, expected):
    assert geom.vcp_linear_uniform(gamma, eps, n) == pytest.approx(expected, abs=1e-14)


# ill-conditioned corners (argument near 0 or 1, large n); mpmath at 50 digits
SHELL_HARD_REF = [
    (0.6800986545358294, 58, 8.2889298231013055062e-10),
    (6.103515625e-05, 3, 0.49995422363298301985),
    (0.9999999, 40, 7.25981612628378072e-134),
    (0.3, 200, 6.8526269592543426002e-6),
]


@pytest.mark.parametrize("r,n,expected", SHELL_HARD_REF)
def test_shell_probability_relative_accuracy(r, n, expected):
    assert geom.vcp_linear_uniform(r, 1.0, n) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("r", np.linspace(0.0, 0.95, 8))
def test_ball_fraction_elementary(r):
    # interval, circular segment, spherical cap
    assert geom.cap_fraction_of_ball(r, 1) == pytest.approx((1 - r) / 2, abs=1e-14)
    theta = 2 * math.acos(r)
    assert geom.cap_fraction_of_ball(r, 2) == pytest.approx((theta - math.sin(theta)) / (2 * math.pi), abs=1e-14)
    h = 1 - r
    assert geom.cap_fraction_of_ball(r, 3) == pytest.approx(h * h * (3 - h) / 4, abs=1e-14)


@pytest.mark.parametrize("gamma", [0.0, 0.3, 0.9, 0.999999])
def test_one_dimensional_shell_is_half(gamma):
    assert geom.vcp_linear_uniform(gamma, 1.0, 1) == pytest.approx(0.5, abs=1e-12)


def test_zero_margin_is_half():
    for n in (1, 2, 9, 50):
        assert geom.vcp_linear_uniform(0.0, 1.0, n) == 0.5
        assert geom.vcp_linear_uniform_ball(0.0, 1.0, n) == 0.5


@pytest.mark.parametrize("n", range(1, 21))
def test_limit_small_margin(n):
    assert 0.4999 <= geom.vcp_linear_uniform(1e-9, 1.0, n) <= 0.5


@pytest.mark.parametrize("n", range(2, 21))
def test_limit_margin_near_epsilon(n):
    assert geom.vcp_linear_uniform(1 - 1e-9, 1.0, n) <= 1e-3


def test_degenerate_shell_warns_and_returns_zero():
    with pytest.warns(geom.DegenerateShellWarning):
        assert geom.vcp_linear_uniform(1.0, 1.0, 3) == 0.0
    with pytest.warns(geom.DegenerateShellWarning):
        assert geom.vcp_linear_uniform(2.0, 1.0, 3) == 0.0
    assert geom.vcp_linear_uniform_ball(1.0, 1.0, 3) == 0.0


@pytest.mark.parametrize("args", [(-0.1, 1.0, 2), (0.1, 0.0, 2), (0.1, 1.0, 0), (0.1, 1.0, 2.5)])
def test_domain_errors(args):
    with pytest.raises(DomainError):
        geom.vcp_linear_uniform(*args)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 60))
def test_shell_probability_decreasing_in_margin(g1, g2, n):
    lo, hi = sorted((g1, g2))
    assume(hi < 1.0)
    assert geom.vcp_linear_uniform(lo, 1.0, n) >= geom.vcp_linear_uniform(hi, 1.0, n) - 1e-15


@given(st.floats(0, 0.999), st.floats(0.1, 100), st.integers(1, 60))
def test_shell_vs_ball_relation(ratio, eps, n):
    gamma = ratio * eps
    shell = geom.vcp_linear_uniform(gamma, eps, n)
    ball = geom.vcp_linear_uniform_ball(gamma, eps, n)
    assert 0.0 <= ball <= shell * (1 + 1e-12) and shell <= 0.5
    # the inner ball never crosses, so shell = ball * vol(ball) / vol(shell)
    assert shell * (1 - ratio**n) == pytest.approx(ball, rel=1e-10, abs=1e-300)


@given(st.floats(0.01, 0.99), st.integers(1, 30), st.floats(0.01, 100))
def test_scale_invariance(ratio, n, scale):
    assert geom.vcp_linear_uniform(ratio * scale, scale, n) == pytest.approx(
        geom.vcp_linear_uniform(ratio, 1.0, n), rel=1e-12, abs=1e-300)


# asymptotic expansion


@pytest.mark.parametrize("n", [2, 3, 5])
def test_asymptotic_ratio_converges(n):
    ratios = [geom.vcp_nonlinear_asymptotic(1.0, 1.0 + d, n) / geom.vcp_linear_uniform(1.0, 1.0 + d, n)
              for d in (1e-2, 1e-3, 1e-4, 1e-5)]
    gaps = [abs(r - 1) for r in ratios]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert 0.99 <= ratios[-1] <= 1.01


def test_asymptotic_one_dimension_exact():
    assert geom.asymptotic_coefficient(1, 1.0) == 0.5
    assert geom.asymptotic_coefficient(1, 7.3) == 0.5


@pytest.mark.parametrize("n", [2, 3, 5])
def test_halved_variant_is_half_the_limit(n):
    d = 1e-6
    ratio = geom.vcp_nonlinear_asymptotic(1.0, 1.0 + d, n, "halved") / geom.vcp_linear_uniform(1.0, 1.0 + d, n)
    assert ratio == pytest.approx(0.5, rel=1e-4)


def test_asymptotic_rejects_unknown_variant():
    with pytest.raises(ValueError):
        geom.asymptotic_coefficient(3, 1.0, "other")


# g of the mean margin


@pytest.mark.parametrize("n", [2, 5, 10, 50])
@pytest.mark.parametrize("eps", [1.0, 35.0])
def test_g_strictly_decreasing(n, eps):
    grid = np.linspace(eps / 1001, eps * 1000 / 1001, 1000)
    values = np.array([geom.g_of_mean_margin(g, eps, n) for g in grid])
    assert (np.diff(values) < 0).all()


def test_g_not_convex_in_two_dimensions():
    # near epsilon g behaves like sqrt(epsilon - gamma) when n = 2
    a, b = 0.8, 0.94
    mean_g = (geom.g_of_mean_margin(a, 1.0, 2) + geom.g_of_mean_margin(b, 1.0, 2)) / 2
    assert mean_g == pytest.approx(0.109832503719, abs=1e-11)
    assert geom.g_of_mean_margin((a + b) / 2, 1.0, 2) == pytest.approx(0.113443245449, abs=1e-11)


@pytest.mark.parametrize("n", [3, 4, 5, 10, 30])
def test_g_convex_from_three_dimensions(n):
    grid = np.linspace(0.01, 0.99, 981)
    values = np.array([geom.g_of_mean_margin(g, 1.0, n) for g in grid])
    assert (np.diff(values, 2) >= -1e-12).all()


@pytest.mark.parametrize("gamma", [0.0, 1.0, 1.5])
def test_g_domain(gamma):
    with pytest.raises(DomainError):
        geom.g_of_mean_margin(gamma, 1.0, 3)


# samplers


def test_shell_radii_distribution_ks():
    n, gamma, eps = 4, 0.6, 1.5
    shell = geom.Shell(np.zeros(n), gamma, eps)
    r = geom.sample_shell(shell, 20000, np.random.default_rng(1)).radii
    cdf = lambda t: (np.clip(t, gamma, eps) ** n - gamma**n) / (eps**n - gamma**n)
    assert stats.kstest(r, cdf).pvalue > 1e-3
    assert r.min() >= gamma and r.max() < eps


def test_directions_uniform_ks():
    # on the 2-sphere each coordinate is uniform on [-1, 1]
    d = geom.uniform_directions(np.random.default_rng(2), 20000, 3)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-14)
    for j in range(3):
        assert stats.kstest(d[:, j], stats.uniform(-1, 2).cdf).pvalue > 1e-3


def test_high_dimensional_directions_are_unit():
    d = geom.uniform_directions(np.random.default_rng(3), 100, 5005)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("n,ratio", [(2, 0.3), (5, 0.5), (9, 0.2)])
def test_monte_carlo_matches_closed_form(n, ratio):
    samples = 50000
    shell = geom.Shell(np.ones(n), ratio, 1.0)
    normal = np.ones(n) / math.sqrt(n)
    hits = geom.crosses_cap(geom.sample_shell(shell, samples, np.random.default_rng(n)), geom.CapSpec(shell, normal))
    p = geom.vcp_linear_uniform(ratio, 1.0, n)
    assert abs(hits.mean() - p) <= 4 * math.sqrt(p * (1 - p) / samples)


def test_ball_sampler_inside():
    pts = geom.sample_ball(np.array([1.0, -2.0]), 0.5, 5000, np.random.default_rng(4))
    assert (np.linalg.norm(pts - [1.0, -2.0], axis=1) < 0.5).all()
    assert geom.sample_ball_uniform(np.zeros(3), 1.0, 0).shape == (3,)


def test_sampler_determinism():
    shell = geom.Shell(np.zeros(3), 0.2, 1.0)
    a = geom.sample_shell(shell, 10, np.random.default_rng(9))
    b = geom.sample_shell(shell, 10, np.random.default_rng(9))
    assert np.array_equal(a.points, b.points)


def test_empty_shell_cannot_be_sampled():
    with pytest.raises(geom.DegenerateShellError):
        geom.sample_shell(geom.Shell(np.zeros(2), 1.0, 1.0), 5, 0)


def test_shell_volume():
    assert geom.shell_volume(geom.Shell(np.zeros(2), 0.5, 1.0)) == pytest.approx(math.pi * 0.75)
    assert geom.shell_volume(geom.Shell(np.zeros(2), 1.0, 1.0)) == 0.0


def test_cap_geometry():
    shell = geom.Shell(np.zeros(2), 0.5, 1.0)
    cap = geom.CapSpec(shell, np.array([0.0, 1.0]))
    assert np.allclose(cap.boundary_point, [0.0, 0.5])
    sample = geom.ShellSample(np.array([1.0, 0.0]), 0.8, np.array([0.8, 0.0]))
    assert geom.angle_to(sample, cap) == pytest.approx(math.pi / 2)
    with pytest.raises(DomainError):
        geom.CapSpec(shell, np.array([1.0, 1.0]))


def test_shell_validation():
    with pytest.raises(DomainError):
        geom.Shell(np.zeros(2), 0.1, 0.0)
    with pytest.raises(DomainError):
        geom.Shell(np.zeros(2), -0.1, 1.0)
    assert geom.Shell(np.zeros(2), 2.0, 1.0).is_empty
