import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from escape_gauge.errors import DomainError
from escape_gauge.growth import (
    GrowthModel,
    d_q_over_q_prime,
    first_nk_at_least_k,
    log_q,
    log_q_prime,
    n_index,
    p_increment,
    p_of,
    p_prime,
    p_prime_monotone_threshold,
    partial_sum_nk,
    pm_threshold,
    q_of,
    q_over_r_q_prime,
    separation_constant,
    separation_grid,
    separation_margin,
)
from escape_gauge.towerscale import iter_exp


@pytest.mark.parametrize("n,expected", [(1, 8), (2, 1619)])
def test_k0_small(n, expected):
    assert GrowthModel(1.0, n).k0 == expected


def test_k0_three_levels_against_mpmath():
    mpmath.mp.dps = 800
    oracle = int(mpmath.floor(mpmath.exp(mpmath.exp(mpmath.exp(2))))) + 1
    assert GrowthModel(1.0, 3).k0 == oracle


def test_model_validation():
    with pytest.raises(DomainError):
        GrowthModel(0.0, 1)
    with pytest.raises(DomainError):
        GrowthModel(1.0, 0)


@pytest.mark.parametrize("rho,n", [(0.5, 1), (1.0, 1), (2.0, 2)])
def test_p_at_domain_endpoint(rho, n):
    m = GrowthModel(rho, n)
    assert p_of(m, iter_exp(n, 2.0)) == pytest.approx(2 ** (1 / rho), rel=1e-12)


def test_p_examples():
    assert p_of(GrowthModel(1, 1), 100) == pytest.approx(math.log(100), rel=1e-15)
    assert p_of(GrowthModel(2, 1), math.exp(4)) == pytest.approx(2.0, rel=1e-15)
    with pytest.raises(DomainError):
        p_of(GrowthModel(1, 1), 5.0)


def test_p_prime_examples():
    assert p_prime(GrowthModel(1, 1), 100) == pytest.approx(0.01, rel=1e-14)
    t = math.exp(math.e)
    assert p_prime(GrowthModel(1, 2), t) == pytest.approx(1 / (t * math.e), rel=1e-14)


@pytest.mark.parametrize("rho,n", [(0.5, 1), (1.0, 1), (2.0, 1), (1.0, 2), (2.0, 2)])
def test_p_prime_matches_central_differences(rho, n):
    m = GrowthModel(rho, n)
    lo = float(iter_exp(n, 2.0)) * 1.5
    for t in np.geomspace(lo, 1e12, 20):
        h = 1e-5 * t
        fd = (p_of(m, t + h) - p_of(m, t - h)) / (2 * h)
        assert p_prime(m, t) == pytest.approx(fd, rel=1e-6)


@settings(max_examples=200)
@given(st.sampled_from([0.5, 1.0, 2.0]), st.sampled_from([1, 2]), st.floats(0.0, 1.0))
def test_p_and_q_are_inverse(rho, n, u):
    m = GrowthModel(rho, n)
    x_hi = 30.0 if n == 1 else 6.0  # keeps q(r) = exp^n(r^rho) inside double range
    r = (2.0 + u * (x_hi - 2.0)) ** (1 / rho)
    q = q_of(m, r)
    assert p_of(m, q) == pytest.approx(r, rel=1e-9)
    t = float(q)
    assert float(q_of(m, p_of(m, t))) == pytest.approx(t, rel=1e-9)


def test_q_examples():
    m = GrowthModel(1, 1)
    assert float(q_of(m, 3)) == pytest.approx(math.exp(3))
    assert float(log_q_prime(m, 3)) == pytest.approx(3.0)
    assert float(log_q(GrowthModel(1, 2), 2)) == pytest.approx(math.exp(2))
    with pytest.raises(DomainError):
        q_of(m, 1.5)


def test_log_q_prime_against_direct_product():
    m = GrowthModel(1.5, 2)
    r = 1.7
    x = r ** 1.5
    direct = math.exp(math.exp(x)) * math.exp(x) * 1.5 * r ** 0.5
    assert float(log_q_prime(m, r)) == pytest.approx(math.log(direct), rel=1e-12)


def test_log_q_prime_extended_range():
    m = GrowthModel(1, 3)
    x = 3.0
    assert float(log_q_prime(m, x)) == pytest.approx(math.exp(math.exp(x)) + math.exp(x) + x, rel=1e-14)
    v = log_q_prime(m, 7.0)
    assert v.depth == 1 and v.mantissa == pytest.approx(math.exp(7), rel=1e-12)


def test_q_over_r_q_prime_tends_to_zero():
    m = GrowthModel(1, 1)
    vals = [q_over_r_q_prime(m, r) for r in (5, 10, 20)]
    assert vals == pytest.approx([0.2, 0.1, 0.05])
    assert vals[0] > vals[1] > vals[2]


@pytest.mark.parametrize("rho,n,r", [(1.0, 1, 500.0), (2.0, 1, 25.0), (1.0, 2, 6.0), (0.5, 1, 2e5)])
def test_derivative_of_q_over_q_prime_small(rho, n, r):
    assert abs(d_q_over_q_prime(GrowthModel(rho, n), r)) < 0.05


def test_n_index_examples():
    assert n_index(GrowthModel(1, 1), 10) == 23
    assert n_index(GrowthModel(1, 1), 100) == 460
    assert n_index(GrowthModel(2, 1), 10) == 46
    with pytest.raises(DomainError):
        n_index(GrowthModel(1, 1), 7)


@given(st.integers(1620, 10**7))
def test_n_index_formula_n2(k):
    m = GrowthModel(1.0, 2)
    expected = math.floor(k * math.log(k) * math.log(math.log(k)))
    assert abs(n_index(m, k) - expected) <= 1


def test_first_nk_at_least_k_reported():
    assert first_nk_at_least_k(GrowthModel(1, 1)) == 8
    k = first_nk_at_least_k(GrowthModel(0.5, 1))
    assert k is not None and math.floor(0.5 * k * math.log(k)) >= k


def test_separation_constant():
    assert separation_constant(1) == pytest.approx(math.log(2) ** 2 / 2)
    assert separation_constant(1) == pytest.approx(0.240227, abs=1e-6)


def test_separation_examples():
    m = GrowthModel(1, 1)
    assert separation_margin(m, 20, 40) >= 0
    assert separation_margin(m, 40, 20.5) >= 0
    with pytest.raises(DomainError):
        separation_margin(m, 5, 20)
    with pytest.raises(DomainError):
        separation_margin(m, 20, 20)


@pytest.mark.parametrize("rho", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("n", [1, 2])
def test_separation_grid_nonnegative_and_matches_scalar(rho, n):
    m = GrowthModel(rho, n)
    ks = np.arange(m.k0 + 1, m.k0 + 201)
    grid = separation_grid(m, ks, ks)
    assert np.nanmin(grid) >= -1e-12
    for i, j in [(0, 5), (150, 3), (10, 199)]:
        assert grid[i, j] == pytest.approx(separation_margin(m, int(ks[i]), float(ks[j])), abs=1e-9)


def test_separation_half_integer_l():
    m = GrowthModel(1, 1)
    for k in range(m.k0 + 1, m.k0 + 60):
        for l in (k + 0.5, k - 0.5):
            if l > m.k0:
                assert separation_margin(m, k, l) >= -1e-12


def test_partial_sum_single_term():
    total, _, _ = partial_sum_nk(GrowthModel(1, 1), 9)
    assert total == 19


def test_partial_sum_ratio_and_trend():
    m = GrowthModel(1, 1)
    assert abs(partial_sum_nk(m, 200)[2] - 1) < 0.10
    ratios = [abs(partial_sum_nk(m, l)[2] - 1) for l in (50, 100, 200, 500)]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))


def test_partial_sum_integral_against_mpmath():
    m = GrowthModel(1, 1)
    _, integral, _ = partial_sum_nk(m, 200)
    oracle = mpmath.quad(lambda t: t * mpmath.log(t), [9, 200])
    assert integral == pytest.approx(float(oracle), rel=1e-6)


def test_partial_sum_domain():
    with pytest.raises(DomainError):
        partial_sum_nk(GrowthModel(1, 1), 8.5)


@pytest.mark.parametrize("rho,n", [(0.5, 1), (1.0, 1), (2.0, 1), (1.0, 2)])
def test_p_half_step_threshold(rho, n):
    m = GrowthModel(rho, n)
    ts = np.geomspace(m.k0 + 1, 1e12, 80)
    t0 = pm_threshold(m, ts)
    assert t0 is not None
    for t in ts[ts >= t0]:
        assert 0.45 * p_prime(m, t) <= p_increment(m, t) <= 0.55 * p_prime(m, t)


def test_p_prime_monotone_threshold_found():
    m = GrowthModel(2.0, 1)
    ts = np.geomspace(m.k0 + 1, 1e8, 50)
    t0 = p_prime_monotone_threshold(m, ts)
    assert t0 is not None
    vals = [p_prime(m, t) for t in ts if t >= t0]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
