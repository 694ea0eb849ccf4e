import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from escape_gauge.errors import DomainError, PoleProximity, TruncationUnsafe
from escape_gauge.growth import GrowthModel, p_of, p_prime
from escape_gauge.meromap import (
    FunctionParams,
    WebSpec,
    choose_k_max,
    eval_f,
    eval_f_prime,
    eval_g,
    eval_g_prime,
    orbit,
    orbit_many,
    poles_to_csv,
    poles_up_to,
    ring_term_bound_margin,
    web_constant,
    web_points,
    web_sup,
    ESCAPED,
    HIT_POLE,
)

MODEL = GrowthModel(1.0, 1)


@pytest.fixture(scope="module")
def fp():
    return FunctionParams.for_radius(MODEL, 3.2)


def direct_g(z, k_hi=60):
    """Unrearranged series for small |z|; every ring beyond k_hi is below 1e-30 there."""
    total = 0j
    for k in range(MODEL.k0 + 1, k_hi + 1):
        n = math.floor(k * math.log(k))
        p = math.log(k)
        total += 2 * p ** n * z ** n / (z ** (2 * n) - p ** (2 * n))
    return total


def test_truncation_choice_respects_policy():
    k = choose_k_max(MODEL, 1e-12)
    fp = FunctionParams(MODEL, 1, k, 1e-12)
    assert fp.tail_bound <= 1e-12
    with pytest.raises(DomainError):
        FunctionParams(MODEL, 1, MODEL.k0 + 1, 1e-12)
    with pytest.raises(DomainError):
        FunctionParams(MODEL, 0, k, 1e-12)


def test_ring_ten_poles(fp):
    ring = [d for d in poles_up_to(fp, 10) if d.k == 10]
    assert len(ring) == 46
    assert all(abs(abs(d.location) - math.log(10)) <= 1e-12 * math.log(10) for d in ring)


def test_pole_table_invariants(fp):
    poles = poles_up_to(fp, 14)
    assert len(poles) == sum(2 * math.floor(k * math.log(k)) for k in range(9, 15))
    for d in poles:
        p = math.log(d.k)
        assert abs(d.location) == pytest.approx(p, rel=1e-12)
        assert abs(d.residue) == pytest.approx(p / d.n_k, rel=1e-12)
        expected = (p / d.n_k) * np.exp(1j * math.pi * d.l * (1 - d.n_k) / d.n_k)
        assert abs(d.residue - expected) <= 1e-12 * abs(expected)
        # each pole solves z^{2n} = p^{2n} rotated by (-1)^... : u^{n} = (-1)^l p^n
        assert abs((d.location / p) ** d.n_k - (-1) ** d.l) < 1e-9
    locs = np.array([d.location for d in poles])
    gaps = np.abs(locs[:, None] - locs[None, :]) + np.eye(len(locs))
    assert gaps.min() > 0
    keys = [(d.k, d.l) for d in poles]
    assert keys == sorted(keys)


def test_special_pole_positions(fp):
    ring = {d.l: d for d in poles_up_to(fp, 12) if d.k == 12}
    n = ring[0].n_k
    assert ring[0].location == complex(math.log(12), 0.0)
    assert ring[n].location == complex(-math.log(12), 0.0)


def test_csv_columns(fp):
    text = poles_to_csv(poles_up_to(fp, 9))
    lines = text.strip().splitlines()
    assert lines[0] == "k,l,re_u,im_u,re_nu,im_nu,n_k"
    assert len(lines) == 1 + 38


def test_g_at_zero(fp):
    assert eval_g(fp, 0.0)[0] == 0


@pytest.mark.parametrize("z", [0.5 + 0.3j, 1.2 - 0.9j, 2.0 + 0.5j, -1.7 + 0.2j])
def test_g_matches_direct_series(fp, z):
    value, _ = eval_g(fp, z)
    assert abs(value - direct_g(z)) <= 1e-12 * max(1.0, abs(value))


def test_conjugation_symmetry(fp):
    rng = np.random.default_rng(11)
    z = rng.uniform(0.3, 3.0, 100) * np.exp(1j * rng.uniform(-math.pi, math.pi, 100))
    g, _ = eval_g(fp, z)
    gc, _ = eval_g(fp, np.conj(z))
    assert np.allclose(gc, np.conj(g), rtol=1e-13, atol=1e-300)
    d = eval_g_prime(fp, z)
    dc = eval_g_prime(fp, np.conj(z))
    assert np.allclose(dc, np.conj(d), rtol=1e-13, atol=1e-300)
    f, _ = eval_f(FunctionParams(MODEL, 3, fp.k_max), z)
    fc, _ = eval_f(FunctionParams(MODEL, 3, fp.k_max), np.conj(z))
    assert np.allclose(fc, np.conj(f), rtol=1e-12, atol=1e-300)


@pytest.mark.parametrize("k", [9, 12, 20, 40])
def test_ring_term_bound(fp, k):
    p = math.log(k)
    z = 0.4999 * p * np.exp(1j * np.linspace(0, 2 * math.pi, 97))
    z = np.concatenate([z, 0.3 * z])
    assert ring_term_bound_margin(fp, k, z).min() >= 0


def test_residue_limit_single_pole(fp):
    d = next(x for x in poles_up_to(fp, 15) if x.k == 15 and x.l == 7)
    r = 1e-6 * p_prime(MODEL, 15)
    z = d.location + r * np.exp(2j * math.pi * (np.arange(16) + 0.5) / 16)
    g, _ = eval_g(fp, z)
    est = np.mean((z - d.location) * g)
    assert abs(est - d.residue) <= 1e-6 * abs(d.residue)


def test_pole_proximity_and_truncation_errors(fp):
    d = poles_up_to(fp, 10)[5]
    with pytest.raises(PoleProximity) as exc:
        eval_g(fp, d.location)
    assert (exc.value.k, exc.value.l) == (d.k, d.l)
    with pytest.raises(TruncationUnsafe):
        eval_g(fp, fp.safe_radius * 1.01)


def test_eval_f_powers(fp):
    z = 1.3 + 0.4j
    g, _ = eval_g(fp, z)
    f1, _ = eval_f(fp, z)
    assert f1 == g
    fp2 = FunctionParams(MODEL, 2, fp.k_max)
    for x in np.linspace(0.3, 3.0, 25):
        val, _ = eval_f(fp2, float(x))
        assert val.real >= 0 and abs(val.imag) <= 1e-15 * abs(val)


def test_f_blows_up_with_exponent_M():
    fp3 = FunctionParams.for_radius(MODEL, 3.2, M=3)
    d = next(x for x in poles_up_to(fp3, 11) if x.l == 3)
    dist = p_prime(MODEL, 11) * np.geomspace(1e-7, 1e-4, 12)
    z = d.location + dist * np.exp(0.4j)
    f, _ = eval_f(fp3, z)
    slope = np.polyfit(np.log(dist), np.log(np.abs(f)), 1)[0]
    assert slope == pytest.approx(-3.0, abs=1e-3)


def test_tail_flag_near_decision_radius(fp):
    z = 1.1 + 0.2j
    f, _ = eval_f(fp, z)
    _, flag = eval_f(fp, z, radii=[abs(f)])
    assert flag
    _, flag = eval_f(fp, z, radii=[abs(f) * 2 + 1])
    assert not flag


def test_g_prime_matches_finite_differences(fp):
    for z in [0j + 1e-3, 0.8 + 0.1j, 1.9 - 1.1j, 2.6 + 0.05j]:
        h = 1e-6 * abs(z)
        fd = (eval_g(fp, z + h)[0] - eval_g(fp, z - h)[0]) / (2 * h)
        d = eval_g_prime(fp, z)
        assert abs(d - fd) <= 1e-6 * abs(d)


def test_g_prime_at_origin(fp):
    assert eval_g_prime(fp, 0.0) == 0
    fp1 = FunctionParams(MODEL, 1, fp.k_max)
    assert abs(eval_f_prime(fp1, 0.9 + 0.2j) - eval_g_prime(fp, 0.9 + 0.2j)) == 0


def test_tail_soundness_k_max_plus_five(fp):
    bigger = FunctionParams(MODEL, 1, fp.k_max + 5)
    rng = np.random.default_rng(5)
    z = rng.uniform(0, fp.safe_radius, 50) * np.exp(1j * rng.uniform(-3, 3, 50))
    a, tb = eval_g(fp, z)
    b, _ = eval_g(bigger, z)
    assert np.all(np.abs(a - b) <= tb)
    da = eval_g_prime(fp, z)
    db = eval_g_prime(bigger, z)
    assert np.allclose(da, db, rtol=1e-14, atol=1e-300)


def test_web_constant():
    C, c = web_constant(1)
    assert c == pytest.approx(0.240227, abs=1e-6)
    # independent evaluation with a long fixed cut-off
    ks = np.arange(1, 400)
    oracle = np.sum(1 / np.expm1(c * ks)) + np.sum(1 / np.expm1(c * (ks - 0.5)))
    assert C == pytest.approx(oracle, abs=1e-10)


def test_web_points_geometry():
    spec = WebSpec((12, 12), 64, 9)
    pts = web_points(MODEL, 12, spec)
    circle, rays = pts[:64], pts[64:]
    assert np.allclose(np.abs(circle), p_of(MODEL, 12.5), rtol=1e-14)
    n = math.floor(12 * math.log(12))
    assert rays.size == 2 * n * 9
    assert np.all(np.abs(rays) >= p_of(MODEL, 11.5) * (1 - 1e-14))
    assert np.all(np.abs(rays) <= p_of(MODEL, 12.5) * (1 + 1e-14))
    ang = np.angle(rays) % (2 * math.pi)
    eta = (ang * 2 * n / math.pi + 1) / 2
    assert np.allclose(eta, np.round(eta), atol=1e-9)


def test_web_bound_small_range():
    params = FunctionParams.for_radius(MODEL, p_of(MODEL, 13.5))
    rep = web_sup(params, WebSpec((10, 12), 256, 8))
    assert rep.holds and rep.sup_sampled < rep.theoretical_bound
    with pytest.raises(DomainError):
        web_sup(params, WebSpec((8, 12)))


def test_midray_ring_term_at_most_two():
    # on the bisecting rays the own-ring term 2 p^n r^n / (r^{2n} + p^{2n}) never exceeds 1 <= 2
    for m in range(10, 17):
        n = math.floor(m * math.log(m))
        p = math.log(m)
        r = np.linspace(p_of(MODEL, m - 0.5), p_of(MODEL, m + 0.5), 50)
        w = r / p
        assert np.all(2 * w ** n / (w ** (2 * n) + 1) <= 2)


def test_orbit_from_pole_and_zero(fp):
    d = poles_up_to(fp, 11)[3]
    rec = orbit(fp, d.location, [3.0], 10)
    assert rec.status.kind == "hit_pole" and rec.status.step == 0
    assert rec.status.escapes and rec.status.escape_step == 1
    rec0 = orbit(fp, 0.0, [3.0], 10)
    assert rec0.status.kind == "bounded_after"
    assert all(z == 0 for z in rec0.iterates) and len(rec0.iterates) == 11


def test_orbit_near_pole_escapes(fp):
    d = poles_up_to(fp, 12)[9]
    dist = 1e-8 * p_prime(MODEL, 12)
    z0 = d.location + dist
    R = 100.0
    f, _ = eval_f(fp, z0)
    assert abs(f) == pytest.approx(abs(d.residue) / dist, rel=1e-4)
    rec = orbit(fp, z0, [R], 5)
    assert rec.status.kind == "escaped" and rec.status.step == 1
    assert abs(rec.iterates[1]) > R


def test_orbit_statuses_and_validation(fp):
    rec = orbit(fp, 10.0, [20.0], 5)
    assert rec.status.kind == "truncation_unsafe"
    with pytest.raises(DomainError):
        orbit(fp, 1.0, [], 5)
    with pytest.raises(DomainError):
        orbit(fp, 1.0, [3.0, 2.0], 5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-3.1, 3.1))
def test_orbit_many_agrees_with_orbit(r, theta):
    params = FunctionParams.for_radius(MODEL, 3.2)
    z0 = r * complex(math.cos(theta), math.sin(theta))
    kind, step = orbit_many(params, [z0], 3.0, 20)
    rec = orbit(params, z0, [3.0], 20)
    names = {ESCAPED: "escaped", HIT_POLE: "hit_pole", 1: "bounded_after", 3: "truncation_unsafe"}
    assert names[int(kind[0])] == rec.status.kind
    assert int(step[0]) == rec.status.step
