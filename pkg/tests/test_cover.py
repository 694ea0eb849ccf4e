import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from escape_gauge.cover import (
    CoverChain,
    all_chain_diameters,
    MassParams,
    annulus_delta,
    annulus_density,
    branch_derivative,
    chain_bound,
    chain_diameter,
    chordal,
    chordal_diameter,
    inverse_branch,
    key_series,
    koebe_margin,
    ledgers_to_json,
    mass_sequence,
    required_R0,
    sandwich_check,
)
from escape_gauge.errors import DomainError
from escape_gauge.growth import GrowthModel, p_of
from escape_gauge.meromap import FunctionParams, eval_f, poles_up_to, web_constant
from escape_gauge.towerscale import GaugeSpec

MODEL = GrowthModel(1.0, 1)


@pytest.fixture(scope="module")
def fp():
    return FunctionParams.for_radius(MODEL, p_of(MODEL, 16))


@pytest.fixture(scope="module")
def R0():
    C, _ = web_constant(1)
    return 4 * C + 4


def test_mass_params_constants():
    m = MassParams()
    assert m.tau == pytest.approx(2.070796, abs=1e-6)
    assert m.alpha == pytest.approx(1 / (16 * 1.1 * 324 ** 2 * m.tau ** 2), rel=1e-15)
    assert m.B == pytest.approx(m.alpha / (81 * 256), rel=1e-15)
    assert m.A == pytest.approx(32 * 4 * 12)
    assert MassParams(M=2).A == pytest.approx(32 * 2 ** 1.5 * 12)
    for l in range(0, 6):
        assert m.log_R(l) == math.log(50.0) + 2.0 ** l
        assert float(m.R(l)) == pytest.approx(50.0 * math.exp(2.0 ** l), rel=1e-14)
    with pytest.raises(DomainError):
        MassParams(R0=1.0)
    with pytest.raises(DomainError):
        MassParams(lam=0.0)


@pytest.mark.parametrize("M", [1, 2])
def test_delta_ratio(M):
    ledger = mass_sequence(MODEL, GaugeSpec(1, 7.0), MassParams(M=M), L=8)
    d = [lv.log_delta for lv in ledger.levels]
    for l in range(1, 7):
        assert d[l - 1] - d[l] == pytest.approx(2.0 ** l * 2.0 / M, rel=1e-12)


def test_inverse_branch_forward_residual(fp, R0):
    rng = np.random.default_rng(3)
    for pole in [d for d in poles_up_to(fp, 11) if d.l in (0, 5)]:
        z = rng.uniform(R0, 10 * R0, 30) * np.exp(1j * rng.uniform(-math.pi, math.pi, 30))
        w = inverse_branch(fp, pole, z, R0=R0)
        f, _ = eval_f(fp, w)
        assert np.all(np.abs(f - z) <= 1e-9 * np.abs(z))
        assert np.all(np.abs(w - pole.location) <= 2 * abs(pole.residue) / R0)
        assert np.all(koebe_margin(fp, pole, z, w) >= -1e-10)


def test_inverse_branch_rejects_small_targets(fp, R0):
    pole = poles_up_to(fp, 9)[0]
    with pytest.raises(DomainError):
        inverse_branch(fp, pole, 0.5 * R0, R0=R0)
    with pytest.raises(DomainError):
        inverse_branch(fp, pole, 2 * R0, root_branch=1, R0=R0)


def test_m2_branches_are_distinct():
    fp2 = FunctionParams.for_radius(MODEL, p_of(MODEL, 16), M=2)
    pole = [d for d in poles_up_to(fp2, 10) if d.l == 4][0]
    z = 150.0 + 40.0j
    w0 = inverse_branch(fp2, pole, z, 0, R0=100.0)
    w1 = inverse_branch(fp2, pole, z, 1, R0=100.0)
    assert abs(w0 - w1) > 1e-3 * abs(pole.residue) / math.sqrt(abs(z))
    r = 2 * abs(pole.residue) / math.sqrt(100.0)
    for w in (w0, w1):
        f, _ = eval_f(fp2, w)
        assert abs(f - z) <= 1e-9 * abs(z)
        assert abs(w - pole.location) <= r


def test_branch_derivative_matches_finite_difference(fp, R0):
    pole = [d for d in poles_up_to(fp, 12) if d.k == 12 and d.l == 3][0]
    z = 3 * R0 * np.exp(0.7j)
    h = 1e-5 * abs(z)
    w = inverse_branch(fp, pole, z, R0=R0)
    fd = (inverse_branch(fp, pole, z + h, R0=R0) - inverse_branch(fp, pole, z - h, R0=R0)) / (2 * h)
    d = branch_derivative(fp, w)
    assert abs(d - fd) <= 1e-6 * abs(d)
    assert abs(d) <= 12 * abs(pole.residue) / abs(z) ** 2


@pytest.mark.parametrize("k", [9, 11, 13])
def test_sandwich_single_pole(fp, k, R0):
    pole = [d for d in poles_up_to(fp, k) if d.k == k][0]
    rep = sandwich_check(fp, pole, R0)
    assert rep["holds"]
    assert rep["inner_radius"] < rep["outer_radius"]


def test_chain_of_length_two(fp, R0):
    poles = poles_up_to(fp, 12)
    outer = [d for d in poles if d.k == 12 and d.l == 7][0]
    inner = [d for d in poles if d.k == 10 and d.l == 0][0]
    chain = CoverChain((inner, outer), (R0, R0))
    assert not chain.admissible()  # desk-scale poles sit far inside B(R0)
    chain = CoverChain((inner, outer), (2.0, 2.0))
    assert chain.admissible()
    measured, bound = chain_diameter(fp, chain)
    assert 0 < measured <= bound
    assert bound == pytest.approx(chain_bound(chain, 1))
    with pytest.raises(DomainError):
        chain_diameter(fp, CoverChain((inner, outer), (R0, R0)))


def test_chain_length_one_matches_outer_disk(fp):
    pole = poles_up_to(fp, 10)[7]
    chain = CoverChain((pole,), (2.0,))
    measured, bound = chain_diameter(fp, chain)
    euclid = 2 * 2 * abs(pole.residue) / 2.0
    assert measured <= euclid * (1 + 1e-12)
    assert measured <= bound


@settings(max_examples=200, deadline=None)
@given(st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False))
def test_chordal_dominated_by_euclidean(z, w):
    d = float(chordal(z, w))
    assert d <= abs(z - w) * (1 + 1e-12) + 1e-300
    assert d <= 1 + 1e-12
    assert float(chordal(w, z)) == d


def test_chordal_diameter_of_circle():
    pts = 0.1 * np.exp(2j * math.pi * np.arange(64) / 64)
    assert chordal_diameter(pts) == pytest.approx(0.2 / (1 + 0.01), rel=1e-12)


def test_key_series_c_definition_and_bins(fp):
    led = key_series(fp, GaugeSpec(1, 1.0), l_max=3)
    assert [b.l for b in led.bins] == [1, 2, 3]
    # first bin by direct summation over its rings
    ks = [k for k in range(9, 10_000) if 2 < math.log(k) <= 4]
    c = sum(2 * math.floor(k * math.log(k)) * (1 / (math.log(k) * math.floor(k * math.log(k)))) ** 2
            for k in ks)
    assert led.bins[0].sum_c == pytest.approx(c, rel=1e-10)
    for b in led.bins:
        assert b.c_holds and b.jensen_holds and b.complete
    assert led.decay_factor < 0.9


def test_key_series_truncation_and_mismatch(fp):
    led = key_series(fp, GaugeSpec(1, 1.0), l_max=3, j_max=10_000)
    assert led.bins[0].complete is False or led.bins[0].card <= 10_000
    assert not led.bins[-1].complete
    with pytest.raises(DomainError):
        key_series(fp, GaugeSpec(2, 1.0))


def test_key_series_gamma_four_decays_slower(fp):
    lo = key_series(fp, GaugeSpec(1, 1.0), l_max=3)
    hi = key_series(fp, GaugeSpec(1, 4.0), l_max=3)
    assert hi.decay_factor > lo.decay_factor
    assert hi.skipped_leading > 0


def test_mass_sequence_gamma_seven_decreasing():
    led = mass_sequence(MODEL, GaugeSpec(1, 7.0), MassParams(), L=12)
    assert led.strictly_decreasing(4, 12)
    assert led.exponent == pytest.approx(-1.0)


def test_mass_sequence_asymptotic_ratio():
    led = mass_sequence(MODEL, GaugeSpec(1, 1.0), MassParams(), L=12)
    # log(1/d_l) ~ R_{l-1}^rho: the log-ratio shrinks relative to log R_{l-1}
    rel = [abs(lv.asymptotic_ratio_log) / MassParams().log_R(lv.l - 1) for lv in led.levels]
    assert rel[-1] < rel[2] and rel[-1] < 0.05


def test_mass_sequence_requires_large_R0():
    gauge = GaugeSpec(1, 9.0)
    need = required_R0(MODEL, gauge, MassParams(R0=2.0))
    with pytest.raises(DomainError):
        mass_sequence(MODEL, gauge, MassParams(R0=need * 0.9), L=4)
    mass_sequence(MODEL, gauge, MassParams(R0=need * 1.01), L=4)


def test_annulus_delta_closed_form():
    for eps in (0.01, 0.1, 0.2):
        outer = 3.0
        inner = 4 * (1 - eps) ** 2 - (1 + eps) ** 2
        assert 1 + annulus_delta(eps) == pytest.approx(outer / inner, rel=1e-15)
    with pytest.raises(DomainError):
        annulus_delta(0.3)


def test_annulus_density_bound(fp):
    S = p_of(MODEL, MODEL.k0 + 4)
    rep = annulus_density(fp, S, 0.05, R=2.0)
    assert rep.holds and rep.b2_holds
    with pytest.raises(DomainError):
        annulus_density(fp, 0.1, 0.05, R=2.0)


def test_ledgers_json_round_trip(fp):
    key = key_series(fp, GaugeSpec(1, 1.0), l_max=2)
    mass = mass_sequence(MODEL, GaugeSpec(1, 7.0), MassParams(), L=5)
    doc = json.loads(ledgers_to_json(key, mass))
    assert set(doc["key_series"][0]) >= {"l", "S_l", "jensen_bound", "cum_sum"}
    assert set(doc["mass_sequence"][0]) >= {"l", "log_inv_d_l", "log_delta_l", "log_product"}
    assert ledgers_to_json(key, mass) == ledgers_to_json(key, mass)


def test_all_chains_agree_with_single_chain(fp):
    poles = [d for d in poles_up_to(fp, 10) if d.l in (0, d.n_k // 2)]
    res = all_chain_diameters(fp, poles, 2.0, max_length=2, samples=(64, 64))
    assert len(res) == 4 + 16
    table = {key: (m, b) for key, m, b in res}
    for key in [(1,), (0, 3), (2, 2)]:
        chain = CoverChain(tuple(poles[j] for j in key), (2.0,) * len(key))
        m, b = chain_diameter(fp, chain, samples=64)
        assert table[key] == (m, b)
    assert all(m <= b for m, b in table.values())


def test_anchor_branch_is_step_independent(fp):
    from escape_gauge.cover import _continue_along_ray
    pole = poles_up_to(fp, 9)[0]
    z = np.array([2.3j, -2.4 + 0.1j, 2.5 * np.exp(0.3j)])
    a = _continue_along_ray(fp, pole.location, pole.residue, z, h0=0.2, h_max=1.0)
    b = _continue_along_ray(fp, pole.location, pole.residue, z, h0=0.005, h_max=0.02)
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    f, _ = eval_f(fp, a)
    assert np.all(np.abs(f - z) <= 1e-12 * np.abs(z))
