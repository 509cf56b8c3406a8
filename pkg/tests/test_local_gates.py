import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emitterdyn.local_gates import (ExchangeGateSpec, FanoGateSpec, GateSpecError,
                                    dephased_fidelity, effective_cooperativity,
                                    exchange_couplings, fano_dip_spec, fano_gate_analysis,
                                    fano_ideal_ratio, fano_max_fidelity_formula,
                                    far_adiabatic_fidelity, gate_numeric_check,
                                    maximize_fano_fidelity, purcell_rates, purcell_rates_formula,
                                    qnm_symmetrize, simple_exchange_fidelity,
                                    single_mode_max_fidelity)


def exchange(C, x, dephasing=0.0, kappa=1.0, g=0.05, **kw):
    gamma = 4 * g * g / (kappa * C)
    return ExchangeGateSpec(g, kappa, x * kappa, gamma, dephasing * gamma, **kw)


def test_exchange_spec_validation():
    with pytest.raises(GateSpecError):
        ExchangeGateSpec(0.0, 1.0, 1.0, 1e-3)
    with pytest.raises(GateSpecError):
        ExchangeGateSpec(0.1, 1.0, 1.0, -1e-3)


def test_exchange_quantities():
    s = exchange(1e5, 3.0, dephasing=10.0)
    assert s.cooperativity == pytest.approx(1e5)
    assert s.effective_cooperativity == pytest.approx(1e5 / (1 + 21 / 16 * 10))
    assert s.coupling == pytest.approx(-2 * 0.05 ** 2 / (6 - 1j))
    assert s.gate_time == pytest.approx(math.pi * 3 / 0.05 ** 2)
    assert effective_cooperativity(1e5, 0.0) == 1e5


def test_no_dephasing_formulas_agree():
    for C in (1e3, 1e5):
        for x in (2.0, 15.0, 200.0):
            assert dephased_fidelity(C, C, x) == pytest.approx(far_adiabatic_fidelity(C, x), abs=1e-14)


@pytest.mark.parametrize("dephasing", [0.0, 10.0])
def test_simple_gate_numeric_vs_effective_cooperativity(dephasing):
    for x in (1.0, 2.0, 5.0, 10.0, 20.0):
        out = gate_numeric_check(exchange(1e5, x, dephasing))
        assert abs(out.fidelity - out.estimates["analytic"]) <= 5e-3


def test_simple_gate_maximum_at_ten_thousand():
    xs = [40.0, 45.0, 50.0, 55.0, 60.0]
    fids = [gate_numeric_check(exchange(1e4, x)).fidelity for x in xs]
    assert xs[int(np.argmax(fids))] == 50.0
    assert max(fids) == pytest.approx(0.9400, abs=1e-3)
    assert single_mode_max_fidelity(1e4) == pytest.approx((1 + math.exp(-2 * math.pi / 100)) ** 2 / 4)


def test_dephased_gate_peak_at_ideal_detuning():
    Ce = exchange(1e5, 1.0, 10.0).effective_cooperativity
    x_opt = 0.5 * math.sqrt(Ce)
    xs = np.linspace(30, 55, 11)
    fids = [gate_numeric_check(exchange(1e5, x, 10.0)).fidelity for x in xs]
    assert abs(xs[int(np.argmax(fids))] - x_opt) <= xs[1] - xs[0]
    assert max(fids) == pytest.approx(single_mode_max_fidelity(Ce), abs=1e-3)
    assert 1 - 2 * math.pi / math.sqrt(Ce) == pytest.approx(0.925, abs=2e-3)


def test_rates_balance_at_fidelity_peak():
    C = 1e5
    xs = np.linspace(20, 300, 2801)
    fids = [far_adiabatic_fidelity(C, x) for x in xs]
    i = int(np.argmax(fids))
    lo, hi = exchange(C, xs[i - 1]), exchange(C, xs[i + 1])
    assert hi.purcell <= lo.gamma <= lo.purcell


def test_short_time_paths_agree():
    s = exchange(1e5, 5.0)
    out = gate_numeric_check(s, t=1e-6 / s.gamma)
    assert out.fidelity == pytest.approx(out.estimates["analytic"], abs=1e-6)
    assert out.fidelity == pytest.approx(0.25, abs=1e-3)


def test_effective_cooperativity_tracks_full_dephasing_formula():
    worst = 0.0
    for C in np.logspace(3, 6, 13):
        for r in np.linspace(0, 30, 31):
            Ce = effective_cooperativity(C, r)
            Cs = C / (1 + 2 * r)
            for x in np.logspace(0, math.log10(5 * math.sqrt(C)), 60):
                worst = max(worst, abs(far_adiabatic_fidelity(Ce, x) - dephased_fidelity(C, Cs, x)))
    assert worst <= 2e-3


def test_overlap_square_root():
    sp = fano_dip_spec(1000, 2000, overlap=0.7, overlap_phase=1.1)
    m = qnm_symmetrize(sp)
    assert np.abs(m.sqrt_overlap @ m.sqrt_overlap - sp.overlap_matrix).max() <= 1e-12


def test_full_overlap_gives_dark_mode():
    sp = fano_dip_spec(1000, 2000)
    kp, km = qnm_symmetrize(sp).rates
    assert km == pytest.approx(0.0, abs=1e-8)
    assert kp == pytest.approx(sum(sp.mode_linewidths), abs=1e-8)


def test_no_overlap_decouples_modes():
    sp = fano_dip_spec(1000, 2000, overlap=0.0)
    m = qnm_symmetrize(sp)
    assert sorted(m.rates) == pytest.approx(sorted(sp.mode_linewidths), abs=1e-12)
    assert abs(m.chi[0, 1]) < 1e-14 and abs(m.chi[1, 0]) < 1e-14
    out = fano_gate_analysis(sp)
    assert not out.conditions["maximal_overlap"]
    assert out.fidelity < fano_gate_analysis(fano_dip_spec(1000, 2000)).fidelity


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(-math.pi, math.pi), st.floats(0.1, 10), st.floats(-20, 20))
def test_loss_rates_nonnegative(s, phase, k1, split):
    sp = FanoGateSpec((split, 0.0), (k1, 1.0), s, phase, ((0.1, 0.1), (0.1, 0.1)), 1e-4)
    kp, km = qnm_symmetrize(sp).rates
    assert km >= -1e-10 and kp >= km


def test_fano_spec_validation():
    with pytest.raises(GateSpecError):
        FanoGateSpec((0, 1), (1, 1), 1.2, 0.0, ((1, 1), (1, 1)), 1e-3)
    with pytest.raises(GateSpecError):
        FanoGateSpec((0, 1), (0, 1), 0.5, 0.0, ((1, 1), (1, 1)), 1e-3)
    with pytest.raises(GateSpecError):
        gate_numeric_check(fano_dip_spec(500, 500), kind="simple")


def test_purcell_rates_two_routes_without_overlap():
    for ph in (0.0, 1.0, 2.5):
        sp = fano_dip_spec(1000, 2000, overlap=0.0, overlap_phase=ph,
                           coupling_phases=((0.3, 0.1), (0.2, 0.5)))
        assert purcell_rates(sp) == pytest.approx(purcell_rates_formula(sp), rel=1e-9)


@pytest.mark.parametrize("phases", [((0.0, 0.0), (0.0, 0.0)), ((0.7, 0.7), (0.2, 0.2))])
def test_dip_phase_condition_suppresses_purcell_rate(phases):
    grid = np.linspace(-math.pi, math.pi, 721)
    ideal = math.pi / 2 - (phases[0][0] - phases[1][0])
    for C1, C2 in ((1000, 2000), (500, 500)):
        rates = np.array([purcell_rates(fano_dip_spec(C1, C2, overlap_phase=p,
                                                      coupling_phases=phases))[0] for p in grid])
        assert rates.min() >= 0
        # the dip sits near, not exactly at, the ideal phase because the detunings are complex
        assert abs(grid[int(np.argmin(rates))] - ideal) <= 0.2
        at_ideal = purcell_rates(fano_dip_spec(C1, C2, overlap_phase=ideal, coupling_phases=phases))[0]
        assert at_ideal <= 1e-2 * rates.max()
    report = fano_gate_analysis(fano_dip_spec(1000, 2000, overlap_phase=ideal,
                                              coupling_phases=phases)).conditions
    assert report["fano_dip_phase"] and report["constructive_exchange"]


def test_mixed_side_detuning_rejected():
    sp = fano_dip_spec(1000, 2000)
    D1, D2 = sp.mode_frequencies
    mixed = FanoGateSpec((D1, -D2), sp.mode_linewidths, 1.0, math.pi / 2, sp.couplings, sp.gamma)
    assert not fano_gate_analysis(mixed).conditions["same_side_detuning"]
    with pytest.raises(GateSpecError):
        fano_gate_analysis(mixed, require_high_fidelity=True)


def test_ideal_conditions_report():
    out = fano_gate_analysis(fano_dip_spec(1000, 2000))
    c = out.conditions
    assert c["constructive_exchange"] and c["same_side_detuning"] and c["dip_detuning"]
    lam12, lam21 = exchange_couplings(fano_dip_spec(1000, 2000))
    assert out.couplings == (lam12, lam21)


@pytest.mark.parametrize("C,threshold", [(150, 0.9), (3600, 0.99)])
def test_cooperativity_thresholds(C, threshold):
    F, _, _ = maximize_fano_fidelity(C, C)
    assert F >= threshold
    assert fano_max_fidelity_formula(C, C) >= threshold


@pytest.mark.parametrize("C1,C2", [(100, 100), (150, 150), (500, 1000), (3600, 3600)])
def test_max_fidelity_formula_vs_optimizer(C1, C2):
    F, _, _ = maximize_fano_fidelity(C1, C2)
    assert F == pytest.approx(fano_max_fidelity_formula(C1, C2), abs=1e-2)


def test_max_fidelity_formula_value():
    x = 4 * math.pi / (3 ** 0.75 * 2 * 60 * 3600 ** 0.25)
    assert fano_max_fidelity_formula(3600, 3600) == pytest.approx((1 + math.exp(-x)) ** 2 / 4)
    assert fano_ideal_ratio(3) == pytest.approx(0.5)


@pytest.mark.parametrize("C1,C2", [(500, 500), (1000, 2000), (2000, 1000)])
def test_fano_numeric_along_dip_line(C1, C2):
    x0 = fano_ideal_ratio(C2)
    for f in (0.75, 1.0, 2.0):
        for dephasing in (0.0, 10.0):
            sp = fano_dip_spec(C1, C2, ratio=f * x0, gamma_star=dephasing * 1e-4)
            out = gate_numeric_check(sp)
            assert abs(out.fidelity - out.estimates["analytic"]) <= 1e-2
