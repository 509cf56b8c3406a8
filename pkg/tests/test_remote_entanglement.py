import math

import numpy as np
import pytest

from emitterdyn.models import ThreeLevelDefect as TD
from emitterdyn.photon_counting import BD, PNRD, DetectorSpec
from emitterdyn import remote_entanglement as re


def dephased_pair(gs=0.1):
    d = TD(gamma_up=1.0, gamma_star=gs)
    return (d, d)


def test_spec_validation():
    pair = dephased_pair()
    with pytest.raises(ValueError):
        re.ProtocolSpec("X", pair)
    with pytest.raises(ValueError):
        re.ProtocolSpec("N", (pair[0],))
    with pytest.raises(ValueError):
        re.ProtocolSpec("N", pair, half_area=0.0)
    with pytest.raises(ValueError):
        re.ProtocolSpec("N", pair, half_area=2.0)
    with pytest.raises(ValueError):
        re.ProtocolSpec("N", pair, splitter_angle=-0.1)
    with pytest.raises(ValueError):
        re.ProtocolSpec("N", pair, efficiencies=(1.2, 1.0))
    with pytest.raises(ValueError):
        re.ProtocolSpec("N", pair, window=0.0)


GRID = [(gs, D) for gs in (0.0, 0.1, 0.3) for D in (-0.5, 0.0, 0.7)]


@pytest.mark.parametrize("gs,D", GRID)
def test_coherence_closed_form_matches_numeric(gs, D):
    sp = re.ProtocolSpec("N", (TD(gamma_up=1.0, gamma_star=gs), TD(gamma_up=0.85, gamma_star=gs / 2)),
                         window=3.0, settle=40.0, detuning=D, init_phases=(0.3, 0.0),
                         propagation_phases=(0.0, 0.1), efficiencies=(0.7, 0.9), half_area=0.5,
                         splitter_angle=0.6)
    num = re.numeric_coherence(sp)
    ref = re.coherence_factor(sp)
    assert abs(num - ref) / abs(ref) <= 1e-3
    table = re.conditional_states_N(sp)
    ens = re._count_ensemble(sp)
    for k, m in table.single.items():
        assert np.abs(m - ens.states[k].matrix).max() <= 1e-6
    assert np.abs(table.vacuum - ens.states[(0, 0)].matrix).max() <= 1e-6
    double = sum(r.matrix for k, r in ens.states.items() if sum(k) == 2)
    assert np.abs(table.double - double).max() <= 1e-6
    assert np.trace(table.total()).real == pytest.approx(1.0, abs=1e-12)


def test_coherence_magnitude_for_equal_emitters():
    ens = re._count_ensemble(re.ProtocolSpec("N", dephased_pair(), window=20.0))
    for k in ((1, 0), (0, 1)):
        assert abs(ens.states[k].matrix[re.UP_DOWN, re.DOWN_UP]) == pytest.approx(0.1042, abs=5e-5)


@pytest.mark.parametrize("proto", ["N", "T", "P"])
def test_conditional_decomposition_complete(proto):
    pair = dephased_pair() if proto != "P" else (TD(gamma_up=0.5, gamma_down=0.5, gamma_star=0.1),) * 2
    out = re.run_protocol(re.ProtocolSpec(proto, pair, window=20.0, efficiencies=(0.8, 0.6)))
    d = out.diagnostics
    assert d["p0"] + d["p1"] + d["p_total2"] + d["p3plus"] == pytest.approx(1.0, abs=1e-6)
    assert 0 <= out.fidelity <= 1 and 0 <= out.efficiency <= 1


@pytest.mark.parametrize("proto,F", [("N", 11 / 12), ("T", (1 + 25 / 36) / 2), ("P", 11 / 12)])
def test_optical_limits_match_long_window(proto, F):
    pair = dephased_pair() if proto != "P" else (TD(gamma_up=0.5, gamma_down=0.5, gamma_star=0.1),) * 2
    sp = re.ProtocolSpec(proto, pair, window=20.0)
    out = re.run_protocol(sp)
    assert out.optical[0] == pytest.approx(F, abs=1e-12)
    assert out.fidelity == pytest.approx(F, abs=1e-3)
    if proto == "N":
        assert re.coherence_factor(sp, np.inf) == pytest.approx(5 / 6)


@pytest.mark.parametrize("eta", [1.0, 0.5, 0.1])
def test_time_bin_fidelity_ignores_loss(eta):
    sp = re.ProtocolSpec("T", (TD(gamma_up=1.0, gamma_star=0.05), TD(gamma_up=0.85, gamma_star=0.02)),
                         window=2.0, efficiencies=(eta, eta), detuning=0.3)
    out = re.run_protocol(sp)
    assert out.fidelity == pytest.approx(0.9415864578, abs=1e-6)
    F, E = re.time_bin_fidelity(sp)
    assert F == pytest.approx(out.fidelity, abs=1e-6)
    assert E == pytest.approx(out.efficiency, rel=1e-6)


def test_time_bin_thermal_limit():
    d = TD(gamma_up=1.0, gamma_spin=0.5, excite_spin=0.5)
    out = re.run_protocol(re.ProtocolSpec("T", (d, d), window=60.0))
    assert out.fidelity == pytest.approx(0.25, abs=1e-3)
    assert out.efficiency == pytest.approx(0.25, abs=1e-3)


@pytest.mark.parametrize("eta", [1.0, 0.7])
def test_polarization_ideal_measurement(eta):
    d = TD(gamma_up=0.5, gamma_down=0.5)
    out = re.run_protocol(re.ProtocolSpec("P", (d, d), window=30.0, efficiencies=(eta, eta)))
    assert out.fidelity == pytest.approx(1.0, abs=1e-9)
    assert out.efficiency == pytest.approx(eta ** 2 / 2, abs=1e-9)


def test_unequal_rates_overlap_and_ordering():
    sp = re.ProtocolSpec("N", (TD(gamma_up=1.0), TD(gamma_up=0.85)))
    b = re.protocol_bounds(sp)
    assert b["M12"] == pytest.approx(4 * 0.85 / 1.85 ** 2, abs=1e-12)
    assert b["M12"] == pytest.approx(0.9934, abs=1e-4)
    assert b["M12"] < b["F_T"] < b["F_N"] and b["ordered"]
    # without dephasing both two-photon protocols sit at (1 + M)/2 and N at the upper bound
    assert b["F_T"] == pytest.approx(b["F_P"], abs=1e-12)
    assert b["F_T"] == pytest.approx((1 + b["M12"]) / 2, abs=1e-12)
    assert b["F_N"] == pytest.approx(b["upper"], abs=1e-12)
    same = re.ProtocolSpec("N", (TD(gamma_up=1.0),) * 2)
    assert re.spec_overlap(same) == pytest.approx(1.0)


def test_ordering_at_random_points():
    rng = np.random.default_rng(7)
    for _ in range(30):
        g1, g2 = rng.uniform(0.2, 2.0, 2)
        s1, s2 = rng.uniform(0, 1.0, 2)
        sp = re.ProtocolSpec("N", (TD(gamma_up=g1, gamma_star=s1), TD(gamma_up=g2, gamma_star=s2)),
                             detuning=rng.uniform(-1, 1))
        assert re.protocol_bounds(sp)["ordered"]


@pytest.mark.parametrize("up,down", [(0.2, 0.2), (0.3, -0.1)])
def test_polarization_detunings(up, down):
    p1 = TD(gamma_up=0.6, gamma_down=0.4, gamma_star=0.05)
    p2 = TD(gamma_up=0.3, gamma_down=0.55, gamma_star=0.02)
    sp = re.ProtocolSpec("P", (p1, p2), window=40.0, detuning=down, detuning_up=up)
    out = re.run_protocol(sp)
    assert out.fidelity == pytest.approx(out.optical[0], abs=1e-4)
    if up == down:
        assert out.optical[0] == pytest.approx((1 + re.spec_overlap(sp)) / 2, abs=1e-12)


def test_noiseless_detectors_leave_outcome_unchanged():
    sp = re.ProtocolSpec("N", dephased_pair(), window=10.0, efficiencies=(0.6, 0.6))
    out = re.run_protocol(sp)
    F, E = re.noisy_measurement_adjust(out, [DetectorSpec(PNRD, dark_rate=0.0)])
    assert F == pytest.approx(out.fidelity, abs=1e-12)
    assert E == pytest.approx(out.efficiency, abs=1e-12)
    with pytest.raises(ValueError):
        re.noisy_measurement_adjust(out, [DetectorSpec(PNRD, dark_rate=0.1)], window=10.0)


@pytest.mark.parametrize("kind", [PNRD, BD])
def test_dark_count_closed_form_matches_numeric(kind):
    eta, pd, T = 0.5, 1e-5, 20.0
    det = DetectorSpec(kind, dark_rate=pd / T)
    p0, p1 = re.dark_probabilities(pd / T, T)
    d = TD(gamma_up=1.0)
    for th in (0.05, 0.3):
        sp = re.ProtocolSpec("N", (d, d), window=T, half_area=th, efficiencies=(eta, eta),
                             detectors=(det, det), settle=20.0)
        out = re.run_protocol(sp)
        F, E = re.number_fidelity_noisy(eta, th, 1.0, p0, p1, kind, 1.0)
        assert out.fidelity == pytest.approx(F, rel=1e-3)
        assert out.efficiency == pytest.approx(E, rel=1e-3)


def test_noise_optimal_half_area():
    p0, p1 = re.dark_probabilities(1e-5 / 20.0, 20.0)
    best = re.optimize_half_area(lambda th: re.number_fidelity_noisy(0.5, th, 1.0, p0, p1)[0])
    est = re.optimal_half_area(p1, 0.5)
    assert est == pytest.approx((1e-5 / 0.25) ** 0.25, rel=1e-4)
    assert est == pytest.approx(0.0795, abs=1e-4)
    assert best == pytest.approx(est, rel=0.05)
    best_bd = re.optimize_half_area(
        lambda th: re.number_fidelity_noisy(1.0, th, 1.0, p0, p1, BD, 1.0)[0], upper=0.3)
    assert best_bd == pytest.approx((2 * p1) ** 0.25, rel=0.05)
    with pytest.raises(ValueError):
        re.optimal_half_area(p1, 1.0, PNRD)


def test_phase_average_against_sampling():
    sp = re.ProtocolSpec("N", dephased_pair(), window=20.0)
    f = re.closed_form_evaluator("N", sp)
    avg = re.environmental_averages(f, phase_sigma=0.5)
    # brute-force sampling of the phase error with the numeric coherence
    Ct = re.numeric_coherence(sp.with_(settle=20.0))
    phases = np.random.default_rng(3).normal(0.0, 0.5, 100_000)
    samples = 0.5 * (1 + np.real(Ct * np.exp(1j * phases)))
    assert avg == pytest.approx(samples.mean(), abs=4 * samples.std() / math.sqrt(phases.size))
    assert (2 * avg - 1) / Ct.real == pytest.approx(math.exp(-0.125), rel=1e-6)


def test_phase_crossover():
    sp = re.ProtocolSpec("N", (TD(gamma_up=1.0, gamma_star=0.1), TD(gamma_up=0.85, gamma_star=0.05)))
    var = re.phase_crossover(sp)
    G1, G2 = sp.defects[0].Gamma, sp.defects[1].Gamma
    assert var == pytest.approx(math.log((G1 + G2) ** 2 / (4 * 1.0 * 0.85)))
    FN = re.environmental_averages(re.closed_form_evaluator("N", sp), phase_sigma=math.sqrt(var))
    FT = re.environmental_averages(re.closed_form_evaluator("T", sp), phase_sigma=math.sqrt(var))
    assert FN == pytest.approx(FT, abs=1e-8)


def test_zero_diffusion_is_identity():
    sp = re.ProtocolSpec("T", dephased_pair(), detuning=0.2)
    f = re.closed_form_evaluator("T", sp)
    assert re.environmental_averages(f) == f(0.0, 0.0)
    assert re.environmental_averages(f, diffusion_sigma=(0.1, 0.0)) < f(0.0, 0.0)


def test_quadrature_failure_reported():
    with pytest.raises(re.QuadratureError):
        re.environmental_averages(lambda s, p: math.cos(40 * p), phase_sigma=1.0, nodes=5)


def fibre_link_spec(proto):
    sr, sd, pd, T = 5e-7, 1e-6, 1e-5, 5.0
    P = proto == "P"

    def mk(g):
        if P:
            return TD(gamma_up=g / 2, gamma_down=g / 2, gamma_star=0.002, gamma_spin=sr,
                      excite_spin=sr, gamma_star_spin=sd)
        return TD(gamma_up=g, gamma_star=0.002, gamma_spin=sr, excite_spin=sr, gamma_star_spin=sd)
    det = DetectorSpec(BD if proto == "N" else PNRD, dark_rate=pd / T)
    return re.ProtocolSpec(proto, (mk(1.0), mk(0.85)), window=T, detuning=0.02,
                           half_area=math.pi / 8, detectors=(det,), attenuation_length=22e3,
                           time_unit=1e-8)


def test_distance_sweep_transmission():
    rows = re.distance_sweep(fibre_link_spec("N"), [0.0, 44.0], 0.999)
    assert rows[0].eta == pytest.approx(0.999)
    assert rows[1].eta == pytest.approx(0.0999, rel=1e-12)
    assert rows[1].t_f_s == pytest.approx(5e-8 + 44e3 / 2e8, rel=1e-9)
    base = re.run_protocol(fibre_link_spec("N").with_(efficiencies=(0.999, 0.999)))
    assert rows[0].F_gen == pytest.approx(base.fidelity, abs=1e-12)


def test_distance_efficiency_ordering():
    eff = {p: re.distance_sweep(fibre_link_spec(p), [100.0], 0.999)[0].eta_gen for p in "NTP"}
    assert eff["N"] > 30 * eff["T"] and eff["N"] > 30 * eff["P"]
