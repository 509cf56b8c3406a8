"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed together in the
terminal summary (see conftest.py) and also on stdout as each test finishes.
"""
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.linalg import expm

import oracles
from emitterdyn import local_gates as gates
from emitterdyn import remote_entanglement as remote
from emitterdyn.cli import preset_names
from emitterdyn.models import (FWHM, CavityEmitter, SquarePulse, ThreeLevelDefect, TwoLevelEmitter,
                               appendix_beta, build_liouvillian, pulsed_p0)
from emitterdyn.photon_counting import (PNRD, DetectorSpec, conditional_propagate,
                                        continue_propagation, stacked_generator,
                                        total_number_distribution)
from emitterdyn.photonic_state import (TimeGrid, default_grid, one_photon_density,
                                       phi_plus_construction, pulse_statistics,
                                       self_homodyne_decompose, time_bin_analysis)

RESULTS = {}


def record(n, ok, detail):
    ok = bool(ok)
    RESULTS[n] = (ok, detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def counting_moments(model, t_end, n_max=6):
    ens = conditional_propagate(build_liouvillian(model, t_end + 1), [model.channel()],
                                model.ground(), 0.0, t_end, n_max)
    p = total_number_distribution(ens)
    n = np.arange(p.size)
    mu = n @ p
    return mu, (n * (n - 1)) @ p / mu ** 2


def test_criterion_01_brightness():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        g, kappa = rng.uniform(0.05, 2.0), rng.uniform(0.2, 5.0)
        gamma, gs = 10 ** rng.uniform(-3, -0.3), rng.uniform(0.0, 1.0)
        ce = CavityEmitter(g, kappa, gamma, gs, convention=FWHM)
        _, a = ce.operators()
        rho_int = oracles.decayed_integral(ce.liouvillian().matrix, oracles.vec(ce.excited().matrix))
        numeric = kappa * np.trace((a.dag @ a).matrix @ rho_int.reshape(4, 4)).real
        worst = max(worst, abs(appendix_beta(g, kappa, gamma, gs) - numeric) / numeric)
    record(1, worst <= 1e-6, f"max relative beta error {worst:.2e} over 20 points (<= 1e-6)")


def test_criterion_02_dephased_indistinguishability():
    errs = []
    for gs, expected in ((1 / 8, 0.800), (0.1, 0.833)):
        e = TwoLevelEmitter(1.0, gs)
        P = one_photon_density(e, default_grid(e, points=1200)).purity()
        errs.append(abs(P - expected))
    record(2, max(errs) <= 2e-3, f"|I - 0.800|, |I - 0.833| = {errs[0]:.1e}, {errs[1]:.1e} (<= 2e-3)")


def test_criterion_03_pulsed_vacuum_probability():
    rng = np.random.default_rng(11)
    points = [(rng.uniform(0.05, 0.45), rng.uniform(0.5, 5.0)) for _ in range(3)]
    points += [(rng.uniform(0.6, 60.0), 10 ** rng.uniform(-2, 0.5)) for _ in range(7)]
    worst = 0.0
    for rabi, tp in points:
        e = TwoLevelEmitter(1.0, drive=SquarePulse(rabi, tp))
        t_end = tp + 45.0
        ens = conditional_propagate(build_liouvillian(e, t_end + 1), [e.channel()], e.ground(),
                                    0.0, t_end, 3)
        worst = max(worst, abs(ens.trace((0,)) - pulsed_p0(rabi, tp, 1.0)))
    record(3, worst <= 1e-8, f"max |p0 exact - p0 counted| {worst:.1e} over 10 points, 3 below gamma/2")


def test_criterion_04_photon_statistics_identities():
    tp, worst_mu, worst_g2 = 0.1, 0.0, 0.0
    for k in (1, 2, 3):
        e = TwoLevelEmitter(1.0, drive=SquarePulse(k * math.pi / tp, tp))
        on, off = e.liouvillian(e.drive.rabi).matrix, e.liouvillian().matrix
        mu_ref, G2 = oracles.intensity_moments([(tp, on), (50.0, off)],
                                               e.channel().operator.matrix, e.ground().matrix)
        mu, g2 = counting_moments(e, 50.0 + tp)
        stats = pulse_statistics(e, default_grid(e, points=1200))
        worst_mu = max(worst_mu, abs(mu - mu_ref), abs(stats.mu - mu))
        worst_g2 = max(worst_g2, abs(g2 - G2 / mu_ref ** 2), abs(stats.g2 - g2))
    record(4, max(worst_mu, worst_g2) <= 1e-4,
           f"max |d mu| {worst_mu:.1e}, max |d g2| {worst_g2:.1e} for areas pi, 2pi, 3pi")


def test_criterion_05_hom_slope_and_bounds():
    gs = 0.05
    I = 1 / (1 + 2 * gs)
    G, V, bound_ok = [], [], True
    for tp in np.geomspace(1e-3, 1e-1, 8):
        e = TwoLevelEmitter(1.0, gs, drive=SquarePulse(math.pi / tp, tp))
        grid = default_grid(e)
        r = pulse_statistics(e, grid)
        P = one_photon_density(e, grid).purity()
        G.append(r.g2)
        V.append(r.V_HOM)
        bound_ok &= r.V_HOM + r.g2 <= P <= (r.V_HOM + r.g2) / (1 - r.g2) + 1e-3
    slope = np.polyfit(G, V, 1)[0]
    rel = abs(slope + (1 + I)) / (1 + I)
    record(5, rel <= 0.02 and bound_ok,
           f"slope {slope:.4f} vs -(1+I) = {-(1 + I):.4f} ({100 * rel:.2f}%); bounds hold: {bound_ok}")


def test_criterion_06_superoperator_identities():
    e = TwoLevelEmitter(1.0, 0.2, omega=0.3)
    L, ch = e.liouvillian(1.7).matrix, e.channel()
    big, _ = stacked_generator(L, [ch], 2)
    E = expm(big * 1.3)
    ref = oracles.no_jump_blocks(L, ch.jump, 1.3, 2)
    blocks = max(np.abs(E[4 * n:4 * n + 4, :4] - ref[n]).max() for n in range(3))
    first, second = oracles.two_jump_orderings(L, ch.jump, 1.1)
    order = np.abs(first - second).max()
    whole = conditional_propagate(L, [ch], e.ground(), 0, 2.0, 2)
    joined = continue_propagation(L, [ch], conditional_propagate(L, [ch], e.ground(), 0, 0.7, 2),
                                  0.7, 2.0)
    comp = max(np.abs(whole.states[k].matrix - joined.states[k].matrix).max() for k in whole.states)
    worst = max(blocks, order, comp)
    record(6, worst <= 1e-8,
           f"Dyson blocks {blocks:.1e}, order invariance {order:.1e}, composition {comp:.1e}")


def test_criterion_07_protocol_optical_limits():
    d = ThreeLevelDefect(gamma_up=1.0, gamma_star=0.1)
    dp = ThreeLevelDefect(gamma_up=0.5, gamma_down=0.5, gamma_star=0.1)
    gaps = {}
    for proto, pair in (("N", (d, d)), ("T", (d, d)), ("P", (dp, dp))):
        out = remote.run_protocol(remote.ProtocolSpec(proto, pair, window=20.0))
        gaps[proto] = abs(out.fidelity - out.optical[0])
    rng = np.random.default_rng(5)
    ordered = 0
    for _ in range(30):
        g1, g2 = rng.uniform(0.2, 2.0, 2)
        s1, s2 = rng.uniform(0, 1.0, 2)
        sp = remote.ProtocolSpec("N", (ThreeLevelDefect(gamma_up=g1, gamma_star=s1),
                                       ThreeLevelDefect(gamma_up=g2, gamma_star=s2)),
                                 detuning=rng.uniform(-1, 1))
        ordered += remote.protocol_bounds(sp)["ordered"]
    worst = max(gaps.values())
    record(7, worst <= 1e-3 and ordered == 30,
           f"|dF| N {gaps['N']:.1e}, T {gaps['T']:.1e}, P {gaps['P']:.1e}; ordering {ordered}/30")


def test_criterion_08_loss_robustness_and_noise_optimum():
    d1 = ThreeLevelDefect(gamma_up=1.0, gamma_star=0.05)
    d2 = ThreeLevelDefect(gamma_up=0.85, gamma_star=0.02)
    F = [remote.run_protocol(remote.ProtocolSpec("T", (d1, d2), window=2.0, efficiencies=(eta, eta),
                                                 detuning=0.3)).fidelity for eta in (1.0, 0.5, 0.1)]
    spread = max(F) - min(F)
    eta, pd, T = 0.5, 1e-5, 20.0
    det = DetectorSpec(PNRD, dark_rate=pd / T)
    _, p1 = remote.dark_probabilities(pd / T, T)
    base = remote.ProtocolSpec("N", (ThreeLevelDefect(gamma_up=1.0),) * 2, window=T,
                               efficiencies=(eta, eta), detectors=(det, det), settle=20.0)
    best = remote.optimize_half_area(
        lambda th: remote.run_protocol(base.with_(half_area=th)).fidelity, upper=0.3, xatol=1e-5)
    est = remote.optimal_half_area(p1, eta)
    rel = abs(best - est) / best
    record(8, spread <= 1e-6 and rel <= 0.05,
           f"T fidelity spread over eta {spread:.1e}; N optimum {best:.4f} vs estimate {est:.4f} "
           f"({100 * rel:.2f}%)")


def exchange(C, x, dephasing=0.0):
    g, kappa = 0.05, 1.0
    gamma = 4 * g * g / (kappa * C)
    return gates.ExchangeGateSpec(g, kappa, x * kappa, gamma, dephasing * gamma)


def test_criterion_09_simple_gate():
    gap = max(abs(o.fidelity - o.estimates["analytic"])
              for o in (gates.gate_numeric_check(exchange(1e5, x, r))
                        for r in (0.0, 10.0) for x in (1.0, 2.0, 5.0, 10.0, 20.0)))
    Ce = exchange(1e5, 1.0, 10.0).effective_cooperativity
    xs = np.linspace(30, 55, 11)
    peak = xs[int(np.argmax([gates.gate_numeric_check(exchange(1e5, x, 10.0)).fidelity for x in xs]))]
    peak_ok = abs(peak - 0.5 * math.sqrt(Ce)) <= xs[1] - xs[0]
    top = max(gates.gate_numeric_check(exchange(1e4, x)).fidelity for x in (45.0, 50.0, 55.0))
    formula = (1 + math.exp(-2 * math.pi / 100)) ** 2 / 4
    record(9, gap <= 5e-3 and peak_ok and abs(top - formula) <= 1e-3 and abs(formula - 0.94) <= 1e-3,
           f"max |dF| {gap:.1e}; peak at {peak:.1f} vs {0.5 * math.sqrt(Ce):.2f} kappa; "
           f"C=1e4 max {top:.5f} vs {formula:.5f}")


def test_criterion_10_fano_gate():
    F150 = gates.maximize_fano_fidelity(150, 150)[0]
    F3600 = gates.maximize_fano_fidelity(3600, 3600)[0]
    gap = 0.0
    for C1, C2 in ((500, 500), (1000, 2000), (2000, 1000)):
        x0 = gates.fano_ideal_ratio(C2)
        for f in (0.75, 1.0, 2.0):
            out = gates.gate_numeric_check(gates.fano_dip_spec(C1, C2, ratio=f * x0))
            gap = max(gap, abs(out.fidelity - out.estimates["analytic"]))
    km = gates.qnm_symmetrize(gates.fano_dip_spec(1000, 2000)).rates[1]
    record(10, F150 >= 0.9 and F3600 >= 0.99 and gap <= 1e-2 and abs(km) <= 1e-8,
           f"max F {F150:.4f} (C=150), {F3600:.5f} (C=3600); dip-line gap {gap:.1e}; "
           f"kappa_minus {km:.1e}")


def test_criterion_11_time_bin_entanglement():
    g = TimeGrid(0, 40, 2001, dense_until=math.log(2), dense_points=36)
    f1 = lambda t: np.exp(-t / 2)
    C = time_bin_analysis(one_photon_density(TwoLevelEmitter(1.0), g), math.log(2), f1).concurrence
    dephased = one_photon_density(TwoLevelEmitter(1.0, 0.1), g)
    Itt = max(abs(time_bin_analysis(dephased, T, f1).I_tt - dephased.normalized_purity())
              for T in (0.3, 0.7, 1.5))
    c = phi_plus_construction(TwoLevelEmitter(1.0), math.log(2), TimeGrid(0, 40, 801))
    ok = abs(C - 1) <= 1e-3 and Itt <= 1e-6 and abs(c.p1) <= 1e-6 and abs(c.g2 - 1 / c.mu) <= 1e-6
    record(11, ok, f"concurrence {C:.5f}; max |I_tt - I| {Itt:.1e}; phi+ p1 {c.p1:.1e}, "
                   f"|g2 - 1/mu| {abs(c.g2 - 1 / c.mu):.1e}")


def test_criterion_12_self_homodyne():
    tot, zeta = 0.0, 0.0
    for theta in (math.pi / 8, math.pi / 4):
        for eta in (0.5, 1.0):
            sh = self_homodyne_decompose(TwoLevelEmitter(1.0, 0.1), theta, eta, 0.0,
                                         TimeGrid(0, 14, 1401))
            F = math.cos(theta) ** 2 / (1 - eta * math.sin(theta) ** 2)
            tot = max(tot, abs(sh.total() - 1))
            zeta = max(zeta, np.abs(sh.zeta10 - math.sqrt(F) * np.exp(-1.2 * sh.times / 2)).max())
    record(12, tot <= 1e-9 and zeta <= 1e-4,
           f"max |sum p - 1| {tot:.1e}; max |zeta10 error| {zeta:.1e}")


def run_preset(name, *extra):
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "emitterdyn.cli", "preset", name, "--out", "-",
                          *extra], capture_output=True, check=True)
    return out.stdout, time.perf_counter() - t0


def test_criterion_13_presets_deterministic_and_fast():
    notes, ok = [], True
    for name in preset_names():
        a, ta = run_preset(name)
        b, tb = run_preset(name, "--threads", "4")
        same = a == b and len(a) > 0
        ok &= same and max(ta, tb) < 300
        notes.append(f"{name} {max(ta, tb):.0f}s{'' if same else ' DIFFERS'}")
    record(13, ok, "; ".join(notes))
