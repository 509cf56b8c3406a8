"""Heralded remote entanglement between two three-level defects.

Three protocols are covered:

* ``N``: one photon heralds spin-photon-number entanglement.
* ``T``: two photons in consecutive time bins, with a spin flip in between.
* ``P``: two photons of opposite polarization from Lambda-type defects.

The numeric path builds the joint Liouvillian of both defects, mixes their
output fields on a beam splitter and counts detector clicks with the stacked
conditional propagator. The closed forms cover the regime without spin
decoherence and serve as independent checks.

Conventions: defect levels are (down, up, e) = (0, 1, 2) and a joint basis
index is ``3 * s1 + s2``. Detuning ``Delta`` is the transition frequency of
defect 1 minus that of defect 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize_scalar

from .dynamics import Generator, propagate_vector
from .fock_liouville import DensityState, SpaceDescriptor, embed
from .models import ThreeLevelDefect
from .photon_counting import (BD, PNRD, ConditionalEnsemble, DetectorSpec, beam_splitter_network,
                              conditional_propagate, remix_measurement)
from .photonic_state import concurrence

PROTOCOLS = ("N", "T", "P")
QUBIT_BLOCK = (0, 1, 3, 4)        # joint indices of |dd>, |du>, |ud>, |uu>
UP_DOWN, DOWN_UP = 3, 1           # |up, down>, |down, up>


class QuadratureError(RuntimeError):
    pass


def bell_psi(sign: int) -> np.ndarray:
    """(|up down> + sign |down up>)/sqrt(2) on the 9-dimensional joint space."""
    v = np.zeros(9, complex)
    v[UP_DOWN] = 1 / math.sqrt(2)
    v[DOWN_UP] = sign / math.sqrt(2)
    return v


@dataclass(frozen=True)
class ProtocolSpec:
    protocol: str
    defects: tuple                          # two ThreeLevelDefect instances
    half_area: float = math.pi / 4          # N only: initial cos|down> + sin|e>
    splitter_angle: float = math.pi / 4
    init_phases: tuple = (0.0, 0.0)
    propagation_phases: tuple = (0.0, 0.0)
    efficiencies: tuple = (1.0, 1.0)        # collection * transmission * detection per arm
    detuning: float = 0.0                   # N, T and the down transition of P
    detuning_up: float | None = None        # P only; defaults to ``detuning``
    window: float = 20.0                    # detection window T_d (per time bin for T)
    settle: float = 0.0                     # unobserved evolution after the last window
    detectors: tuple = ()                   # DetectorSpec per detector; empty means ideal PNRD
    distance: float = 0.0                   # metres
    attenuation_length: float = np.inf
    speed: float = 2e8
    time_unit: float = 1.0                  # seconds per model time unit (for distance delays)
    diffusion_sigma: tuple = (0.0, 0.0)
    phase_sigma: float = 0.0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if len(self.defects) != 2 or not all(isinstance(d, ThreeLevelDefect) for d in self.defects):
            raise ValueError("two ThreeLevelDefect instances are required")
        if not 0 < self.half_area <= math.pi / 2:
            raise ValueError("half pulse area must lie in (0, pi/2]")
        if not 0 <= self.splitter_angle <= math.pi / 2:
            raise ValueError("splitter angle must lie in [0, pi/2]")
        if any(not 0 <= e <= 1 for e in self.efficiencies):
            raise ValueError("efficiencies must lie in [0, 1]")
        if not self.window > 0 or self.settle < 0:
            raise ValueError("detection window must be positive and settling nonnegative")
        if self.distance < 0 or self.attenuation_length <= 0:
            raise ValueError("invalid link geometry")

    @property
    def windows(self) -> int:
        return 2 if self.protocol == "T" else 1

    @property
    def transmission(self) -> float:
        if self.distance == 0 or np.isinf(self.attenuation_length):
            return 1.0
        return 10 ** (-self.distance / (2 * self.attenuation_length))

    @property
    def wait_time(self) -> float:
        """Classical round-trip delay in model time units."""
        return self.distance / self.speed / self.time_unit

    @property
    def protocol_time(self) -> float:
        return self.windows * self.window + self.wait_time

    def arm_efficiency(self, k: int) -> float:
        """Collected fraction of all photons emitted by defect k (N and T)."""
        d = self.defects[k]
        branch = d.gamma_up / d.gamma if d.gamma > 0 else 0.0
        return self.efficiencies[k] * self.transmission * d.radiative_fraction * branch

    def with_(self, **kw) -> "ProtocolSpec":
        return replace(self, **kw)


@dataclass
class ProtocolOutcome:
    protocol: str
    states: dict                 # heralding outcome -> unnormalized 9x9 state
    targets: dict                # heralding outcome -> target vector
    fidelity: float
    efficiency: float
    concurrence: float
    optical: tuple               # (F_op, eta_op, C_op)
    diagnostics: dict = field(default_factory=dict)
    ensemble: ConditionalEnsemble | None = None

    def __post_init__(self):
        if not -1e-9 <= self.efficiency <= 1 + 1e-9:
            raise ValueError(f"efficiency {self.efficiency} outside [0, 1]")
        if self.efficiency > 0 and not -1e-9 <= self.fidelity <= 1 + 1e-9:
            raise ValueError(f"fidelity {self.fidelity} outside [0, 1]")


# ---------------------------------------------------------------- numeric path

_SPACE = SpaceDescriptor([3, 3], ["defect1", "defect2"])


def _detuned(spec: ProtocolSpec) -> tuple:
    """Copies of the defects whose Hamiltonians carry the requested detunings."""
    d1, d2 = spec.defects
    down = spec.detuning
    if spec.protocol == "P":
        up = spec.detuning if spec.detuning_up is None else spec.detuning_up
        # e<->down frequency is omega_up; e<->up frequency is omega_up - omega_spin
        return (replace(d1, omega_up=d1.omega_up + down, omega_spin=d1.omega_spin + down - up), d2)
    return replace(d1, omega_up=d1.omega_up + down), d2


def joint_liouvillian(defects, spin_only: bool = False):
    d1, d2 = defects
    return (d1.liouvillian(_SPACE, "defect1", spin_only=spin_only)
            + d2.liouvillian(_SPACE, "defect2", spin_only=spin_only))


def _fields(spec: ProtocolSpec) -> list:
    d = spec.defects
    su, sd = ThreeLevelDefect.sigma_up(), ThreeLevelDefect.sigma_down()
    eta = [spec.efficiencies[k] * spec.transmission * d[k].radiative_fraction for k in range(2)]
    # sign chosen so that the heralded coherence carries exp(+i(init + propagation phase))
    phases = [-spec.propagation_phases[0], -spec.propagation_phases[1]]
    ups = [math.sqrt(eta[k] * d[k].gamma_up) * embed(su, f"defect{k + 1}", _SPACE).matrix
           for k in range(2)]
    if spec.protocol != "P":
        return beam_splitter_network(ups, spec.splitter_angle, phases)
    # balanced intensities: every transition delivers the same photon probability,
    # so the brighter ones are attenuated
    p = balanced_transition_efficiency(spec)
    ups = [math.sqrt(p * d[k].gamma) * embed(su, f"defect{k + 1}", _SPACE).matrix for k in range(2)]
    downs = [math.sqrt(p * d[k].gamma) * embed(sd, f"defect{k + 1}", _SPACE).matrix
             for k in range(2)]
    return beam_splitter_network(ups + downs, spec.splitter_angle, phases + phases,
                                 labels=["L1", "L2", "R1", "R2"])


def balanced_transition_efficiency(spec: ProtocolSpec) -> float:
    """Common detection probability per transition for protocol P."""
    probs = []
    for k, d in enumerate(spec.defects):
        if d.gamma_up <= 0 or d.gamma_down <= 0:
            raise ValueError("protocol P needs both optical transitions")
        scale = spec.efficiencies[k] * spec.transmission * d.radiative_fraction / d.gamma
        probs += [scale * d.gamma_up, scale * d.gamma_down]
    return min(probs)


def _spin_frame(spec: ProtocolSpec, states: dict, duration: float) -> dict:
    """Move heralded states into the frame rotating with each qubit's own splitting."""
    h = [np.real(np.diag(d.hamiltonian())) for d in _detuned(spec)]
    energies = np.add.outer(h[0], h[1]).reshape(-1)
    V = np.exp(1j * energies * duration)
    if not np.any(energies):
        return states
    return {k: (V[:, None] * m) * V.conj()[None, :] for k, m in states.items()}


def initial_state(spec: ProtocolSpec) -> DensityState:
    D, E = ThreeLevelDefect.DOWN, ThreeLevelDefect.EXC
    local = []
    for k in range(2):
        v = np.zeros(3, complex)
        ph = np.exp(1j * spec.init_phases[k])
        if spec.protocol == "N":
            v[D], v[E] = math.cos(spec.half_area), math.sin(spec.half_area) * ph
        elif spec.protocol == "T":
            # (|up> + |down>)/sqrt2 followed by a pi pulse on up <-> e
            v[D], v[E] = 1 / math.sqrt(2), ph / math.sqrt(2)
        else:
            v[E] = 1.0
        local.append(v)
    psi = np.kron(local[0], local[1])
    return DensityState(_SPACE, np.outer(psi, psi.conj()))


def flip_and_reexcite() -> np.ndarray:
    """Spin flip followed by a pi pulse on up <-> e, on both defects: down->e, up->down, e->up."""
    u = np.zeros((3, 3))
    D, U, E = ThreeLevelDefect.DOWN, ThreeLevelDefect.UP, ThreeLevelDefect.EXC
    u[E, D] = u[D, U] = u[U, E] = 1.0
    return np.kron(u, u)


def _heralds(protocol: str) -> dict:
    """Heralding click pattern -> sign of the target Bell state."""
    if protocol == "N":
        return {(1, 0): -1, (0, 1): +1}
    # T: (early d1, early d2, late d1, late d2); P: (L1, L2, R1, R2)
    return {(1, 0, 1, 0): +1, (0, 1, 0, 1): +1, (1, 0, 0, 1): -1, (0, 1, 1, 0): -1}


def _count_ensemble(spec: ProtocolSpec) -> ConditionalEnsemble:
    L = joint_liouvillian(_detuned(spec))
    chans = _fields(spec)
    rho0 = initial_state(spec)
    T = spec.window
    if spec.protocol != "T":
        return _settle(L, conditional_propagate(L, chans, rho0, 0.0, T, n_max=2), T, spec.settle)
    early = conditional_propagate(L, chans, rho0, 0.0, T, n_max=2)
    U = flip_and_reexcite()
    states, residual = {}, 0.0
    for ke, rho in early.states.items():
        kicked = DensityState(_SPACE, U @ rho.matrix @ U.T, normalized=False)
        late = conditional_propagate(L, chans, kicked, T, 2 * T, n_max=2)
        residual += rho.trace - sum(r.trace for r in late.states.values())
        for kl, r in late.states.items():
            states[ke + kl] = r
    ens = ConditionalEnsemble(states, 4, early.residual + residual, ("e1", "e2", "l1", "l2"))
    return _settle(L, ens, 2 * T, spec.settle)


def _settle(L, ens: ConditionalEnsemble, t0: float, duration: float) -> ConditionalEnsemble:
    if duration <= 0:
        return ens
    gen = Generator.constant(L)
    for k, r in ens.states.items():
        v = propagate_vector(gen, r.matrix.reshape(-1), t0, t0 + duration).reshape(9, 9)
        ens.states[k] = DensityState(_SPACE, 0.5 * (v + v.conj().T), normalized=False)
    return ens


def _detectors(spec: ProtocolSpec, n_counters: int) -> list | None:
    if not spec.detectors:
        return None
    dets = list(spec.detectors)
    if spec.protocol == "T" and len(dets) == 2:
        dets = dets * 2
    if len(dets) == 1:
        dets = dets * n_counters
    if len(dets) != n_counters:
        raise ValueError(f"{n_counters} detectors required, got {len(dets)}")
    for d in dets:
        if np.isfinite(d.gate_duration) and not math.isclose(d.gate_duration, spec.window):
            raise ValueError("detector gate duration differs from the detection window")
    return [replace(d, gate_duration=spec.window) for d in dets]


def _wait(spec: ProtocolSpec, states: dict) -> dict:
    t = spec.wait_time
    if t <= 0:
        return states
    gen = Generator.constant(joint_liouvillian(_detuned(spec), spin_only=True))
    return {k: propagate_vector(gen, m.reshape(-1), 0.0, t).reshape(9, 9) for k, m in states.items()}


def summarize(protocol: str, states: dict, optical=(np.nan, np.nan, np.nan), diagnostics=None,
              ensemble=None) -> ProtocolOutcome:
    """Weighted-average fidelity and concurrence over the heralding outcomes."""
    signs = _heralds(protocol)
    targets = {k: bell_psi(s) for k, s in signs.items()}
    eta = F = C = 0.0
    for k, m in states.items():
        p = float(np.real(np.trace(m)))
        if p <= 0:
            continue
        psi = targets[k]
        eta += p
        F += float(np.real(psi.conj() @ m @ psi))
        block = m[np.ix_(QUBIT_BLOCK, QUBIT_BLOCK)]
        q = float(np.real(np.trace(block)))
        if q > 1e-300:
            C += p * concurrence(block / q)
    if eta <= 0:
        F = C = 0.0
    else:
        F, C = F / eta, C / eta
    return ProtocolOutcome(protocol, states, targets, min(max(F, 0.0), 1.0), min(max(eta, 0.0), 1.0),
                           C, optical, diagnostics or {}, ensemble)


def _diagnostics(spec: ProtocolSpec, ens: ConditionalEnsemble) -> dict:
    total = {}
    for k, r in ens.states.items():
        total[sum(k)] = total.get(sum(k), 0.0) + r.trace
    out = {"p0": total.get(0, 0.0), "p1": total.get(1, 0.0),
           "p_total2": total.get(2, 0.0), "p3plus": sum(v for n, v in total.items() if n >= 3)
           + max(ens.residual, 0.0)}
    if spec.protocol == "N":
        out["p11"] = ens.trace((1, 1))
        out["p2"] = ens.trace((2, 0)) + ens.trace((0, 2))
    elif spec.protocol == "P":
        # coincidences across the two ports of one polarization; bunching into one detector
        out["p11"] = sum(r.trace for k, r in ens.states.items()
                         if sum(k) == 2 and (k[0] and k[1] or k[2] and k[3]))
        out["p2"] = sum(r.trace for k, r in ens.states.items() if sum(k) == 2 and max(k) == 2)
    else:
        out["p2"] = sum(r.trace for k, r in ens.states.items()
                        if k[0] + k[1] == 2 or k[2] + k[3] == 2)
    return out


def run_protocol(spec: ProtocolSpec) -> ProtocolOutcome:
    ens = _count_ensemble(spec)
    n_counters = len(next(iter(ens.states)))
    dets = _detectors(spec, n_counters)
    if dets is None:
        raw = {k: r.matrix for k, r in ens.states.items()}
    else:
        raw = {k: r.matrix for k, r in remix_measurement(ens, dets, max_outcome=2).items()}
    heralded = {k: raw.get(k, np.zeros((9, 9), complex)) for k in _heralds(spec.protocol)}
    heralded = _wait(spec, heralded)
    elapsed = spec.windows * spec.window + spec.settle + spec.wait_time
    heralded = _spin_frame(spec, heralded, elapsed)
    try:
        optical = optical_limits(spec.protocol, spec)
    except ValueError:
        optical = (np.nan, np.nan, np.nan)
    return summarize(spec.protocol, heralded, optical, _diagnostics(spec, ens), ens)


def numeric_coherence(spec: ProtocolSpec) -> complex:
    """C~ read off the |up down><down up| element of the outcome (1, 0) state of protocol N."""
    if spec.protocol != "N":
        raise ValueError("coherence extraction is defined for protocol N")
    ens = _count_ensemble(spec)
    m = ens.states[(1, 0)].matrix
    scale = math.sqrt(spec.arm_efficiency(0) * spec.arm_efficiency(1)) * math.sin(
        2 * spec.splitter_angle) * math.sin(2 * spec.half_area) ** 2 / 8
    return -m[UP_DOWN, DOWN_UP] / scale


# ---------------------------------------------------------------- closed forms

def _rates(spec: ProtocolSpec):
    g = np.array([d.gamma for d in spec.defects])
    G = np.array([d.Gamma for d in spec.defects])
    return g, G


def coherence_factor(spec: ProtocolSpec, window: float | None = None) -> complex:
    """C~(T_d) = 2 sqrt(g1 g2)/z (1 - exp(-T_d z/2)) exp(i(phi + phase)), z = G1 + G2 + 2i Delta."""
    g, G = _rates(spec)
    T = spec.window if window is None else window
    z = G.sum() + 2j * spec.detuning
    phase = (spec.init_phases[0] - spec.init_phases[1]) + (
        spec.propagation_phases[0] - spec.propagation_phases[1])
    tail = 1.0 if np.isinf(T) else 1 - np.exp(-T * z / 2)
    return 2 * math.sqrt(g[0] * g[1]) / z * tail * np.exp(1j * phase)


def mean_overlap(g1, g2, G1, G2, detuning=0.0) -> float:
    """Mean wavepacket overlap of photons from two dephased exponential emitters."""
    m_gamma = 4 * g1 * g2 / (g1 + g2) ** 2
    return m_gamma * (G1 + G2) * (g1 + g2) / ((G1 + G2) ** 2 + 4 * detuning ** 2)


def spec_overlap(spec: ProtocolSpec) -> float:
    g, G = _rates(spec)
    return mean_overlap(g[0], g[1], G[0], G[1], spec.detuning)


def loss_factor(eta: float, half_area: float) -> float:
    return math.cos(half_area) ** 2 / (1 - eta * math.sin(half_area) ** 2)


@dataclass
class NumberStateTable:
    """Closed-form conditional states of protocol N (no spin decoherence)."""
    vacuum: np.ndarray
    single: dict                 # (1, 0) and (0, 1)
    double: np.ndarray           # rho_20 + rho_11 + rho_02
    beta: tuple

    def total(self) -> np.ndarray:
        return self.vacuum + sum(self.single.values()) + self.double


def _proj(i):
    m = np.zeros((9, 9), complex)
    m[i, i] = 1
    return m


def conditional_states_N(spec: ProtocolSpec) -> NumberStateTable:
    g, _ = _rates(spec)
    T = spec.window
    b = [spec.arm_efficiency(k) * (1 - math.exp(-T * g[k])) for k in range(2)]
    s2 = math.sin(2 * spec.half_area) ** 2
    s4 = math.sin(spec.half_area) ** 4
    c4 = math.cos(spec.half_area) ** 4
    th = spec.splitter_angle
    dd, uu = 0, 4
    vac = (0.25 * s2 * ((1 - b[0]) * _proj(UP_DOWN) + (1 - b[1]) * _proj(DOWN_UP))
           + (1 - b[0]) * (1 - b[1]) * s4 * _proj(uu) + c4 * _proj(dd))
    coh = math.sqrt(spec.arm_efficiency(0) * spec.arm_efficiency(1)) / 8 * math.sin(2 * th) * s2 \
        * coherence_factor(spec)
    single = {}
    # outcome (1, 0) uses d1 = cos(th) b1 - sin(th) b2; (0, 1) uses d2 = sin(th) b1 + cos(th) b2
    for key, sgn in (((1, 0), +1), ((0, 1), -1)):
        m = 0.5 * (b[0] + b[1] - 2 * b[0] * b[1] + sgn * (b[0] - b[1]) * math.cos(2 * th)) * s4 \
            * _proj(uu)
        m = m + b[0] / 8 * (1 + sgn * math.cos(2 * th)) * s2 * _proj(UP_DOWN)
        m = m + b[1] / 8 * (1 - sgn * math.cos(2 * th)) * s2 * _proj(DOWN_UP)
        m[UP_DOWN, DOWN_UP] = -sgn * coh
        m[DOWN_UP, UP_DOWN] = -sgn * np.conj(coh)
        single[key] = m
    double = b[0] * b[1] * s4 * _proj(uu)
    return NumberStateTable(vac, single, double, tuple(b))


def _polarization_coherence(spec: ProtocolSpec) -> complex:
    """Spin coherence of the protocol P herald; depends on total rates only."""
    g, G = _rates(spec)
    up = spec.detuning if spec.detuning_up is None else spec.detuning_up
    down = spec.detuning
    root = 2 * math.sqrt(g[0] * g[1])
    c_up = root / (G.sum() + 2j * up)
    c_down = root / (G.sum() + 2j * down)
    gain = (g.sum() - 1j * (up - down)) / (G.sum() - 1j * (up - down))
    return np.conj(c_up) * c_down / gain


def optical_limits(protocol: str, spec: ProtocolSpec) -> tuple:
    """(F_op, eta_op, C_op) for long windows, no spin decoherence and a balanced splitter."""
    g, G = _rates(spec)
    eta = math.sqrt(spec.arm_efficiency(0) * spec.arm_efficiency(1))
    if protocol == "N":
        Ct = coherence_factor(spec, np.inf)
        Fe = loss_factor(eta, spec.half_area)
        return (0.5 * (1 + Ct.real) * Fe,
                0.5 * eta * math.sin(2 * spec.half_area) ** 2 / Fe, abs(Ct) * Fe)
    if protocol == "T":
        Ct = coherence_factor(spec, np.inf)
        return 0.5 * (1 + abs(Ct) ** 2), eta ** 2 / 2, abs(Ct) ** 2
    if protocol == "P":
        x = _polarization_coherence(spec)
        eta_p = 2 * balanced_transition_efficiency(spec)
        return 0.5 * (1 + x.real), eta_p ** 2 / 2, abs(x)
    raise ValueError(f"unknown protocol {protocol!r}")


def time_bin_fidelity(spec: ProtocolSpec) -> tuple:
    """(F_gen, eta_gen) of protocol T at finite window, ideal detectors."""
    g, _ = _rates(spec)
    T = spec.window
    b = [spec.arm_efficiency(k) * (1 - math.exp(-T * g[k])) for k in range(2)]
    eta_gen = b[0] * b[1] / 2
    e12 = spec.arm_efficiency(0) * spec.arm_efficiency(1)
    Ct = coherence_factor(spec)
    return 0.5 * (1 + e12 * abs(Ct) ** 2 / (2 * eta_gen)), eta_gen


def protocol_bounds(spec: ProtocolSpec, tol: float = 1e-9) -> dict:
    """Optical-limit fidelities of all protocols and the overlap bounds that order them."""
    M = spec_overlap(spec)
    FN = 0.5 * (1 + coherence_factor(spec, np.inf).real)
    FT = optical_limits("T", spec)[0]
    FP = 0.5 * (1 + _polarization_coherence(spec.with_(detuning_up=spec.detuning)).real)
    upper = 0.5 * (1 + math.sqrt(M))
    ok = M - tol <= FT <= FP + tol and FP <= FN + tol and FN <= upper + tol
    return {"M12": M, "F_T": FT, "F_P": FP, "F_N": FN, "upper": upper, "ordered": ok}


# ---------------------------------------------------------------- detector noise

def dark_probabilities(dark_rate: float, window: float) -> tuple:
    lam = dark_rate * window
    return math.exp(-lam), lam * math.exp(-lam)


def number_fidelity_noisy(eta: float, half_area: float, coherence_real: float, p0: float,
                          p1: float, detector: str = PNRD, overlap: float | None = None) -> tuple:
    """(F_gen, eta_gen) of protocol N in the optical limit with dark counts.

    PNRD: a single dark count on top of the vacuum branch mimics a herald.
    BD: in addition, two emitted photons in one port still look like one click.
    """
    s2 = math.sin(2 * half_area) ** 2
    s4 = math.sin(half_area) ** 4
    signal = 0.25 * eta * (1 + coherence_real) * s2
    eta_op = 2 * eta * math.sin(half_area) ** 2 * (1 - eta * math.sin(half_area) ** 2)
    vac_trace = (1 - eta * math.sin(half_area) ** 2) ** 2
    vac_fid = 0.5 * (1 - eta) * s2
    if detector == PNRD:
        F = p0 ** 2 * signal + p0 * p1 * vac_fid
        E = p0 ** 2 * eta_op + 2 * p0 * p1 * vac_trace
        return F / E, E
    M = 1.0 if overlap is None else overlap
    bunched = 0.25 * (1 + M) * eta ** 2 * s4
    F = p0 * signal + p0 * (1 - p0) * vac_fid
    E = 2 * p0 * bunched + p0 * eta_op + 2 * p0 * (1 - p0) * vac_trace
    return F / E, E


def optimal_half_area(p1: float, eta: float, detector: str = PNRD) -> float:
    """Small-angle estimate of the noise-optimal half pulse area for protocol N."""
    if detector == PNRD:
        if eta >= 1:
            raise ValueError("the number-resolving estimate needs eta < 1")
        return (p1 / (eta * (1 - eta))) ** 0.25
    return (2 * p1 / (eta * (2 - eta))) ** 0.25


def optimize_half_area(objective: Callable[[float], float], upper: float = math.pi / 4,
                       xatol: float = 1e-7) -> float:
    """Bounded maximization of ``objective`` over the half pulse area."""
    res = minimize_scalar(lambda x: -objective(x), bounds=(1e-4, upper), method="bounded",
                          options={"xatol": xatol})
    return float(res.x)


def noisy_measurement_adjust(outcome: ProtocolOutcome, detectors: Sequence[DetectorSpec],
                             window: float | None = None) -> tuple:
    """(F_gen, eta_gen) after remixing the stored click ensemble through noisy detectors."""
    ens = outcome.ensemble
    if ens is None:
        raise ValueError("outcome carries no click ensemble")
    dets = list(detectors)
    n = len(next(iter(ens.states)))
    if len(dets) == 1:
        dets = dets * n
    elif outcome.protocol == "T" and len(dets) == 2:
        dets = dets * 2
    if window is not None:
        dets = [replace(d, gate_duration=window) for d in dets]
    for d in dets:
        if d.dark_probability(0) < 0.5:
            raise ValueError("dark-count probability per window must stay below 0.5")
    mixed = remix_measurement(ens, dets, max_outcome=2)
    states = {k: mixed[k].matrix if k in mixed else np.zeros((9, 9), complex)
              for k in _heralds(outcome.protocol)}
    res = summarize(outcome.protocol, states)
    return res.fidelity, res.efficiency


# ---------------------------------------------------------------- environment

def _gauss_nodes(n):
    x, w = hermegauss(n)
    return x, w / w.sum()


def _gauss_average(evaluator, sigma_shift, sigma_phase, n):
    xs, ws = _gauss_nodes(n) if sigma_shift > 0 else (np.zeros(1), np.ones(1))
    xp, wp = _gauss_nodes(n) if sigma_phase > 0 else (np.zeros(1), np.ones(1))
    total = 0.0
    for a, wa in zip(xs, ws):
        for b, wb in zip(xp, wp):
            total += wa * wb * evaluator(sigma_shift * a, sigma_phase * b)
    return total


def environmental_averages(evaluator: Callable[[float, float], float], diffusion_sigma=(0.0, 0.0),
                           phase_sigma: float = 0.0, nodes: int = 21, tol: float = 1e-4) -> float:
    """Gaussian average of ``evaluator(detuning_shift, phase)``.

    Spectral diffusion of each defect enters only through the relative shift
    delta1 - delta2, whose standard deviation is the root sum of squares.
    The node count is doubled once as a convergence check.
    """
    s1, s2 = diffusion_sigma
    shift = math.hypot(s1, s2)
    if shift == 0 and phase_sigma == 0:
        return float(evaluator(0.0, 0.0))
    coarse = _gauss_average(evaluator, shift, phase_sigma, nodes)
    fine = _gauss_average(evaluator, shift, phase_sigma, 2 * nodes)
    if abs(fine - coarse) > tol:
        raise QuadratureError(f"Gauss-Hermite average moved by {abs(fine - coarse):.2e} on doubling")
    return float(fine)


def closed_form_evaluator(protocol: str, spec: ProtocolSpec) -> Callable[[float, float], float]:
    """Optical-limit fidelity as a function of (detuning shift, phase error)."""
    def f(shift, phase):
        s = spec.with_(detuning=spec.detuning + shift,
                       detuning_up=None if spec.detuning_up is None else spec.detuning_up + shift)
        if protocol == "N":
            Ct = coherence_factor(s, np.inf) * np.exp(1j * phase)
            return 0.5 * (1 + Ct.real)
        # the phase cancels between the two heralding photons
        return optical_limits(protocol, s)[0]
    return f


def phase_crossover(spec: ProtocolSpec, against: str = "T") -> float:
    """Phase variance above which N loses its optical-limit advantage."""
    g, G = _rates(spec)
    num = G.sum() if against == "T" else g.sum()
    return math.log(num ** 2 / (4 * g[0] * g[1]))


# ---------------------------------------------------------------- distance

@dataclass
class DistanceRow:
    L_km: float
    eta: float
    t_f_s: float
    F_gen: float
    eta_gen: float
    concurrence: float


def distance_sweep(spec: ProtocolSpec, distances_km: Sequence[float], base_efficiency: float,
                   optimize: Callable[[ProtocolSpec], ProtocolSpec] | None = None) -> list:
    """Rows of (L, eta(L), t_f(L), F_gen, eta_gen, concurrence); distances in km.

    ``spec.attenuation_length`` and ``spec.speed`` are in m and m/s. The
    classical wait L/c decoheres the heralded spins under the spin-only
    Liouvillian. ``optimize`` may retune each point (for example the half area).
    """
    rows = []
    for L in distances_km:
        s = spec.with_(distance=float(L) * 1e3, efficiencies=(base_efficiency, base_efficiency))
        if optimize is not None:
            s = optimize(s)
        out = run_protocol(s)
        rows.append(DistanceRow(float(L), base_efficiency * s.transmission,
                                s.protocol_time * s.time_unit, out.fidelity, out.efficiency,
                                out.concurrence))
    return rows
