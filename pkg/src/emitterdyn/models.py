"""Emitter and cavity models: Liouvillian builders and closed-form figures of merit."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
import yaml
from scipy.integrate import quad

from .dynamics import Generator
from .fock_liouville import (DensityState, Operator, SpaceDescriptor, SuperOperator, destroy,
                             dissipator, embed, hamiltonian_superop, transition)
from .photon_counting import CollapseChannel

AMPLITUDE = "amplitude"   # Gamma = gamma + 2 gamma*
FWHM = "fwhm"             # Gamma = gamma + gamma*

G, E = 0, 1               # two-level basis order


def _dephasing_coefficient(gamma_star, convention):
    if convention == AMPLITUDE:
        return 2.0 * gamma_star
    if convention == FWHM:
        return gamma_star
    raise ValueError(f"unknown dephasing convention {convention!r}")


def to_fwhm(gamma_star, convention):
    """gamma* expressed so that gamma + gamma* is the zero-phonon-line FWHM."""
    return _dephasing_coefficient(gamma_star, convention)


@dataclass(frozen=True)
class SquarePulse:
    rabi: float
    duration: float
    start: float = 0.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("pulse duration must be positive")

    @property
    def area(self):
        return self.rabi * self.duration

    @property
    def end(self):
        return self.start + self.duration


@dataclass(frozen=True)
class TwoLevelEmitter:
    gamma: float
    gamma_star: float = 0.0
    omega: float = 0.0
    gamma_r: float | None = None
    eta_r: float = 1.0
    drive: SquarePulse | None = None
    convention: str = AMPLITUDE

    def __post_init__(self):
        if self.gamma < 0 or self.gamma_star < 0:
            raise ValueError("rates must be nonnegative")
        if self.gamma_r is not None and not 0 <= self.gamma_r <= self.gamma + 1e-15:
            raise ValueError("gamma_r must lie in [0, gamma]")
        if not 0 <= self.eta_r <= 1:
            raise ValueError("eta_r must lie in [0, 1]")

    @property
    def radiative_rate(self):
        return self.gamma if self.gamma_r is None else self.gamma_r

    @property
    def Gamma(self):
        """Coherence decay FWHM."""
        return self.gamma + _dephasing_coefficient(self.gamma_star, self.convention)

    @property
    def T1(self):
        return 1.0 / self.gamma

    @property
    def T2(self):
        return 2.0 / self.Gamma

    @property
    def space(self):
        return SpaceDescriptor([2], ["emitter"])

    @property
    def sigma(self) -> Operator:
        return Operator(self.space, transition(2, G, E))

    def channel(self) -> CollapseChannel:
        return CollapseChannel(math.sqrt(self.eta_r * self.radiative_rate) * self.sigma, "b")

    def excited(self) -> DensityState:
        return DensityState.pure([0, 1], self.space)

    def ground(self) -> DensityState:
        return DensityState.pure([1, 0], self.space)

    def superposition(self, theta, phase=0.0) -> DensityState:
        return DensityState.pure([math.cos(theta), math.sin(theta) * np.exp(1j * phase)], self.space)

    def liouvillian(self, rabi: float = 0.0) -> SuperOperator:
        s = self.sigma
        H = self.omega * (s.dag @ s) + 0.5 * rabi * (s + s.dag)
        L = hamiltonian_superop(H) + self.gamma * dissipator(s)
        k = _dephasing_coefficient(self.gamma_star, self.convention)
        if k:
            L = L + k * dissipator(s.dag @ s)
        return L


@dataclass(frozen=True)
class QuenchModel:
    """Markovian quenching by detuned, mostly non-radiative higher-order modes."""
    delta_q: float | None = None
    eta_c: float = 1.0
    mode_factors: tuple = ()      # optional (k_l, Delta_l) pairs for the full Lorentzian sum

    def rate(self, g, kappa):
        kappa_nr = (1.0 - self.eta_c) * kappa
        if self.mode_factors:
            return sum((k * g) ** 2 * kappa_nr / (dl ** 2 + (kappa_nr / 2) ** 2)
                       for k, dl in self.mode_factors)
        if self.delta_q is None:
            return 0.0
        return g ** 2 * kappa_nr / self.delta_q ** 2


@dataclass(frozen=True)
class CavityEmitter:
    g: float
    kappa: float
    gamma: float
    gamma_star: float = 0.0
    delta_o: float = 0.0
    delta_c: float = 0.0
    gamma_r: float | None = None
    eta_c: float = 1.0
    drive: SquarePulse | None = None
    quench: QuenchModel | None = None
    n_cavity: int | None = None
    convention: str = AMPLITUDE

    def __post_init__(self):
        if not (self.g > 0 and self.kappa > 0):
            raise ValueError("g and kappa must be positive")
        if self.gamma < 0 or self.gamma_star < 0:
            raise ValueError("rates must be nonnegative")

    @property
    def delta(self):
        """Emitter-cavity detuning omega_o - omega_c."""
        return self.delta_o - self.delta_c

    @property
    def gamma_total(self):
        gq = self.quench.rate(self.g, self.kappa) if self.quench else 0.0
        return self.gamma + gq

    @property
    def Gamma(self):
        return self.gamma_total + _dephasing_coefficient(self.gamma_star, self.convention)

    @property
    def cavity_dim(self):
        if self.n_cavity is not None:
            return int(self.n_cavity)
        return 4 if self.drive is not None else 2

    @property
    def space(self):
        return SpaceDescriptor([2, self.cavity_dim], ["emitter", "cavity"])

    def operators(self):
        sp = self.space
        s = embed(transition(2, G, E), "emitter", sp)
        a = embed(destroy(self.cavity_dim), "cavity", sp)
        return s, a

    def liouvillian(self, rabi: float = 0.0) -> SuperOperator:
        s, a = self.operators()
        H = (self.delta_o * (s.dag @ s) + self.delta_c * (a.dag @ a)
             + self.g * (a.dag @ s + a @ s.dag) + 0.5 * rabi * (s + s.dag))
        L = (hamiltonian_superop(H) + self.kappa * dissipator(a)
             + self.gamma_total * dissipator(s))
        k = _dephasing_coefficient(self.gamma_star, self.convention)
        if k:
            L = L + k * dissipator(s.dag @ s)
        return L

    def channel(self) -> CollapseChannel:
        _, a = self.operators()
        return CollapseChannel(math.sqrt(self.kappa * self.eta_c) * a, "b")

    def excited(self) -> DensityState:
        psi = np.zeros(2 * self.cavity_dim)
        psi[self.cavity_dim] = 1.0      # |e> (x) |0>
        return DensityState.pure(psi, self.space)

    def ground(self) -> DensityState:
        psi = np.zeros(2 * self.cavity_dim)
        psi[0] = 1.0
        return DensityState.pure(psi, self.space)


@dataclass(frozen=True)
class ThreeLevelDefect:
    """Lambda-type defect with levels (down, up, e); sigma_up = |up><e|, sigma_down = |down><e|,
    sigma_s = |up><down|."""
    gamma_up: float                     # e -> up decay (the monitored transition)
    gamma_down: float = 0.0             # e -> down decay
    gamma_spin: float = 0.0             # down -> up spin relaxation
    excite_up: float = 0.0              # reverse (excitation) rates
    excite_down: float = 0.0
    excite_spin: float = 0.0
    gamma_star: float = 0.0             # optical pure dephasing (amplitude convention)
    gamma_star_spin: float = 0.0
    omega_up: float = 0.0
    omega_spin: float = 0.0
    radiative_fraction: float = 1.0     # gamma_r / gamma of each optical transition

    DOWN, UP, EXC = 0, 1, 2

    def __post_init__(self):
        for name in ("gamma_up", "gamma_down", "gamma_spin", "excite_up", "excite_down",
                     "excite_spin", "gamma_star", "gamma_star_spin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def gamma(self):
        return self.gamma_up + self.gamma_down

    @property
    def Gamma(self):
        return self.gamma + 2 * self.gamma_star

    @staticmethod
    def sigma_up():
        return transition(3, 1, 2)

    @staticmethod
    def sigma_down():
        return transition(3, 0, 2)

    @staticmethod
    def sigma_spin():
        return transition(3, 1, 0)

    @staticmethod
    def sigma_z():
        return np.diag([-1.0, 1.0, 0.0]).astype(complex)

    def hamiltonian(self):
        su, ss = self.sigma_up(), self.sigma_spin()
        return self.omega_up * su.conj().T @ su + self.omega_spin * ss.conj().T @ ss

    def collapse_terms(self):
        """(operator, rate) pairs of the dissipative part."""
        su, sd, ss = self.sigma_up(), self.sigma_down(), self.sigma_spin()
        terms = [(su, self.gamma_up), (sd, self.gamma_down), (ss, self.gamma_spin),
                 (su.conj().T, self.excite_up), (sd.conj().T, self.excite_down),
                 (ss.conj().T, self.excite_spin),
                 (su.conj().T @ su, 2 * self.gamma_star),
                 (self.sigma_z(), self.gamma_star_spin / 2)]
        return [(op, r) for op, r in terms if r > 0]

    def liouvillian(self, space=None, label=None, spin_only=False) -> SuperOperator:
        if space is None:
            space, label = SpaceDescriptor([3], ["defect"]), "defect"
        H = embed(self.hamiltonian(), label, space)
        L = hamiltonian_superop(H)
        for op, rate in self.collapse_terms():
            if spin_only and op is not None and np.any(op[2]) | np.any(op[:, 2]):
                continue
            L = L + rate * dissipator(embed(op, label, space))
        return L


@dataclass(frozen=True)
class PsbSpectrum:
    lambda0: float                      # nm
    components: tuple                   # (a_i, b_i, c_i)
    debye_waller: float = 1.0
    zpl_width: float | None = None

    def __post_init__(self):
        if any(a <= 0 or b <= 0 for a, b, _ in self.components):
            raise ValueError("PSB amplitudes and widths must be positive")
        if not 0 < self.debye_waller <= 1:
            raise ValueError("Debye-Waller factor must lie in (0, 1]")

    @classmethod
    def preset(cls, name: str):
        text = resources.files("emitterdyn").joinpath("data/siv_psb.yaml").read_text()
        entry = yaml.safe_load(text)[name]
        return cls(entry["lambda0_nm"], tuple(tuple(c) for c in entry["components"]),
                   entry["debye_waller"])

    def psb(self, lam):
        lam = np.asarray(lam, dtype=float)
        return sum(a / (1 + (lam - self.lambda0 - c) ** 2 / b ** 2) for a, b, c in self.components)

    def cavity_filter(self, lam, Q):
        return 1.0 / (1.0 + 4 * Q ** 2 * (lam - self.lambda0) ** 2 / self.lambda0 ** 2)

    def unfiltered_fraction(self, Q, half_span=150.0):
        """F(Q): fraction of the sideband passed by a cavity of quality factor Q."""
        if Q <= 0:
            raise ValueError("Q must be positive")
        lo, hi = self.lambda0 - half_span, self.lambda0 + half_span
        pts = sorted({self.lambda0} | {self.lambda0 + c for _, _, c in self.components})
        den = quad(self.psb, lo, hi, points=pts, limit=500, epsrel=1e-10)[0]
        num = quad(lambda x: self.psb(x) * self.cavity_filter(x, Q), lo, hi, points=pts,
                   limit=500, epsrel=1e-10)[0]
        return num / den


def build_liouvillian(model, horizon: float = np.inf) -> Generator:
    """Generator for a model; driven models get a pulse-on / pulse-off schedule."""
    if isinstance(model, (TwoLevelEmitter, CavityEmitter)):
        off = model.liouvillian()
        p = model.drive
        if p is None:
            return Generator.constant(off)
        on = model.liouvillian(p.rabi)
        pieces = []
        if p.start > 0:
            pieces.append((0.0, p.start, off))
        pieces += [(p.start, p.end, on), (p.end, horizon, off)]
        return Generator.schedule(pieces)
    if isinstance(model, ThreeLevelDefect):
        return Generator.constant(model.liouvillian())
    raise TypeError(f"no Liouvillian for {type(model).__name__}")


def one_d_atom(ce: CavityEmitter) -> TwoLevelEmitter:
    """Bad-cavity reduction: Purcell-enhanced decay gamma + R and a dispersive frequency shift."""
    d = ce.delta
    R = purcell_rate(ce)
    shift = 4 * ce.g ** 2 * d / (ce.kappa ** 2 + 4 * d ** 2)
    return TwoLevelEmitter(gamma=ce.gamma_total + R, gamma_star=ce.gamma_star,
                           omega=ce.delta_o + shift, eta_r=1.0, drive=ce.drive,
                           convention=ce.convention)


def purcell_rate(ce: CavityEmitter) -> float:
    kG = ce.kappa + ce.Gamma
    return 4 * ce.g ** 2 * kG / (kG ** 2 + 4 * ce.delta ** 2)


@dataclass(frozen=True)
class CavityFoms:
    R: float
    purcell_standard: float
    purcell_generalized: float
    cooperativity: float
    cooperativity_inhibited: float
    inhibition: float
    beta: float


def cavity_foms(ce: CavityEmitter) -> CavityFoms:
    R = purcell_rate(ce)
    k, g, gam = ce.kappa, ce.g, ce.gamma_total
    gr = ce.gamma if ce.gamma_r is None else ce.gamma_r
    kG = k + ce.Gamma
    F_inh = k * kG / (kG ** 2 + 4 * ce.delta ** 2)
    C = 4 * g ** 2 / (k * gam) if gam > 0 else np.inf
    F_std = 4 * g ** 2 / (k * gr) if gr > 0 else np.inf
    F_gen = R * k / (gr * (k + R)) if gr > 0 else np.inf
    beta = R * k / (gam * k + R * (gam + k))
    return CavityFoms(R, F_std, F_gen, C, C * F_inh, F_inh, beta)


def appendix_beta(g, kappa, gamma, gamma_star_fwhm):
    """Resonant brightness with R = 4g^2/kappa and Gamma = gamma + gamma* (FWHM convention)."""
    R = 4 * g ** 2 / kappa
    Gam = gamma + gamma_star_fwhm
    return R * kappa / (R * (gamma + kappa) + gamma * (kappa + Gam))


def critical_indistinguishability(R, kappa, gamma, gamma_star):
    """First-order-in-dephasing indistinguishability for arbitrary gamma (FWHM convention,
    R = 4g^2/kappa). Returns (I0 + I1, I0, beta)."""
    gs = gamma_star
    Gam = gamma + gs
    beta = R * kappa / (R * (gamma + kappa) + gamma * (kappa + Gam))
    g1sq = (3 * gamma + kappa) * (gamma + 3 * kappa) + 4 * kappa * R
    g2sq = 3 * gs * (gamma - gs) + 4 * gamma * (gamma + R)
    core = 3 * gs * (2 * gamma + 3 * kappa + gs) + g1sq
    I0 = (R ** 2 * kappa ** 2 * core
          / ((R + gamma) * (kappa + gamma) * (R + gamma + gs) * (kappa + Gam) * g1sq)) / beta ** 2
    ratio = ((R - 2 * gamma) * ((gamma + gs) ** 2 + gamma * kappa) / (core * g2sq)
             - (gs * (gamma - gs) * (4 * gamma + R) + 2 * gamma * (gamma + R) * (2 * gamma + R))
             / (2 * (gamma + kappa) * (gamma + R) * g2sq)
             - (gamma + kappa) * (8 * gamma + 5 * R) / (2 * (gamma + R) * g1sq))
    I1 = gs * I0 * ratio
    return I0 + I1, I0, beta


def weak_quench_indistinguishability(R, kappa, gamma, gamma_star):
    """Simplified form valid for gamma < gamma* < kappa (FWHM convention)."""
    Gam = gamma + gamma_star
    beta = R * kappa / (R * (gamma + kappa) + gamma * (kappa + Gam))
    I1 = (gamma_star / kappa) * (6 * kappa - R) / (3 * kappa + 4 * R)
    return R ** 2 * kappa ** 2 * (1 + I1) / ((R + gamma) * (kappa + gamma) * (R + Gam)
                                              * (kappa + Gam) * beta ** 2)


def psb_corrections(I0, beta0, F, B2):
    I = I0 * (B2 / (B2 + F * (1 - B2))) ** 2
    beta = beta0 * (B2 + F * (1 - B2)) / (1 - beta0 * (1 - F) * (1 - B2))
    return I, beta


@dataclass
class CriticalRegimeReport:
    I: float
    beta: float
    I_beta: float
    gamma_q: float
    F: float | None
    I_corrected: float
    beta_corrected: float
    in_critical_regime: bool
    flags: dict = field(default_factory=dict)


def critical_regime_report(ce: CavityEmitter, quench: QuenchModel | None = None,
                           psb: PsbSpectrum | None = None, Q: float | None = None,
                           resonance: float | None = None) -> CriticalRegimeReport:
    """Critical-regime single-photon-source estimate. R = 4g^2/kappa, FWHM dephasing."""
    if Q is not None and Q <= 0:
        raise ValueError("Q must be positive")
    quench = quench or ce.quench
    gq = quench.rate(ce.g, ce.kappa) if quench else 0.0
    gamma = ce.gamma + gq
    gs = to_fwhm(ce.gamma_star, ce.convention)
    R = 4 * ce.g ** 2 / ce.kappa
    Gam = gamma + gs
    crit = ce.kappa > Gam and R > Gam
    if not crit:
        warnings.warn("parameters lie outside the critical regime (kappa, R > Gamma)")
    I, _, beta = critical_indistinguishability(R, ce.kappa, gamma, gs)
    F = None
    Ic, bc = I, beta
    if psb is not None:
        if Q is None:
            if resonance is None:
                raise ValueError("Q or the resonance frequency is required for the PSB filter")
            Q = resonance / ce.kappa
        F = psb.unfiltered_fraction(Q)
        Ic, bc = psb_corrections(I, beta, F, psb.debye_waller)
    flags = {"kappa_gt_Gamma": ce.kappa > Gam, "R_gt_Gamma": R > Gam,
             "weak_coupling_for_psb": 2 * ce.g < ce.kappa}
    return CriticalRegimeReport(I, beta, I * beta, gq, F, Ic, bc, crit, flags)


def quench_optimum(delta_q, gamma_star, eta_c):
    """kappa_max ~ 2 g_max ~ [Delta_q^2 gamma* / (1 - eta_c)]^(1/3)."""
    k = (delta_q ** 2 * gamma_star / (1 - eta_c)) ** (1.0 / 3.0)
    return k, k / 2


@dataclass
class PulsedTlsNumbers:
    p0_exact: float
    p_approx: tuple
    times: np.ndarray
    f1: np.ndarray
    f2: callable


def _otilde(rabi, gamma):
    return np.sqrt(complex(4 * rabi ** 2 - gamma ** 2)) / 2


def pulsed_p0(rabi, duration, gamma):
    ot = _otilde(rabi, gamma)
    if abs(ot) < 1e-12:
        # limit Omega~ -> 0
        val = (1 + gamma * duration / 4) ** 2
    else:
        val = (2 * ot * np.cos(duration * ot / 2) + gamma * np.sin(duration * ot / 2)) ** 2 / (4 * ot ** 2)
    return float(np.real(val) * math.exp(-duration * gamma / 2))


def pulsed_p_approx(rabi, duration, gamma):
    area = rabi * duration
    decay = math.exp(-gamma * duration / 2)
    return (math.cos(area / 2) ** 2 * decay, math.sin(area / 2) ** 2 * decay,
            gamma * duration / 8 * (2 + math.cos(area)) * decay)


def pulsed_amplitudes(rabi, duration, gamma, p1, p2):
    """Closed-form one- and two-photon amplitudes (global phases set to zero)."""
    ot = _otilde(rabi, gamma)
    tp = duration

    def f1(t):
        t = np.asarray(t, dtype=float)
        during = (rabi / (2 * ot ** 2) * np.sin(ot * t / 2)
                  * (2 * ot * np.cos(ot * (tp - t) / 2) + gamma * np.sin(ot * (tp - t) / 2))
                  * np.exp(-gamma * tp / 4))
        after = rabi / ot * np.sin(ot * tp / 2) * np.exp(-gamma * (2 * t - tp) / 4)
        return math.sqrt(gamma / p1) * np.where(t < tp, during, after)

    def f2(t1, t2):
        t1, t2 = np.broadcast_arrays(np.asarray(t1, float), np.asarray(t2, float))
        top = np.minimum(t2, tp)
        val = (rabi / ot * np.sin(ot * t1 / 2) / np.sin(ot * top / 2)
               * np.sin(ot * (top - t1) / 2) * f1(t2))
        val = np.where((t1 <= t2) & (t1 <= tp), val, 0.0)
        return math.sqrt(p1 * gamma / p2) * val

    return f1, f2


def pulsed_tls_numbers(tls: TwoLevelEmitter, times=None, p1=None, p2=None) -> PulsedTlsNumbers:
    if tls.drive is None:
        raise ValueError("a square pulse drive is required")
    if tls.gamma_star != 0:
        warnings.warn("amplitude formulas assume gamma* = 0")
    p = tls.drive
    approx = pulsed_p_approx(p.rabi, p.duration, tls.gamma)
    p1 = approx[1] if p1 is None else p1
    p2 = approx[2] if p2 is None else p2
    f1, f2 = pulsed_amplitudes(p.rabi, p.duration, tls.gamma, p1, p2)
    if times is None:
        times = np.linspace(0, p.duration + 12 / tls.gamma, 600)
    return PulsedTlsNumbers(pulsed_p0(p.rabi, p.duration, tls.gamma), approx, times,
                            f1(times), f2)
