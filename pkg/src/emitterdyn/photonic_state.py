"""Emitted-field reconstruction: temporal densities, pulse statistics and Bell-state analysis.

All two-time tables are built with a lag sweep on a uniform grid: the seed
vectors for every start time are pushed forward one interval at a time, so a
full (t, t') table costs one matrix product per lag. Piecewise-constant drives
are handled by giving each grid interval its own propagator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .dynamics import Generator, step_matrices
from .fock_liouville import (DensityState, Operator, SpaceDescriptor, dissipator,
                             hamiltonian_superop, transition)
from .models import CavityEmitter, TwoLevelEmitter, _dephasing_coefficient, build_liouvillian
from .photon_counting import (conditional_propagate, continue_propagation,
                              sequence_propagate, stacked_generator, total_number_distribution)

MIN_PROBABILITY = 1e-12


def _trapezoid_weights(t: np.ndarray) -> np.ndarray:
    w = np.zeros(t.size)
    h = np.diff(t)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid, optionally preceded by a denser uniform block on [start, dense_until]."""
    start: float
    end: float
    points: int
    dense_until: float | None = None
    dense_points: int = 0

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("a grid needs at least two points")
        if not self.end > self.start:
            raise ValueError("grid end must exceed grid start")
        if self.dense_until is not None and not self.start < self.dense_until < self.end:
            raise ValueError("dense block must end inside the grid")

    @property
    def times(self) -> np.ndarray:
        if self.dense_until is None or self.dense_points < 2:
            return np.linspace(self.start, self.end, self.points)
        head = np.linspace(self.start, self.dense_until, self.dense_points)
        return np.concatenate([head[:-1], np.linspace(self.dense_until, self.end, self.points)])

    @property
    def size(self) -> int:
        return self.times.size

    @property
    def step(self) -> float:
        """Spacing of the main (tail) block."""
        lo = self.start if self.dense_until is None or self.dense_points < 2 else self.dense_until
        return (self.end - lo) / (self.points - 1)

    @property
    def weights(self) -> np.ndarray:
        return _trapezoid_weights(self.times)

    def split_weights(self, threshold: float) -> tuple:
        """Trapezoid weights for [start, T] and [T, end]; T is snapped to the nearest node."""
        t = self.times
        if not self.start < threshold < self.end:
            raise ValueError(f"threshold {threshold} outside grid ({self.start}, {self.end})")
        k = int(np.argmin(np.abs(t - threshold)))
        k = min(max(k, 1), t.size - 2)
        early = np.zeros(t.size)
        late = np.zeros(t.size)
        early[:k + 1] = _trapezoid_weights(t[:k + 1])
        late[k:] = _trapezoid_weights(t[k:])
        return early, late, float(t[k])


@dataclass(frozen=True)
class EmissionSource:
    """A generator, the monitored output operator b (rate and efficiency absorbed) and rho0."""
    generator: Generator
    output: np.ndarray
    initial: DensityState
    drive_end: float = 0.0

    @property
    def dim(self):
        return self.initial.space.dim


def as_source(model, initial: DensityState | None = None) -> EmissionSource:
    if isinstance(model, EmissionSource):
        return model
    if isinstance(model, (TwoLevelEmitter, CavityEmitter)):
        gen = build_liouvillian(model)
        rho0 = initial
        if rho0 is None:
            rho0 = model.ground() if model.drive is not None else model.excited()
        end = model.drive.end if model.drive is not None else 0.0
        return EmissionSource(gen, model.channel().operator.matrix, rho0, end)
    raise TypeError(f"cannot build an emission source from {type(model).__name__}")


def slowest_rate(source: EmissionSource) -> float:
    lam = np.linalg.eigvals(source.generator.segments[-1][2])
    decay = -lam.real
    scale = max(np.abs(lam).max(), 1e-300)
    decay = decay[decay > 1e-9 * scale]
    if decay.size == 0:
        raise ValueError("generator has no decaying modes")
    return float(decay.min())


def default_grid(model, points: int = 600, lifetimes: float = 12.0, initial=None,
                 pulse_points: int | None = None) -> TimeGrid:
    """Grid reaching ``lifetimes`` slowest decay times past the drive, with the pulse resolved."""
    src = as_source(model, initial)
    end = src.drive_end + lifetimes / slowest_rate(src)
    if src.drive_end <= 0:
        return TimeGrid(0.0, end, points)
    if pulse_points is None:
        pulse_points = max(points // 10, 8)
    return TimeGrid(0.0, end, points, src.drive_end, pulse_points)


class _Engine:
    """Propagators, counting stacks and conditioned forward/backward sweeps on one grid."""

    def __init__(self, source: EmissionSource, grid: TimeGrid):
        self.source = source
        self.grid = grid
        self.t = grid.times
        d = source.dim
        self.d, self.D = d, d * d
        b = np.asarray(source.output, dtype=complex)
        eye = np.eye(d)
        self.b = b
        self.S = np.kron(b, eye)            # b rho
        self.R = np.kron(eye, b.conj())     # rho b^dag
        self.J = np.kron(b, b.conj())
        self.trace_row = eye.reshape(-1)
        self._steps = {}

    def steps(self, blocks: int | None):
        """Interval propagators: None for the full generator, k for a k-block counting stack."""
        if blocks not in self._steps:
            if blocks is None:
                self._steps[blocks] = step_matrices(self.source.generator, self.t)
            else:
                tf = (lambda L: stacked_generator(L, [self.b], blocks - 1)[0])
                self._steps[blocks] = step_matrices(self.source.generator, self.t, tf)
        return self._steps[blocks]

    def forward(self, blocks: int | None, v0=None) -> np.ndarray:
        mats, index = self.steps(blocks)
        n = mats[0].shape[0]
        out = np.zeros((self.t.size, n), complex)
        if v0 is None:
            out[0, :self.D] = self.source.initial.matrix.reshape(-1)
        else:
            out[0] = v0
        for k in range(self.t.size - 1):
            out[k + 1] = mats[index[k]] @ out[k]
        return out

    def backward(self, blocks: int, final_block: int) -> np.ndarray:
        """Rows phi_j with phi_j . v = trace of block ``final_block`` at grid end for v at t_j."""
        mats, index = self.steps(blocks)
        n = mats[0].shape[0]
        out = np.zeros((self.t.size, n), complex)
        out[-1, final_block * self.D:(final_block + 1) * self.D] = self.trace_row
        for k in range(self.t.size - 2, -1, -1):
            out[k] = out[k + 1] @ mats[index[k]]
        return out

    def lag_table(self, blocks: int | None, seeds: np.ndarray, observers) -> list:
        """tables[q][i, j] = observers[q](t_j) . U(t_j, t_i) seeds[i] for j >= i (zero below)."""
        mats, index = self.steps(blocks)
        N = self.t.size
        obs = [np.broadcast_to(o, (N, seeds.shape[1])) for o in observers]
        tables = [np.zeros((N, N), complex) for _ in obs]
        Y = seeds.T.copy()
        single = len(mats) == 1
        for m in range(N):
            cols = np.arange(N - m)
            for tab, o in zip(tables, obs):
                tab[cols, cols + m] = np.einsum("jd,dj->j", o[m:], Y)
            if m == N - 1:
                break
            Y = Y[:, :N - m - 1]
            if single:
                Y = mats[0] @ Y
            else:
                idx = index[m:N - 1]
                for u in np.unique(idx):
                    sel = idx == u
                    Y[:, sel] = mats[u] @ Y[:, sel]
        return tables


def _hermitian_complete(upper: np.ndarray) -> np.ndarray:
    full = np.triu(upper) + np.triu(upper, 1).conj().T
    return full


def _symmetric_complete(upper: np.ndarray) -> np.ndarray:
    return np.triu(upper) + np.triu(upper, 1).T


def _square_integral(w, A):
    return w @ A @ w


@dataclass(frozen=True)
class OnePhotonDensity:
    grid: TimeGrid
    values: np.ndarray
    p1: float

    @property
    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.values))

    def trace(self) -> float:
        return float(self.grid.weights @ self.diagonal)

    def purity(self) -> float:
        """Trapezoid estimate of the double integral of |xi_1|^2 (indistinguishability)."""
        return float(_square_integral(self.grid.weights, np.abs(self.values) ** 2))

    def normalized_purity(self) -> float:
        """Same double integral divided by the squared quadrature trace.

        This is the estimator the time-bin overlaps use, so identities between
        them hold to quadrature precision rather than to the grid error.
        """
        return self.purity() / self.trace() ** 2


@dataclass(frozen=True)
class TwoPhotonDensity:
    """xi_2 on time-ordered pairs; ``values[p, q]`` couples ket pair p with bra pair q."""
    grid: TimeGrid
    pairs: np.ndarray
    values: np.ndarray
    p2: float

    def pair_index(self, a: int, b: int) -> int:
        if a > b:
            raise ValueError("pairs are time ordered")
        n = self.grid.size
        return a * n - a * (a - 1) // 2 + (b - a)

    def value(self, t1: int, t2: int, t1p: int, t2p: int) -> complex:
        if t1 > t2 or t1p > t2p:
            return 0.0
        return self.values[self.pair_index(t1, t2), self.pair_index(t1p, t2p)]

    def pair_weights(self) -> np.ndarray:
        w = self.grid.weights
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        return w[a] * w[b] * np.where(a == b, 0.5, 1.0)

    def trace(self) -> float:
        return float(np.real(self.pair_weights() @ np.diag(self.values)))

    def purity(self) -> float:
        """Quadrature-consistent trace purity: sum |xi_2|^2 over the discrete trace squared."""
        w = self.pair_weights()
        return float(w @ (np.abs(self.values) ** 2) @ w / self.trace() ** 2)


def _counting_probabilities(eng: _Engine, blocks: int) -> np.ndarray:
    end = eng.forward(blocks)[-1]
    return np.array([np.real(eng.trace_row @ end[k * eng.D:(k + 1) * eng.D]) for k in range(blocks)])


def one_photon_density(model, grid: TimeGrid | None = None, initial=None) -> OnePhotonDensity:
    src = as_source(model, initial)
    grid = grid or default_grid(src)
    eng = _Engine(src, grid)
    p = _counting_probabilities(eng, 2)
    if p[1] < MIN_PROBABILITY:
        raise ValueError(f"one-photon probability {p[1]:.3g} too small to normalize")
    rho0 = eng.forward(1)
    phi0 = eng.backward(1, 0)
    seeds = rho0 @ eng.S.T
    (tab,) = eng.lag_table(1, seeds, [phi0 @ eng.R])
    return OnePhotonDensity(grid, _hermitian_complete(tab) / p[1], float(p[1]))


def _pairs(n):
    return np.array([(a, b) for a in range(n) for b in range(a, n)])


def two_photon_density(model, grid: TimeGrid | None = None, initial=None) -> TwoPhotonDensity:
    src = as_source(model, initial)
    grid = grid or default_grid(src, points=80)
    eng = _Engine(src, grid)
    N, D = grid.size, eng.D
    p = _counting_probabilities(eng, 3)
    if p[2] < MIN_PROBABILITY:
        raise ValueError(f"two-photon probability {p[2]:.3g} too small to normalize")
    mats, index = eng.steps(1)
    rho0 = eng.forward(1)
    phi0 = eng.backward(1, 0)
    S, R = eng.S, eng.R
    pairs = _pairs(N)
    out = TwoPhotonDensity(grid, pairs, np.zeros((len(pairs), len(pairs)), complex), float(p[2]))
    pid = np.full((N, N), -1)
    for k, (a, b) in enumerate(pairs):
        pid[a, b] = k

    def back_sweep(last_op, third_op):
        # Psi[l, k] = phi_l O4 U0(t_l, t_k) O3, zero for k > l
        psi = np.zeros((N, N, D), complex)
        rows = phi0 @ last_op
        for l in range(N):
            r = rows[l]
            psi[l, l] = r @ third_op
            for k in range(l - 1, -1, -1):
                r = r @ mats[index[k]]
                psi[l, k] = r @ third_op
        return psi

    # patterns by which operator comes 2nd/3rd/4th after the first ket time (S = ket, R = bra)
    patterns = {"KKBB": (S, R, R), "KBKB": (R, S, R), "KBBK": (R, R, S)}
    vals = out.values
    for name, (o2, o3, o4) in patterns.items():
        psi = back_sweep(o4, o3).transpose(1, 2, 0)      # (k, D, l)
        for i in range(N):
            x = S @ rho0[i]
            Z = np.zeros((N, N, D), complex)              # Z[j, k] = U0(t_k, t_j) o2 U0(t_j, t_i) x
            for j in range(i, N):
                z = o2 @ x
                Z[j, j] = z
                for k in range(j, N - 1):
                    z = mats[index[k]] @ z
                    Z[j, k + 1] = z
                if j < N - 1:
                    x = mats[index[j]] @ x
            V = np.matmul(Z.transpose(1, 0, 2), psi)      # (k, j, l)
            for j in range(i, N):
                for k in range(j, N):
                    ls = np.arange(k, N)
                    v = V[k, j, ls] / p[2]
                    if name == "KKBB":
                        ket, bra = np.full(ls.size, pid[i, j]), pid[k, ls]
                    elif name == "KBKB":
                        ket, bra = np.full(ls.size, pid[i, k]), pid[j, ls]
                    else:
                        ket, bra = pid[i, ls], np.full(ls.size, pid[j, k])
                    vals[ket, bra] = v
                    vals[bra, ket] = v.conj()
    return out


@dataclass(frozen=True)
class HOMReport:
    mu: float
    g2: float
    M: float
    V_HOM: float
    lambda1: float
    lambda2: float
    lambda12_minus: float
    lambda12_ordered: float = 0.0

    def v_sh(self, phase: float) -> float:
        return self.lambda1 * math.cos(phase)

    def visibility(self, phase: float) -> float:
        return (self.M - self.g2 - 2 * self.lambda12_minus * math.cos(phase)
                + self.lambda2 * math.cos(2 * phase))

    def g2_uncorrelated(self, phase: float) -> float:
        return g2_uncorrelated(self.mu, self.v_sh(phase))


def g2_uncorrelated(mu: float, v_sh: float) -> float:
    """Uncorrelated-peak area mu^2 (1 - V_SH^2), for comparison with measured normalizations."""
    return mu * mu * (1.0 - v_sh * v_sh)


def pulse_statistics(model, grid: TimeGrid | None = None, initial=None) -> HOMReport:
    """Intensity-normalized pulse statistics; V_HOM is reported phase averaged."""
    src = as_source(model, initial)
    grid = grid or default_grid(src)
    eng = _Engine(src, grid)
    w = grid.weights
    b, d = eng.b, eng.d
    rho = eng.forward(None)
    num_row = (b.conj().T @ b).T.reshape(-1)
    b_row = b.T.reshape(-1)
    bd_row = b.conj().reshape(-1)               # Tr[b^dag X]
    n_t = np.real(rho @ num_row)
    amp = rho @ b_row
    mu = float(w @ n_t)
    if mu <= 0:
        raise ValueError("source emits no intensity on this grid")
    s_seed = rho @ eng.S.T
    j_seed = rho @ eng.J.T
    r_seed = rho @ eng.R.T
    g1, lam2 = eng.lag_table(None, s_seed, [bd_row, b_row])
    g2t, three_a = eng.lag_table(None, j_seed, [num_row, bd_row])
    (three_b,) = eng.lag_table(None, r_seed, [num_row])
    G1 = _hermitian_complete(g1)
    G2 = np.real(_symmetric_complete(g2t))
    L2 = _symmetric_complete(lam2)
    # F[t, t'] = <b^dag(t') b^dag(t) b(t)>: three_a for t' >= t, three_b (transposed) below
    F = np.triu(three_a) + np.tril(three_b.T, -1)
    lam_minus = np.real(amp[None, :] * F - amp[:, None] * F.T)
    M = float(_square_integral(w, np.abs(G1) ** 2) / mu ** 2)
    g2 = float(_square_integral(w, G2) / mu ** 2)
    lam1 = float(w @ np.abs(amp) ** 2 / mu)
    lam2v = float(_square_integral(w, np.abs(L2) ** 2) / mu ** 2)
    l12 = float(_square_integral(w, lam_minus) / mu ** 2)
    upper = np.triu(np.ones_like(lam_minus), 1) + 0.5 * np.eye(len(w))
    l12_ord = float(_square_integral(w, lam_minus * upper) / mu ** 2)
    return HOMReport(mu, g2, M, M - g2, lam1, lam2v, l12, l12_ord)


@dataclass(frozen=True)
class MwpoDecomposition:
    probabilities: np.ndarray      # p_0 .. p_nmax
    mu_n: np.ndarray               # n p_n for n = 1 .. nmax
    table: np.ndarray              # M_{jk}, j, k = 1 .. nmax
    Lambda1: float
    Lambda2: float
    Lambda12: float
    first_order: dict = field(default=None, repr=False)   # n -> <b^dag(t') b(t)>_n table

    @property
    def M(self) -> float:
        mu = self.mu_n.sum()
        return float(self.mu_n @ self.table @ self.mu_n / mu ** 2)

    @property
    def M12(self) -> float:
        return float(self.table[0, 1])


def mwpo_decomposition(model, grid: TimeGrid | None = None, initial=None,
                       n_max: int = 3) -> MwpoDecomposition:
    """Mean wavepacket overlap split by photon-number subspace.

    The n-photon first-order correlation is assembled from k jumps before the
    earlier time, m between the two times and l after the later one, with
    k + m + l = n - 1. For n = 2 these three placements give Lambda_2,
    Lambda_12 and Lambda_1 respectively.
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    src = as_source(model, initial)
    grid = grid or default_grid(src)
    eng = _Engine(src, grid)
    w, D, nb = grid.weights, eng.D, n_max
    p = _counting_probabilities(eng, nb + 1)
    if p[1] < MIN_PROBABILITY or p[2] < MIN_PROBABILITY:
        raise ValueError("p1 and p2 must both exceed 1e-12")
    fwd = eng.forward(nb)
    phis = [eng.backward(nb, l)[:, :D] for l in range(nb)]
    pieces = {}
    for k in range(nb):
        seeds = np.zeros((grid.size, nb * D), complex)
        seeds[:, :D] = fwd[:, k * D:(k + 1) * D] @ eng.S.T
        keys, observers = [], []
        for m in range(nb - k):
            for l in range(nb - k - m):
                o = np.zeros((grid.size, nb * D), complex)
                o[:, m * D:(m + 1) * D] = phis[l] @ eng.R
                keys.append((k, m, l))
                observers.append(o)
        for key, tab in zip(keys, eng.lag_table(nb, seeds, observers)):
            pieces[key] = _hermitian_complete(tab)
    G = {n: sum(v for key, v in pieces.items() if sum(key) == n - 1) for n in range(1, nb + 1)}
    mu_n = np.array([n * p[n] for n in range(1, nb + 1)])
    table = np.zeros((nb, nb))
    for j in range(1, nb + 1):
        for k in range(1, nb + 1):
            if mu_n[j - 1] > 0 and mu_n[k - 1] > 0:
                table[j - 1, k - 1] = np.real(_square_integral(w, G[j] * G[k].conj())) / (
                    mu_n[j - 1] * mu_n[k - 1])
    xi1 = G[1] / p[1]

    def lam(key):
        return float(np.real(_square_integral(w, xi1 * pieces[key].conj())) / p[2])

    return MwpoDecomposition(p, mu_n, table, lam((0, 0, 1)), lam((1, 0, 0)), lam((0, 1, 0)), G)


@dataclass(frozen=True)
class SelfHomodyneResult:
    probabilities: dict            # keys '0', '+', '-', '++', '+-', '-+', '--'
    times: np.ndarray
    zeta10: np.ndarray
    v_sh1: float
    p1: float

    def total(self) -> float:
        return float(sum(self.probabilities.values()))


def _pair_liouvillian(emitter: TwoLevelEmitter):
    sp = SpaceDescriptor([2, 2], ["reference", "signal"])
    s = transition(2, 0, 1)
    eye = np.eye(2)
    sr = Operator(sp, np.kron(s, eye))
    ss = Operator(sp, np.kron(eye, s))
    H = emitter.omega * (sr.dag @ sr + ss.dag @ ss)
    L = hamiltonian_superop(H) + emitter.gamma * (dissipator(sr) + dissipator(ss))
    k = _dephasing_coefficient(emitter.gamma_star, emitter.convention)
    if k:
        L = L + k * (dissipator(sr.dag @ sr) + dissipator(ss.dag @ ss))
    return sp, sr.matrix, ss.matrix, L


def self_homodyne_decompose(emitter: TwoLevelEmitter, theta: float, efficiency: float,
                            phase: float = 0.0, grid: TimeGrid | None = None) -> SelfHomodyneResult:
    """Two identical emitters prepared in cos(theta)|g> + sin(theta)|e>, mixed on a balanced splitter."""
    if not 0 <= efficiency <= 1:
        raise ValueError("efficiency must lie in [0, 1]")
    sp, sr, ss, L = _pair_liouvillian(emitter)
    grid = grid or TimeGrid(0.0, 12.0 / emitter.gamma, 600)
    amp = math.sqrt(efficiency * emitter.gamma / 2)
    plus = amp * (sr + np.exp(1j * phase) * ss)
    minus = amp * (sr - np.exp(1j * phase) * ss)
    one = np.array([math.cos(theta), math.sin(theta)], complex)
    rho0 = DensityState.pure(np.kron(one, one), sp)
    gen = Generator.constant(L)
    seq = sequence_propagate(gen, [plus, minus], rho0, grid.start, grid.end, max_len=2)
    names = {(): "0", (0,): "+", (1,): "-", (0, 0): "++", (0, 1): "+-", (1, 0): "-+", (1, 1): "--"}
    probs = {names[k]: v.trace for k, v in seq.items()}
    p10 = probs["+"] + probs["-"]
    # <V_SH(t)>_1 = Tr[U0(end, t) (J+ - J-) U0(t, t0) rho0]
    Jp = np.kron(plus, plus.conj())
    Jm = np.kron(minus, minus.conj())
    t = grid.times
    mats, index = step_matrices(gen, t, lambda M: M - Jp - Jm)
    fwd = np.zeros((t.size, 16), complex)
    fwd[0] = rho0.matrix.reshape(-1)
    bwd = np.zeros((t.size, 16), complex)
    bwd[-1] = np.eye(4).reshape(-1)
    for k in range(t.size - 1):
        fwd[k + 1] = mats[index[k]] @ fwd[k]
        bwd[-2 - k] = bwd[-1 - k] @ mats[index[-1 - k]]
    signal = np.real(np.einsum("td,td->t", bwd, fwd @ (Jp - Jm).T))
    cphi = math.cos(phase)
    if abs(cphi) < 1e-12 or p10 < MIN_PROBABILITY:
        raise ValueError("zeta_10 is not recoverable at cos(phase) = 0 or without one-photon events")
    zeta = np.sqrt(np.clip(signal / (p10 * cphi), 0.0, None))
    v1 = (probs["+"] - probs["-"]) / p10
    return SelfHomodyneResult(probs, t, zeta, float(v1), efficiency * math.sin(theta) ** 2)


@dataclass(frozen=True)
class PhiPlusConstruction:
    """Photon-number statistics of the emit / pi-flip / emit sequence, plus the first photon's xi_1."""
    threshold: float
    probabilities: np.ndarray
    mu: float
    g2: float
    density: OnePhotonDensity

    @property
    def p0(self):
        return float(self.probabilities[0])

    @property
    def p1(self):
        return float(self.probabilities[1])

    @property
    def p2(self):
        return float(self.probabilities[2])


def phi_plus_construction(emitter: TwoLevelEmitter, threshold: float,
                          grid: TimeGrid | None = None) -> PhiPlusConstruction:
    """Excited emitter, ideal instantaneous pi flip at the threshold, full second emission."""
    if emitter.drive is not None:
        raise ValueError("the construction assumes perfect preparation (no drive)")
    grid = grid or TimeGrid(0.0, threshold + 12.0 / emitter.gamma, 600)
    threshold = grid.split_weights(threshold)[2]
    L = emitter.liouvillian()
    ch = emitter.channel()
    first = conditional_propagate(L, [ch], emitter.excited(), grid.start, threshold, n_max=3)
    flip = np.array([[0, 1], [1, 0]], complex)
    end = continue_propagation(L, [ch], first, threshold, grid.end + threshold, unitary=flip)
    p = total_number_distribution(end)
    n = np.arange(p.size)
    mu = float(n @ p)
    g2 = float((n * (n - 1)) @ p / mu ** 2)
    density = one_photon_density(emitter, grid)
    return PhiPlusConstruction(threshold, p, mu, g2, density)


@dataclass(frozen=True)
class TimeBinReport:
    threshold: float
    kind: str                      # "psi_plus" or "phi_plus"
    elements: dict
    fidelity: float
    concurrence: float
    I_ss: float
    I_st: float
    I_tt: float
    mu_s: float
    mu_t: float
    lower_bounds: dict
    upper_estimates: dict
    estimated: bool = False
    two_qubit_state: np.ndarray = field(default=None, repr=False)


def time_bin_analysis(density: OnePhotonDensity | PhiPlusConstruction, threshold: float,
                      pure_mode_amplitude: Callable | np.ndarray | None = None) -> TimeBinReport:
    """Early/late time-bin qubit elements of a single-photon state (psi+) or the phi+ construction.

    Without a reference amplitude the elements are the square-root upper
    estimates and ``estimated`` is set; amplitudes are defined up to a global
    phase.
    """
    phi = density if isinstance(density, PhiPlusConstruction) else None
    xi = phi.density if phi is not None else density
    grid = xi.grid
    ws, wt, used = grid.split_weights(threshold)
    diag = xi.diagonal
    mu_s, mu_t = float(ws @ diag), float(wt @ diag)
    absq = np.abs(xi.values) ** 2
    I = {"ss": ws @ absq @ ws / mu_s ** 2, "tt": wt @ absq @ wt / mu_t ** 2,
         "st": ws @ absq @ wt / (mu_s * mu_t)}
    mus = {"ss": (mu_s, mu_s), "tt": (mu_t, mu_t), "st": (mu_s, mu_t)}
    lower = {k: float(I[k] * math.sqrt(a * b)) for k, (a, b) in mus.items()}
    upper = {k: float(math.sqrt(a * b * I[k])) for k, (a, b) in mus.items()}
    if pure_mode_amplitude is not None:
        f = pure_mode_amplitude
        f = np.asarray(f(grid.times) if callable(f) else f, dtype=complex)
        ns, nt = ws @ np.abs(f) ** 2, wt @ np.abs(f) ** 2
        fs, ft = ws * f, wt * f
        rho = {"ss": fs.conj() @ xi.values @ fs / ns, "tt": ft.conj() @ xi.values @ ft / nt,
               "st": fs.conj() @ xi.values @ ft / math.sqrt(ns * nt)}
        estimated = False
    else:
        rho = dict(upper)
        estimated = True
    state = np.zeros((4, 4), complex)       # basis index n_s + 2 n_t
    if phi is None:
        state[1, 1], state[2, 2] = rho["ss"].real, rho["tt"].real
        state[1, 2] = rho["st"]
        state[2, 1] = np.conj(rho["st"])
        target = np.array([0, 1, 1, 0]) / math.sqrt(2)
        elements = {"rho_ss": complex(rho["ss"]), "rho_tt": complex(rho["tt"]),
                    "rho_st": complex(rho["st"])}
        kind = "psi_plus"
    else:
        r0000 = phi.p0
        # alpha^2 = p0 and beta^2 = p2 for the flip construction
        r1111 = float(np.real(rho["ss"] * rho["tt"] / phi.p0))
        state[0, 0], state[3, 3] = r0000, r1111
        state[0, 3] = rho["st"]
        state[3, 0] = np.conj(rho["st"])
        target = np.array([1, 0, 0, 1]) / math.sqrt(2)
        elements = {"rho_0000": complex(r0000), "rho_1111": complex(r1111),
                    "rho_0011": complex(rho["st"])}
        kind = "phi_plus"
    # quadrature error can push the projected trace a hair above one, so no DensityState here
    F = fidelity(np.outer(target, target).astype(complex), state)
    C = concurrence(state)
    return TimeBinReport(used, kind, elements, F, C, float(I["ss"]), float(I["st"]),
                         float(I["tt"]), mu_s, mu_t, lower, upper, estimated, state)


def _clip_psd(m: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    m = 0.5 * (m + m.conj().T)
    lam, V = np.linalg.eigh(m)
    if lam.min() < -tol:
        raise ValueError(f"state is not positive semidefinite (eigenvalue {lam.min():.3g})")
    tr = np.real(np.trace(m))
    lam = np.clip(lam, 0.0, None)
    out = (V * lam) @ V.conj().T
    if lam.sum() > 0:
        out *= tr / lam.sum()
    return out


def fidelity(rho, sigma) -> float:
    a = _clip_psd(rho.matrix if isinstance(rho, DensityState) else np.asarray(rho, complex))
    b = _clip_psd(sigma.matrix if isinstance(sigma, DensityState) else np.asarray(sigma, complex))
    if a.shape != b.shape:
        raise ValueError("states live on different spaces")
    lam, V = np.linalg.eigh(a)
    if np.sum(lam > 1e-12 * max(lam.max(), 1e-300)) == 1:
        psi = V[:, -1] * math.sqrt(lam[-1])
        return float(np.real(psi.conj() @ b @ psi))
    ra = linalg.sqrtm(a)
    ev = np.linalg.eigvalsh(0.5 * (ra @ b @ ra + (ra @ b @ ra).conj().T))
    return float(np.sum(np.sqrt(np.clip(ev, 0, None))) ** 2)


def concurrence(rho, subspace=None) -> float:
    """Wootters concurrence; ``subspace`` picks four basis indices of a larger space."""
    m = rho.matrix if isinstance(rho, DensityState) else np.asarray(rho, complex)
    if subspace is not None:
        idx = np.asarray(subspace)
        m = m[np.ix_(idx, idx)]
    if m.shape != (4, 4):
        raise ValueError("concurrence needs a two-qubit state")
    m = _clip_psd(m)
    yy = np.fliplr(np.diag([-1.0, 1.0, 1.0, -1.0]))
    R = m @ yy @ m.conj() @ yy
    lam = np.sort(np.sqrt(np.clip(np.linalg.eigvals(R).real, 0, None)))[::-1]
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def state_metrics(rho: DensityState, sigma: DensityState, subspace=None) -> tuple:
    """(fidelity between the two states, concurrence of ``sigma``)."""
    if rho.space.dim != sigma.space.dim:
        raise ValueError("states live on different spaces")
    c = None
    if subspace is not None or sigma.space.dim == 4:
        c = concurrence(sigma, subspace)
    return fidelity(rho, sigma), c
