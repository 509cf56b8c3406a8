"""Photon-number decomposition of emitter dynamics and detector models.

Conditional states are propagated all at once with a block lower-triangular
generator: block n carries rho_n, the diagonal blocks hold the no-jump
generator L0, and channel i feeds block n - e_i into block n.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .dynamics import Generator, PropagatorCache, _as_generator, _matrix, propagate_vector
from .fock_liouville import DensityState, Operator, SuperOperator

PNRD = "PNRD"
BD = "BD"


@dataclass(frozen=True)
class CollapseChannel:
    operator: Operator
    label: str = ""

    def __post_init__(self):
        if not np.any(np.abs(self.operator.matrix) > 0):
            raise ValueError(f"collapse channel {self.label!r} has a zero operator")

    @property
    def jump(self) -> np.ndarray:
        c = self.operator.matrix
        return np.kron(c, c.conj())


@dataclass(frozen=True)
class CountVector:
    counts: tuple

    def __init__(self, counts):
        counts = tuple(int(c) for c in counts)
        if any(c < 0 for c in counts):
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self):
        return sum(self.counts)


@dataclass
class ConditionalEnsemble:
    states: dict                  # count tuple -> DensityState (unnormalized)
    n_max: int
    residual: float
    labels: tuple = ()
    metadata: dict = field(default_factory=dict)

    def trace(self, counts) -> float:
        rho = self.states.get(tuple(counts))
        return 0.0 if rho is None else rho.trace

    def total_state(self) -> np.ndarray:
        return sum(r.matrix for r in self.states.values())

    @property
    def space(self):
        return next(iter(self.states.values())).space


@dataclass(frozen=True)
class DetectorSpec:
    kind: str = PNRD
    efficiency: float = 1.0
    dark_rate: float = 0.0
    gate_start: float = 0.0
    gate_duration: float = np.inf
    distance: float = 0.0
    speed: float = 2e8

    def __post_init__(self):
        if self.kind not in (PNRD, BD):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if not self.gate_duration > 0:
            raise ValueError("gate duration must be positive")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0 or self.distance < 0:
            raise ValueError("negative rate or distance")

    @property
    def delay(self) -> float:
        return self.distance / self.speed

    def retarded(self, t: float) -> float:
        return t - self.delay

    @property
    def dark_mean(self) -> float:
        if self.dark_rate == 0:
            return 0.0
        return self.dark_rate * self.gate_duration

    def dark_probability(self, k: int) -> float:
        lam = self.dark_mean
        if lam == 0:
            return 1.0 if k == 0 else 0.0
        return lam ** k * math.exp(-lam) / math.factorial(k)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def beam_splitter_network(fields: Sequence, theta: float = np.pi / 4, relative_phases=None,
                          transmissions=None, detector_efficiency: float = 1.0,
                          labels=None) -> list:
    """Detector fields from pairs of source fields mixed on balanced-or-not splitters.

    Each source field b_k is first scaled by sqrt(eta_k) exp(-i phi_k); consecutive
    pairs (b_0, b_1), (b_2, b_3), ... are then mixed by the rotation R(theta).
    """
    ops = [f.matrix if isinstance(f, Operator) else np.asarray(f, dtype=complex) for f in fields]
    if len(ops) == 0 or len(ops) % 2:
        raise ValueError("splitter network needs an even, nonzero number of input fields")
    space = fields[0].space if isinstance(fields[0], Operator) else None
    n = len(ops)
    phases = np.zeros(n) if relative_phases is None else np.broadcast_to(relative_phases, (n,))
    trans = np.ones(n) if transmissions is None else np.broadcast_to(transmissions, (n,))
    if np.any((trans < 0) | (trans > 1)):
        raise ValueError("transmissions must lie in [0, 1]")
    scaled = [math.sqrt(t * detector_efficiency) * np.exp(-1j * p) * o
              for o, p, t in zip(ops, phases, trans)]
    R = rotation(theta)
    out = []
    for pair in range(n // 2):
        b1, b2 = scaled[2 * pair], scaled[2 * pair + 1]
        for row in range(2):
            m = R[row, 0] * b1 + R[row, 1] * b2
            label = labels[2 * pair + row] if labels else f"d{2 * pair + row + 1}"
            op = Operator.from_matrix(m, space)
            if np.any(np.abs(m) > 0):
                out.append(CollapseChannel(op, label))
            else:
                out.append(_ZeroChannel(op, label))
    return out


class _ZeroChannel(CollapseChannel):
    # an output port that receives no light still counts as a detector
    def __post_init__(self):
        pass


def count_vectors(n_channels: int, n_max: int) -> list:
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    vecs = [c for c in itertools.product(range(n_max + 1), repeat=n_channels) if sum(c) <= n_max]
    return sorted(vecs, key=lambda c: (sum(c), tuple(-x for x in c)))


def _channel_matrix(ch):
    if isinstance(ch, CollapseChannel):
        return ch.operator.matrix
    if isinstance(ch, Operator):
        return ch.matrix
    return np.asarray(ch, dtype=complex)


def stacked_generator(L, channels, n_max: int):
    """Block generator on the direct sum over count vectors; returns (matrix, index list)."""
    L = _matrix(L)
    D = L.shape[0]
    jumps = []
    for ch in channels:
        c = _channel_matrix(ch)
        jumps.append(np.kron(c, c.conj()))
    L0 = L - sum(jumps) if jumps else L
    vecs = count_vectors(len(jumps), n_max)
    index = {v: k for k, v in enumerate(vecs)}
    big = np.zeros((len(vecs) * D, len(vecs) * D), complex)
    for v, k in index.items():
        big[k * D:(k + 1) * D, k * D:(k + 1) * D] = L0
        for i, J in enumerate(jumps):
            if v[i] > 0:
                src = list(v)
                src[i] -= 1
                j = index[tuple(src)]
                big[k * D:(k + 1) * D, j * D:(j + 1) * D] = J
    return big, vecs


def _stacked_propagate(gen: Generator, channels, vec_in: dict, t0, t1, n_max):
    """Propagate {counts: vec} through [t0, t1] while counting jumps on ``channels``.

    Input count vectors are concatenated with the new window counts.
    """
    n_ch = len(channels)
    out = {}
    pieces = gen.pieces(t0, t1) if t1 > t0 else []
    stacks = {}
    props = []
    for lo, hi, cache in pieces:
        key = id(cache)
        if key not in stacks:
            stacks[key] = stacked_generator(cache.L, channels, n_max)[0]
        props.append(linalg.expm(stacks[key] * (hi - lo)))
    D = next(iter(vec_in.values())).size
    base_vecs = count_vectors(n_ch, n_max)
    for prev, v in vec_in.items():
        budget = n_max - sum(prev)
        if budget < 0:
            continue
        state = np.zeros(len(base_vecs) * D, complex)
        state[:D] = v
        for P in props:
            state = P @ state
        for k, new in enumerate(base_vecs):
            if sum(new) <= budget:
                out[tuple(prev) + tuple(new)] = state[k * D:(k + 1) * D]
    return out


def _finish(vecs: dict, space, n_max, labels, metadata=None) -> ConditionalEnsemble:
    d = space.dim
    states = {}
    total = 0.0
    for counts, v in vecs.items():
        m = v.reshape(d, d)
        m = 0.5 * (m + m.conj().T)
        states[counts] = DensityState(space, m, normalized=False)
        total += float(np.trace(m).real)
    return ConditionalEnsemble(states, n_max, 1.0 - total, tuple(labels), metadata or {})


def conditional_propagate(L, channels, rho0: DensityState, t0: float, t1: float,
                          n_max: int = 2) -> ConditionalEnsemble:
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    gen = _as_generator(L)
    vecs = _stacked_propagate(gen, list(channels), {(): rho0.matrix.reshape(-1)}, t0, t1, n_max)
    labels = [getattr(c, "label", f"c{i}") for i, c in enumerate(channels)]
    return _finish(vecs, rho0.space, n_max, labels)


def window_conditional(L, channels, rho0: DensityState, t0: float, window: DetectorSpec,
                       t_final: float, n_max: int = 2) -> ConditionalEnsemble:
    """Unconditional evolution outside the retarded detection window, counting inside it."""
    gen = _as_generator(L)
    w0 = window.retarded(window.gate_start)
    w1 = window.retarded(window.gate_start + window.gate_duration)
    if w0 < t0 - 1e-12 or w1 > t_final + 1e-12:
        raise ValueError(f"window [{w0}, {w1}] outside [{t0}, {t_final}]")
    v = propagate_vector(gen, rho0.matrix.reshape(-1), t0, w0)
    vecs = _stacked_propagate(gen, list(channels), {(): v}, w0, w1, n_max)
    vecs = {k: propagate_vector(gen, x, w1, t_final) for k, x in vecs.items()}
    needed = window.gate_duration + 2 * window.delay
    meta = {"window": (w0, w1), "minimum_protocol_time": needed,
            "protocol_time_sufficient": (t_final - t0) >= needed - 1e-12}
    labels = [getattr(c, "label", f"c{i}") for i, c in enumerate(channels)]
    return _finish(vecs, rho0.space, n_max, labels, meta)


def continue_propagation(L, channels, ensemble: ConditionalEnsemble, t0: float, t1: float,
                         unitary=None) -> ConditionalEnsemble:
    """Apply an instantaneous unitary to every conditional state, then keep counting.

    Counts from before and after the kick are added channel by channel.
    """
    gen = _as_generator(L)
    d = ensemble.space.dim
    U = None if unitary is None else _channel_matrix(unitary)
    vec_in = {}
    for k, rho in ensemble.states.items():
        m = rho.matrix if U is None else U @ rho.matrix @ U.conj().T
        vec_in[k] = m.reshape(-1)
    raw = _stacked_propagate(gen, list(channels), vec_in, t0, t1, ensemble.n_max)
    n = len(next(iter(ensemble.states)))
    merged = {}
    for key, v in raw.items():
        tot = tuple(a + b for a, b in zip(key[:n], key[n:]))
        merged[tot] = merged.get(tot, 0) + v
    return _finish(merged, ensemble.space, ensemble.n_max, ensemble.labels, dict(ensemble.metadata))


def sequence_propagate(L, channels, rho0: DensityState, t0: float, t1: float,
                       max_len: int = 2) -> dict:
    """Conditional states resolved by the ordered sequence of detection channels.

    Keys are tuples of channel indices in detection order, up to ``max_len``
    detections; the empty tuple is the no-detection branch.
    """
    gen = _as_generator(L)
    chans = list(channels)
    words = [()]
    for n in range(1, max_len + 1):
        words += list(itertools.product(range(len(chans)), repeat=n))
    index = {w: k for k, w in enumerate(words)}
    d = rho0.space.dim
    D = d * d
    jumps = [np.kron(c, c.conj()) for c in map(_channel_matrix, chans)]

    def stacked(Lm):
        L0 = Lm - sum(jumps)
        big = np.zeros((len(words) * D, len(words) * D), complex)
        for w, k in index.items():
            big[k * D:(k + 1) * D, k * D:(k + 1) * D] = L0
            if w:
                j = index[w[:-1]]
                big[k * D:(k + 1) * D, j * D:(j + 1) * D] = jumps[w[-1]]
        return big

    state = np.zeros(len(words) * D, complex)
    state[:D] = rho0.matrix.reshape(-1)
    built = {}
    for lo, hi, cache in gen.pieces(t0, t1) if t1 > t0 else []:
        if id(cache) not in built:
            built[id(cache)] = stacked(cache.L)
        state = linalg.expm(built[id(cache)] * (hi - lo)) @ state
    out = {}
    for w, k in index.items():
        m = state[k * D:(k + 1) * D].reshape(d, d)
        out[w] = DensityState(rho0.space, 0.5 * (m + m.conj().T), normalized=False)
    return out


def photon_number_probabilities(ensemble: ConditionalEnsemble) -> list:
    return [(CountVector(k), rho.trace) for k, rho in ensemble.states.items()]


def total_number_distribution(ensemble: ConditionalEnsemble) -> np.ndarray:
    p = np.zeros(ensemble.n_max + 1)
    for k, rho in ensemble.states.items():
        p[sum(k)] += rho.trace
    return p


def detection_likelihood(detector: DetectorSpec, m: int, n: int) -> float:
    """P(m | n) for one detector; efficiency is assumed folded into the field operator."""
    if detector.kind == PNRD:
        return detector.dark_probability(m - n) if m >= n else 0.0
    if m == 0:
        return detector.dark_probability(0) if n == 0 else 0.0
    if m == 1:
        return 1.0 - (detector.dark_probability(0) if n == 0 else 0.0)
    return 0.0


def _dark_cutoff(det: DetectorSpec, tol=1e-14) -> int:
    if det.dark_mean == 0:
        return 0
    k, tail = 0, 1.0
    while tail > tol:
        tail -= det.dark_probability(k)
        k += 1
    return k


def remix_measurement(ensemble: ConditionalEnsemble, detectors: Sequence[DetectorSpec],
                      max_outcome: int | None = None) -> dict:
    """Outcome states rho_m = sum_n P(m|n) rho_n for independent detectors."""
    detectors = list(detectors)
    n_det = len(next(iter(ensemble.states)))
    if len(detectors) == 1 and n_det > 1:
        detectors = detectors * n_det
    if len(detectors) != n_det:
        raise ValueError("one detector per counted channel is required")
    for det in detectors:
        if det.dark_rate < 0:
            raise ValueError("negative dark rate")
    ranges = []
    for det in detectors:
        if det.kind == BD:
            ranges.append(range(2))
        else:
            top = ensemble.n_max + _dark_cutoff(det) if max_outcome is None else max_outcome
            ranges.append(range(top + 1))
    space = ensemble.space
    out = {}
    for m in itertools.product(*ranges):
        acc = np.zeros((space.dim, space.dim), complex)
        hit = False
        for n, rho in ensemble.states.items():
            w = 1.0
            for det, mi, ni in zip(detectors, m, n):
                w *= detection_likelihood(det, mi, ni)
                if w == 0.0:
                    break
            if w:
                acc += w * rho.matrix
                hit = True
        if hit:
            out[m] = DensityState(space, acc, normalized=False)
    return out
