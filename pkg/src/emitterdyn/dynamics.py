"""Time evolution, correlation functions, regression and adiabatic elimination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp

from .fock_liouville import (DensityState, DimensionError, Operator, SpaceDescriptor,
                             SuperOperator, jump_superop, nonhermitian_superop,
                             superop_from_pair)

EIG_COND_LIMIT = 1e10
EIG_RECON_TOL = 1e-8
RK_RTOL = 1e-10
RK_ATOL = 1e-12


class PropagationError(RuntimeError):
    pass


def _matrix(L):
    return L.matrix if isinstance(L, SuperOperator) else np.asarray(L, dtype=complex)


class PropagatorCache:
    """Caches a factorization of a constant generator for repeated exp(tL) products.

    The eigendecomposition is used when it is well conditioned and reproduces L.
    Otherwise the cache falls back to Pade exponentials, and to RK45 if those are
    not finite.
    """

    def __init__(self, L, method: str = "auto"):
        self.L = _matrix(L)
        self.norm = float(np.linalg.norm(self.L, 1)) or 1.0
        self.usable = False
        self.method = method
        self._step_cache = {}
        if method in ("auto", "eig"):
            self._try_eig()
        if method == "eig" and not self.usable:
            raise PropagationError("eigendecomposition unusable")

    def _try_eig(self):
        try:
            lam, V = np.linalg.eig(self.L)
            cond = np.linalg.cond(V)
            if not np.isfinite(cond) or cond > EIG_COND_LIMIT:
                return
            Vinv = np.linalg.inv(V)
            recon = (V * lam) @ Vinv
            if np.abs(recon - self.L).max() > EIG_RECON_TOL * max(np.abs(self.L).max(), 1e-300):
                return
        except np.linalg.LinAlgError:
            return
        self.eigenvalues, self.V, self.Vinv = lam, V, Vinv
        self.cond = cond
        self.usable = True

    def matrix_exp(self, t: float) -> np.ndarray:
        if self.usable:
            return (self.V * np.exp(self.eigenvalues * t)) @ self.Vinv
        return linalg.expm(self.L * t)

    def apply(self, v, t: float) -> np.ndarray:
        v = np.asarray(v, dtype=complex)
        if t == 0:
            return v.copy()
        if self.method == "rk45":
            return self._rk45(v, t)
        if self.usable:
            return self.V @ (np.exp(self.eigenvalues * t) * (self.Vinv @ v))
        out = linalg.expm(self.L * t) @ v
        if not np.all(np.isfinite(out)):
            out = self._rk45(v, t)
        return out

    def _rk45(self, v, t):
        L = self.L
        sol = solve_ivp(lambda _, y: L @ y, (0.0, t), v, method="RK45",
                        rtol=RK_RTOL, atol=RK_ATOL)
        if not sol.success:
            raise PropagationError(f"step integrator failed: {sol.message}")
        return sol.y[:, -1]

    def evolve(self, v, times) -> np.ndarray:
        """Rows are exp(t_k L) v for each t_k (times measured from zero)."""
        times = np.asarray(times, dtype=float)
        v = np.asarray(v, dtype=complex)
        if self.usable:
            c = self.Vinv @ v
            return (np.exp(np.outer(times, self.eigenvalues)) * c) @ self.V.T
        out = np.empty((times.size, v.size), complex)
        steps = np.diff(times, prepend=0.0)
        uniform = times.size > 2 and np.allclose(steps[1:], steps[1], rtol=1e-12, atol=0)
        cur = self.apply(v, times[0]) if times.size else v
        if times.size:
            out[0] = cur
        if uniform:
            step = self.matrix_exp(steps[1])
            for k in range(1, times.size):
                cur = step @ cur
                out[k] = cur
        else:
            for k in range(1, times.size):
                cur = self.apply(cur, steps[k])
                out[k] = cur
        return out


@dataclass
class Generator:
    """Constant generator, or contiguous piecewise-constant schedule of generators."""
    segments: list
    space: SpaceDescriptor | None = None

    @classmethod
    def constant(cls, L):
        space = L.space if isinstance(L, SuperOperator) else None
        return cls([(-np.inf, np.inf, _matrix(L))], space)

    @classmethod
    def schedule(cls, pieces: Sequence, space=None):
        pieces = sorted(pieces, key=lambda p: p[0])
        for (a0, a1, _), (b0, _, _) in zip(pieces, pieces[1:]):
            if not np.isclose(a1, b0):
                raise ValueError(f"schedule has a gap or overlap between {a1} and {b0}")
        if space is None and isinstance(pieces[0][2], SuperOperator):
            space = pieces[0][2].space
        return cls([(float(a), float(b), _matrix(L)) for a, b, L in pieces], space)

    @property
    def is_constant(self):
        return len(self.segments) == 1

    def pieces(self, t0, t1):
        """Yield (start, end, cache) pieces covering [t0, t1]."""
        if t1 < t0:
            raise ValueError("t1 must not precede t0")
        first, last = self.segments[0][0], self.segments[-1][1]
        if t0 < first - 1e-12 or t1 > last + 1e-12:
            raise ValueError(f"schedule covers [{first}, {last}], requested [{t0}, {t1}]")
        out = []
        for a, b, L in self.segments:
            lo, hi = max(a, t0), min(b, t1)
            if hi > lo or (t0 == t1 and lo == hi):
                out.append((lo, hi, self._cache(L)))
        return out

    def _cache(self, L):
        key = id(L)
        if not hasattr(self, "_caches"):
            self._caches = {}
        if key not in self._caches:
            self._caches[key] = PropagatorCache(L)
        return self._caches[key]

    def matrix_at(self, t):
        for a, b, L in self.segments:
            if a <= t < b:
                return L
        return self.segments[-1][2]


def _as_generator(gen):
    return gen if isinstance(gen, Generator) else Generator.constant(gen)


def propagate_vector(gen, v, t0: float, t1: float) -> np.ndarray:
    gen = _as_generator(gen)
    v = np.asarray(v, dtype=complex)
    for lo, hi, cache in gen.pieces(t0, t1):
        v = cache.apply(v, hi - lo)
    return v


def propagate(gen, rho0: DensityState, t0: float, t1: float) -> DensityState:
    out = propagate_vector(gen, rho0.matrix.reshape(-1), t0, t1)
    d = rho0.space.dim
    return DensityState(rho0.space, out.reshape(d, d), rho0.normalized)


def evolve_on_grid(gen, v0, times) -> np.ndarray:
    """Vectorized states at each time in an increasing grid (first time = start)."""
    gen = _as_generator(gen)
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, np.asarray(v0).size), complex)
    out[0] = v0
    if gen.is_constant:
        cache = gen.pieces(times[0], times[-1])[0][2]
        return cache.evolve(v0, times - times[0])
    cur = np.asarray(v0, dtype=complex)
    for k in range(1, times.size):
        cur = propagate_vector(gen, cur, times[k - 1], times[k])
        out[k] = cur
    return out


def _side_superop(side, op, space):
    if isinstance(op, SuperOperator):
        return op.matrix
    m = op.matrix if isinstance(op, Operator) else np.asarray(op, dtype=complex)
    eye = np.eye(m.shape[0])
    if side == "left":
        return np.kron(m, eye)
    if side == "right":
        return np.kron(eye, m.T)
    if side == "both":
        return np.kron(m, m.conj())
    raise ValueError(f"side must be 'left', 'right' or 'both', got {side!r}")


def two_time_correlation(gen, rho0: DensityState, ops, t_final: float | None = None) -> complex:
    """Time-ordered correlator Tr[... U S_2 U S_1 U rho0].

    ``ops`` is a list of (time, side, operator) with side 'left' (A rho),
    'right' (rho A) or 'both' (A rho A^dag); a SuperOperator is applied as is.
    Times are measured on the generator's clock and rho0 is taken at ops' start
    if the first entry is later than zero.
    """
    times = [float(t) for t, _, _ in ops]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("operator application times must be nondecreasing")
    v = rho0.matrix.reshape(-1).astype(complex)
    t = 0.0
    for time, side, op in ops:
        v = propagate_vector(gen, v, t, time)
        v = _side_superop(side, op, rho0.space) @ v
        t = time
    if t_final is not None and t_final > t:
        v = propagate_vector(gen, v, t, t_final)
    d = rho0.space.dim
    return complex(np.trace(v.reshape(d, d)))


class RegressionEvaluator:
    """z(t, tau) = exp(tau X) S exp(t Y) y0, with S a seeding map from y to the X system."""

    def __init__(self, X, Y, y0, seed_map=None):
        self.X = np.atleast_2d(np.asarray(X, dtype=complex))
        self.Y = np.atleast_2d(np.asarray(Y, dtype=complex))
        self.y0 = np.atleast_1d(np.asarray(y0, dtype=complex))
        n, m = self.X.shape[0], self.Y.shape[0]
        if self.X.shape != (n, n) or self.Y.shape != (m, m) or self.y0.size != m:
            raise DimensionError("inconsistent regression dimensions")
        if seed_map is None:
            if m < n:
                raise DimensionError("Y system smaller than X system; supply seed_map")
            seed_map = np.eye(n, m)
        self.seed_map = np.asarray(seed_map, dtype=complex)
        if self.seed_map.shape != (n, m):
            raise DimensionError("seed_map must be N x M")
        self._x = PropagatorCache(self.X)
        self._y = PropagatorCache(self.Y)

    def one_time(self, t):
        return self._y.apply(self.y0, t)

    def __call__(self, t, tau):
        return self._x.apply(self.seed_map @ self.one_time(t), tau)

    def table(self, t_grid, tau_grid):
        """Array [i, j, k] = z_k(t_i, tau_j)."""
        y = self._y.evolve(self.y0, t_grid)
        seeds = y @ self.seed_map.T
        if self._x.usable:
            c = seeds @ self._x.Vinv.T
            e = np.exp(np.outer(tau_grid, self._x.eigenvalues))
            return np.einsum("ik,jk,lk->ijl", c, e, self._x.V)
        return np.stack([self._x.evolve(s, tau_grid) for s in seeds])


def regression_correlations(X, Y, y0, seed_map=None) -> RegressionEvaluator:
    return RegressionEvaluator(X, Y, y0, seed_map)


def adiabatic_eliminate(Z, keep_indices) -> np.ndarray:
    Z = np.asarray(Z, dtype=complex)
    n = Z.shape[0]
    keep = np.asarray(sorted(set(int(k) for k in keep_indices)))
    drop = np.setdiff1d(np.arange(n), keep)
    Zxx = Z[np.ix_(keep, keep)]
    if drop.size == 0:
        return Zxx
    Zyy = Z[np.ix_(drop, drop)]
    if np.linalg.cond(Zyy) > 1e12:
        raise np.linalg.LinAlgError("eliminated block is singular")
    return Zxx - Z[np.ix_(keep, drop)] @ np.linalg.solve(Zyy, Z[np.ix_(drop, keep)])


def _channel_op(ch):
    if isinstance(ch, tuple):
        op, rate = ch
        m = op.matrix if isinstance(op, Operator) else np.asarray(op)
        return np.sqrt(rate) * m
    if hasattr(ch, "operator"):
        ch = ch.operator
    return ch.matrix if isinstance(ch, Operator) else np.asarray(ch, dtype=complex)


def trace_functional(L) -> np.ndarray:
    """Q with Tr(L rho) = Tr(Q rho)."""
    M = _matrix(L)
    d = int(round(np.sqrt(M.shape[0])))
    diag_rows = M.reshape(d, d, d * d)[np.arange(d), np.arange(d)].sum(axis=0)
    return diag_rows.reshape(d, d).T


def _conditionally_positive(M, d, scale, tol=1e-10) -> bool:
    """Whether the residual jump content of M is a nonnegative mixture.

    The Choi matrix of a Lindblad-form map is positive on the complement of the
    maximally entangled vector; Hamiltonian and anticommutator terms drop out there.
    """
    choi = M.reshape(d, d, d, d).transpose(0, 2, 1, 3).reshape(d * d, d * d)
    omega = np.eye(d).reshape(-1) / np.sqrt(d)
    P = np.eye(d * d) - np.outer(omega, omega)
    C = P @ choi @ P
    return np.linalg.eigvalsh(0.5 * (C + C.conj().T)).min() >= -tol * scale


def non_hermitian_parts(L: SuperOperator, jump_channels) -> tuple:
    """Split off jump terms: returns (L0, H_eff) with H_eff None when L0 is not Hamiltonian."""
    M = _matrix(L).copy()
    d = int(round(np.sqrt(M.shape[0])))
    for ch in jump_channels:
        c = _channel_op(ch)
        M -= np.kron(c, c.conj())
    scale = float(np.abs(_matrix(L)).max()) or 1.0
    Q = trace_functional(M)
    herm = 0.5 * (Q + Q.conj().T)
    if np.linalg.eigvalsh(herm).max() > 1e-10 * scale or not _conditionally_positive(M, d, scale):
        raise ValueError("jump channels exceed the dissipation contained in L")
    space = L.space if isinstance(L, SuperOperator) else SpaceDescriptor([d])
    L0 = SuperOperator(space, M)
    T = M.reshape(d, d, d, d).trace(axis1=1, axis2=3)
    trM = np.trace(T) / (2 * d)
    Mgen = (T - trM * np.eye(d)) / d
    recon = np.kron(Mgen, np.eye(d)) + np.kron(np.eye(d), Mgen.conj())
    H_eff = None
    if np.abs(recon - M).max() <= 1e-10 * scale:
        H_eff = Operator(space, 1j * Mgen)
    return L0, H_eff


def lindbladian(H, collapse_ops) -> SuperOperator:
    """-i[H, .] + sum D(C) from a Hamiltonian Operator and rate-absorbed collapse operators."""
    from .fock_liouville import dissipator, hamiltonian_superop
    L = hamiltonian_superop(H)
    for c in collapse_ops:
        L = L + dissipator(c if isinstance(c, Operator) else Operator(H.space, c))
    return L


def step_matrices(gen, times, transform=None) -> tuple:
    """Propagators over each interval of a time grid, deduplicated.

    Returns (unique matrices, index array) so that interval k uses
    ``mats[index[k]]``. ``transform`` maps a segment generator matrix to the
    matrix actually exponentiated (e.g. a stacked counting generator).
    """
    gen = _as_generator(gen)
    times = np.asarray(times, dtype=float)
    mats, keys, index = [], {}, np.empty(times.size - 1, dtype=int)
    built = {}
    for k in range(times.size - 1):
        pieces = gen.pieces(times[k], times[k + 1])
        key = tuple((id(c), float(np.round(hi - lo, 13))) for lo, hi, c in pieces)
        if key not in keys:
            P = None
            for lo, hi, cache in pieces:
                if id(cache) not in built:
                    built[id(cache)] = cache.L if transform is None else transform(cache.L)
                E = linalg.expm(built[id(cache)] * (hi - lo))
                P = E if P is None else E @ P
            keys[key] = len(mats)
            mats.append(P)
        index[k] = keys[key]
    return mats, index
