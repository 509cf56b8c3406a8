"""State and operator algebra in the vectorized (Fock-Liouville) representation.

Density matrices are flattened row by row (numpy C order), so the map
rho -> A rho B becomes the matrix kron(A, B.T).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np

HERMITIAN_RTOL = 1e-10
TRACE_TOL = 1e-9


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SpaceDescriptor:
    subsystem_dims: tuple
    labels: tuple

    def __init__(self, subsystem_dims: Sequence[int], labels: Sequence[str] | None = None):
        dims = tuple(int(d) for d in subsystem_dims)
        if labels is None:
            labels = tuple(f"q{i}" for i in range(len(dims)))
        labels = tuple(labels)
        if not dims or any(d < 1 for d in dims):
            raise DimensionError(f"invalid subsystem dimensions {dims}")
        if len(labels) != len(dims):
            raise DimensionError("labels and dims differ in length")
        if len(set(labels)) != len(labels):
            raise DimensionError("labels must be unique")
        object.__setattr__(self, "subsystem_dims", dims)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return int(np.prod(self.subsystem_dims))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown subsystem label {label!r}") from None


def _as_space(space, dim=None):
    if isinstance(space, SpaceDescriptor):
        return space
    if space is None:
        return SpaceDescriptor([dim])
    return SpaceDescriptor(space)


@dataclass(frozen=True)
class Operator:
    space: SpaceDescriptor
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        d = self.space.dim
        if m.shape != (d, d):
            raise DimensionError(f"operator shape {m.shape} does not match dimension {d}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_matrix(cls, matrix, space=None):
        matrix = np.asarray(matrix, dtype=complex)
        return cls(_as_space(space, matrix.shape[0]), matrix)

    @property
    def dag(self) -> "Operator":
        return Operator(self.space, self.matrix.conj().T)

    def __matmul__(self, other):
        _check_same(self, other)
        return Operator(self.space, self.matrix @ other.matrix)

    def __add__(self, other):
        _check_same(self, other)
        return Operator(self.space, self.matrix + other.matrix)

    def __sub__(self, other):
        _check_same(self, other)
        return Operator(self.space, self.matrix - other.matrix)

    def __mul__(self, scalar):
        return Operator(self.space, self.matrix * scalar)

    __rmul__ = __mul__

    def is_hermitian(self, tol=HERMITIAN_RTOL) -> bool:
        m = self.matrix
        scale = max(1.0, float(np.abs(m).max(initial=0.0)))
        return float(np.abs(m - m.conj().T).max(initial=0.0)) <= tol * scale


def _check_same(a, b):
    if a.space.dim != b.space.dim:
        raise DimensionError(f"dimension mismatch {a.space.dim} vs {b.space.dim}")


@dataclass(frozen=True)
class DensityState:
    space: SpaceDescriptor
    matrix: np.ndarray = field(repr=False)
    normalized: bool = True

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        d = self.space.dim
        if m.shape != (d, d):
            raise DimensionError(f"state shape {m.shape} does not match dimension {d}")
        scale = float(np.abs(m).max(initial=0.0))
        if float(np.abs(m - m.conj().T).max(initial=0.0)) > HERMITIAN_RTOL * max(scale, 1e-300) + 1e-14:
            raise ValueError("density matrix is not Hermitian")
        m = 0.5 * (m + m.conj().T)
        tr = float(np.trace(m).real)
        if self.normalized:
            if abs(tr - 1.0) > TRACE_TOL:
                raise ValueError(f"normalized state has trace {tr}")
            if np.linalg.eigvalsh(m).min() < -TRACE_TOL:
                raise ValueError("normalized state is not positive semidefinite")
        elif tr < -TRACE_TOL or tr > 1.0 + TRACE_TOL:
            raise ValueError(f"conditional state trace {tr} outside [0, 1]")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_matrix(cls, matrix, space=None, normalized=True):
        matrix = np.asarray(matrix, dtype=complex)
        return cls(_as_space(space, matrix.shape[0]), matrix, normalized)

    @classmethod
    def pure(cls, ket, space=None):
        ket = np.asarray(ket, dtype=complex).ravel()
        ket = ket / np.linalg.norm(ket)
        return cls.from_matrix(np.outer(ket, ket.conj()), space)

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def expect(self, op) -> complex:
        m = op.matrix if isinstance(op, Operator) else np.asarray(op)
        return complex(np.trace(m @ self.matrix))


@dataclass(frozen=True)
class SuperOperator:
    space: SpaceDescriptor
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        d2 = self.space.dim ** 2
        if m.shape != (d2, d2):
            raise DimensionError(f"superoperator shape {m.shape} does not match {d2}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __add__(self, other):
        _check_same(self, other)
        return SuperOperator(self.space, self.matrix + other.matrix)

    def __sub__(self, other):
        _check_same(self, other)
        return SuperOperator(self.space, self.matrix - other.matrix)

    def __mul__(self, scalar):
        return SuperOperator(self.space, self.matrix * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        _check_same(self, other)
        return SuperOperator(self.space, self.matrix @ other.matrix)

    def apply(self, rho):
        """Act on a DensityState or a raw d x d matrix; returns a raw matrix."""
        m = rho.matrix if isinstance(rho, DensityState) else np.asarray(rho)
        d = self.space.dim
        return (self.matrix @ m.reshape(d * d)).reshape(d, d)

    @classmethod
    def zero(cls, space):
        d2 = space.dim ** 2
        return cls(space, np.zeros((d2, d2), complex))

    @classmethod
    def identity(cls, space):
        return cls(space, np.eye(space.dim ** 2, dtype=complex))


def vectorize(rho) -> np.ndarray:
    m = rho.matrix if isinstance(rho, DensityState) else np.asarray(rho)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("expected a square matrix")
    return np.array(m, dtype=complex).reshape(-1)


def devectorize(vec, space, normalized=True) -> DensityState:
    vec = np.asarray(vec, dtype=complex)
    space = _as_space(space, int(round(np.sqrt(vec.size))))
    d = space.dim
    if vec.size != d * d:
        raise DimensionError(f"vector of length {vec.size} cannot hold a {d}x{d} matrix")
    return DensityState(space, vec.reshape(d, d), normalized)


def superop_from_pair(A: Operator, B: Operator) -> SuperOperator:
    _check_same(A, B)
    return SuperOperator(A.space, np.kron(A.matrix, B.matrix.T))


def dissipator(A: Operator, B: Operator | None = None) -> SuperOperator:
    """rho -> A rho B^dag - {B^dag A, rho}/2."""
    if B is None:
        B = A
    _check_same(A, B)
    a, b = A.matrix, B.matrix
    bda = b.conj().T @ a
    eye = np.eye(a.shape[0])
    mat = np.kron(a, b.conj()) - 0.5 * (np.kron(bda, eye) + np.kron(eye, bda.T))
    return SuperOperator(A.space, mat)


def hamiltonian_superop(H: Operator) -> SuperOperator:
    if not H.is_hermitian():
        raise ValueError("Hamiltonian is not Hermitian")
    h = H.matrix
    eye = np.eye(h.shape[0])
    return SuperOperator(H.space, -1j * (np.kron(h, eye) - np.kron(eye, h.T)))


def nonhermitian_superop(K: Operator) -> SuperOperator:
    """rho -> -i(K rho - rho K^dag), for effective non-Hermitian Hamiltonians."""
    k = K.matrix
    eye = np.eye(k.shape[0])
    return SuperOperator(K.space, -1j * (np.kron(k, eye) - np.kron(eye, k.conj())))


def jump_superop(C: Operator) -> SuperOperator:
    return superop_from_pair(C, C.dag)


def embed(op, target_label: str, space: SpaceDescriptor) -> Operator:
    idx = space.index(target_label)
    m = op.matrix if isinstance(op, Operator) else np.asarray(op, dtype=complex)
    if m.shape != (space.subsystem_dims[idx],) * 2:
        raise DimensionError(
            f"operator of shape {m.shape} does not fit subsystem {target_label!r}"
            f" of dimension {space.subsystem_dims[idx]}")
    factors = [np.eye(d) for d in space.subsystem_dims]
    factors[idx] = m
    return Operator(space, reduce(np.kron, factors))


def tensor(*mats) -> np.ndarray:
    return reduce(np.kron, [np.asarray(m, dtype=complex) for m in mats])


def basis(dim: int, k: int) -> np.ndarray:
    v = np.zeros(dim, complex)
    v[k] = 1.0
    return v


def destroy(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim)), 1).astype(complex)


def transition(dim: int, to: int, frm: int) -> np.ndarray:
    """|to><frm| on a dim-level system."""
    m = np.zeros((dim, dim), complex)
    m[to, frm] = 1.0
    return m
