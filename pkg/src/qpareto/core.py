"""Quantum primitives: states, observables, propagation and controllability.

Units are dimensionless with hbar = 1. A control field acts through the
electric-dipole Hamiltonian ``H(t) = H0 - mu * eps(t)`` and is treated as
piecewise constant on a uniform time grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-10
UNITARY_TOL = 1e-9
DEGENERACY_RTOL = 1e-9


class BranchAmbiguityWarning(RuntimeWarning):
    """An eigenphase sits on the branch cut of the principal logarithm."""


def is_hermitian(a, tol=HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    return a.ndim == 2 and a.shape[0] == a.shape[1] and np.max(np.abs(a - a.conj().T), initial=0.0) <= tol


def _require_hermitian(a, name):
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    if not is_hermitian(a):
        raise ValueError(f"{name} is not Hermitian")
    return a


def as_matrix(x) -> np.ndarray:
    """Return the plain complex matrix behind a DensityMatrix/Observable or array."""
    if isinstance(x, (DensityMatrix, Observable)):
        return x.matrix
    return np.asarray(x, dtype=complex)


def group_spectrum(eigenvalues, rtol=DEGENERACY_RTOL):
    """Group ascending eigenvalues into degenerate blocks.

    Returns the distinct values and their multiplicities. Neighbours whose gap is
    below ``rtol`` times the spectral scale are merged into one block.
    """
    ev = np.asarray(eigenvalues, dtype=float)
    if ev.size == 0:
        return np.array([]), ()
    scale = max(1.0, float(np.max(np.abs(ev))))
    distinct = [ev[0]]
    mult = [1]
    for x in ev[1:]:
        if x - distinct[-1] < rtol * scale:
            mult[-1] += 1
        else:
            distinct.append(x)
            mult.append(1)
    # report block values as means so near-ties do not bias the stored level
    out = []
    i = 0
    for k in mult:
        out.append(float(np.mean(ev[i:i + k])))
        i += k
    return np.array(out), tuple(mult)


def sorted_eigh(a):
    """Hermitian eigendecomposition with ascending, stably ordered eigenvalues."""
    w, v = np.linalg.eigh(a)
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True)
class Observable:
    """Hermitian operator with its ascending spectrum and eigenbasis."""

    matrix: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    distinct: np.ndarray = field(repr=False)
    multiplicities: tuple

    @classmethod
    def from_matrix(cls, theta) -> "Observable":
        theta = _require_hermitian(theta, "observable")
        theta = 0.5 * (theta + theta.conj().T)
        w, v = sorted_eigh(theta)
        distinct, mult = group_spectrum(w)
        return cls(theta, w, v, distinct, mult)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def block_labels(self) -> np.ndarray:
        """Block index of each ascending eigenvalue position."""
        return np.repeat(np.arange(len(self.multiplicities)), self.multiplicities)


@dataclass(frozen=True)
class DensityMatrix(Observable):
    """Unit-trace positive semidefinite Observable."""

    @classmethod
    def from_matrix(cls, rho) -> "DensityMatrix":
        rho = _require_hermitian(rho, "density matrix")
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if abs(tr - 1.0) > TRACE_TOL:
            raise ValueError(f"density matrix trace is {tr}, expected 1")
        w, v = sorted_eigh(rho)
        if w[0] < -HERMITIAN_TOL:
            raise ValueError(f"density matrix has negative eigenvalue {w[0]:.3e}")
        distinct, mult = group_spectrum(w)
        return cls(rho, w, v, distinct, mult)

    @property
    def rank(self) -> int:
        return int(np.sum(self.eigenvalues > 1e-10))


def density_matrix(x) -> DensityMatrix:
    return x if isinstance(x, DensityMatrix) else DensityMatrix.from_matrix(x)


def observable(x) -> Observable:
    if isinstance(x, Observable):
        return x
    return Observable.from_matrix(x)


@dataclass(frozen=True)
class QuantumSystem:
    """Drift Hamiltonian ``h0`` and dipole operator ``dipole``."""

    h0: np.ndarray
    dipole: np.ndarray

    def __post_init__(self):
        h0 = _require_hermitian(self.h0, "h0")
        mu = _require_hermitian(self.dipole, "dipole")
        if h0.shape != mu.shape:
            raise ValueError("h0 and dipole dimensions differ")
        if h0.shape[0] < 2:
            raise ValueError("system dimension must be at least 2")
        object.__setattr__(self, "h0", h0)
        object.__setattr__(self, "dipole", mu)

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def is_real(self) -> bool:
        return not (np.any(self.h0.imag) or np.any(self.dipole.imag))

    def energies(self) -> np.ndarray:
        return np.sort(np.linalg.eigvalsh(self.h0))

    def hamiltonian(self, eps):
        return self.h0 - self.dipole * eps


def eleven_level_system() -> QuantumSystem:
    """The 11-level benchmark: equally spaced levels, banded dipole."""
    n = 11
    h0 = np.diag(0.1 * np.arange(1, n + 1))
    mu = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d = abs(i - j)
            mu[i, j] = {0: 1.0, 1: 0.15, 2: 0.08}.get(d, 0.0)
    return QuantumSystem(h0.astype(complex), mu.astype(complex))


def random_system(dim, seed, coupling=0.15) -> QuantumSystem:
    """Seeded random system with nondegenerate diagonal H0 and real symmetric dipole."""
    rng = np.random.default_rng(seed)
    levels = np.sort(rng.uniform(0.0, 1.0, dim))
    levels = levels - levels[0] + 0.1
    m = rng.normal(scale=coupling, size=(dim, dim))
    mu = 0.5 * (m + m.T)
    mu[np.diag_indices(dim)] += 1.0
    return QuantumSystem(np.diag(levels).astype(complex), mu.astype(complex))


def thermal_state(h0, beta=4.0) -> DensityMatrix:
    w, v = sorted_eigh(np.asarray(h0, dtype=complex))
    p = np.exp(-beta * (w - w[0]))
    p /= p.sum()
    return DensityMatrix.from_matrix((v * p) @ v.conj().T)


def pure_state(dim, index=0, basis=None) -> DensityMatrix:
    """Projector onto ``basis[:, index]`` (computational basis by default)."""
    if basis is None:
        psi = np.zeros(dim, dtype=complex)
        psi[index] = 1.0
    else:
        psi = np.asarray(basis, dtype=complex)[:, index]
    return DensityMatrix.from_matrix(np.outer(psi, psi.conj()))


def random_density_matrix(dim, seed, rank=None) -> DensityMatrix:
    rng = np.random.default_rng(seed)
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return DensityMatrix.from_matrix(rho / np.trace(rho).real)


def random_unitary(dim, rng) -> np.ndarray:
    """Haar-distributed unitary via QR of a complex Gaussian matrix."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def unitarity_error(u) -> float:
    u = np.asarray(u)
    eye = np.eye(u.shape[-1])
    return float(np.max(np.abs(np.swapaxes(u.conj(), -1, -2) @ u - eye)))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_M = t_final with M steps."""

    t_final: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or not self.t_final > 0:
            raise ValueError("time grid needs t_final > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.t_final / self.steps

    @property
    def sample_times(self) -> np.ndarray:
        """Left end points t_0 .. t_{M-1} at which field samples live."""
        return np.arange(self.steps) * self.dt

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @classmethod
    def from_times(cls, times) -> "TimeGrid":
        t = np.asarray(times, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0:
            raise ValueError("time grid must start at 0 and contain at least two points")
        dt = np.diff(t)
        if np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(dt[0])):
            raise ValueError("time grid is not uniform")
        return cls(float(t[-1]), t.size - 1)

    def to_dict(self):
        return {"t_final": self.t_final, "steps": self.steps}


@dataclass
class PropagatorPath:
    """Unitaries U(t_0..t_M) plus the per-step eigendecompositions used to build them."""

    grid: TimeGrid
    unitaries: np.ndarray
    step_eigvals: np.ndarray = field(repr=False, default=None)
    step_eigvecs: np.ndarray = field(repr=False, default=None)

    @property
    def final(self) -> np.ndarray:
        return self.unitaries[-1]


def _field_values(field_, grid):
    values = getattr(field_, "values", field_)
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.steps,):
        raise ValueError(f"field has {values.shape} samples, grid needs {grid.steps}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains non-finite samples")
    return values


def propagate(system: QuantumSystem, field_, grid=None) -> PropagatorPath:
    """Propagate ``dU/dt = -i H(t) U`` with the field held constant on each step.

    ``field_`` is a ControlField (its own grid is used unless ``grid`` is given)
    or a raw array of M samples at the left end points of ``grid``. Every step
    exponential comes from a Hermitian eigendecomposition, so each U(t_j) is
    unitary to rounding error.
    """
    if grid is None:
        grid = field_.grid
    elif not isinstance(grid, TimeGrid):
        grid = TimeGrid.from_times(grid)
    if hasattr(field_, "grid") and field_.grid != grid:
        raise ValueError("field grid does not match the requested grid")
    eps = _field_values(field_, grid)
    if system.is_real:
        # real symmetric Hamiltonians diagonalize about twice as fast
        hams = system.h0.real[None, :, :] - eps[:, None, None] * system.dipole.real[None, :, :]
    else:
        hams = system.h0[None, :, :] - eps[:, None, None] * system.dipole[None, :, :]
    w, v = np.linalg.eigh(hams)
    phases = np.exp(-1j * grid.dt * w)
    steps = (v * phases[:, None, :]) @ np.swapaxes(v.conj(), 1, 2)
    n = system.dim
    us = np.empty((grid.steps + 1, n, n), dtype=complex)
    us[0] = np.eye(n)
    for j in range(grid.steps):
        us[j + 1] = steps[j] @ us[j]
    return PropagatorPath(grid, us, w, v)


def expectation(u, rho0, theta) -> float:
    """Tr(U rho0 U^dag Theta)."""
    u = np.asarray(u, dtype=complex)
    rho = as_matrix(rho0)
    th = as_matrix(theta)
    if not (u.shape == rho.shape == th.shape):
        raise ValueError(f"dimension mismatch: U{u.shape}, rho{rho.shape}, theta{th.shape}")
    val = np.trace(u @ rho @ u.conj().T @ th)
    if abs(val.imag) > 1e-10 * max(1.0, abs(val.real)):
        raise ValueError(f"expectation has imaginary residue {val.imag:.3e}")
    return float(val.real)


def expectations(u, rho0, thetas) -> np.ndarray:
    """Vector of expectation values for several observables at once."""
    u = np.asarray(u, dtype=complex)
    rho_t = u @ as_matrix(rho0) @ u.conj().T
    ops = np.array([as_matrix(t) for t in thetas])
    return np.einsum("ij,kji->k", rho_t, ops).real


def von_neumann_entropy(rho) -> dict:
    """Entropy of ``rho`` in both sign conventions.

    ``"signed"`` is sum(lam * log lam), which is nonpositive, and
    ``"shannon"`` is its negation (the usual nonnegative entropy). 0 log 0 = 0.
    """
    rho = density_matrix(rho)
    lam = np.clip(rho.eigenvalues, 0.0, None)
    nz = lam[lam > 0]
    s = float(np.sum(nz * np.log(nz)))
    return {"signed": s, "shannon": -s}


def _hermitian_basis_vec(a):
    return np.concatenate([a.real.ravel(), a.imag.ravel()])


def lie_algebra_rank(system: QuantumSystem, tol=1e-8) -> int:
    """Dimension of the real Lie algebra generated by i*H0 and i*mu.

    Elements are kept as an orthonormal set of real vectors; a commutator joins
    the set when its residual after projection exceeds ``tol`` relative to its
    norm. Iterates until no new direction appears.
    """
    n = system.dim
    basis = np.zeros((0, 2 * n * n))
    elems: list[np.ndarray] = []

    def add(x):
        nonlocal basis
        norm = np.linalg.norm(x)
        if norm < 1e-14:
            return False
        v = _hermitian_basis_vec(x / norm)
        r = v - basis.T @ (basis @ v)
        r = r - basis.T @ (basis @ r)
        if np.linalg.norm(r) <= tol:
            return False
        r /= np.linalg.norm(r)
        basis = np.vstack([basis, r])
        half = n * n
        elems.append((r[:half] + 1j * r[half:]).reshape(n, n))
        return True

    add(1j * system.h0)
    add(1j * system.dipole)
    frontier = list(range(len(elems)))
    while frontier and len(elems) < n * n:
        new = []
        for i in frontier:
            for j in range(len(elems)):
                if j == i:
                    continue
                c = elems[i] @ elems[j] - elems[j] @ elems[i]
                if add(c):
                    new.append(len(elems) - 1)
                if len(elems) >= n * n:
                    break
            if len(elems) >= n * n:
                break
        frontier = new
    return len(elems)


def matrix_log_unitary(u, warn=True) -> np.ndarray:
    """Hermitian A with exp(iA) = U, eigenphases on the principal branch (-pi, pi].

    A phase within 1e-10 of -pi/pi is branch-ambiguous; it is mapped to +pi and a
    BranchAmbiguityWarning is issued.
    """
    u = np.asarray(u, dtype=complex)
    if unitarity_error(u) > UNITARY_TOL:
        raise ValueError("matrix is not unitary")
    t, z = scipy.linalg.schur(u, output="complex")
    lam = np.diagonal(t)
    phase = np.angle(lam)
    edge = np.abs(np.abs(phase) - np.pi) < 1e-10
    if np.any(edge):
        if warn:
            warnings.warn("eigenphase on the branch cut at -pi; using +pi", BranchAmbiguityWarning, stacklevel=2)
        phase = np.where(edge, np.pi, phase)
    a = (z * phase) @ z.conj().T
    return 0.5 * (a + a.conj().T)


def expm_hermitian(a, scale=1j) -> np.ndarray:
    """exp(scale * A) for Hermitian A via eigendecomposition."""
    w, v = np.linalg.eigh(np.asarray(a, dtype=complex))
    return (v * np.exp(scale * w)) @ v.conj().T


def polar_unitary(x) -> np.ndarray:
    """Closest unitary to ``x`` (unitary factor of the polar decomposition)."""
    w, _, vh = np.linalg.svd(x)
    return w @ vh
