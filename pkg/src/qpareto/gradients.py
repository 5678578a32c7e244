"""Control gradients of observable expectation values.

The dynamics are piecewise constant, so the gradient reported here is the exact
derivative of the discrete map eps -> U(T), divided by dt to give a per-unit-time
density. Writing the step-averaged Heisenberg dipole as ``mu_bar(t_j)`` it reads

    a(t_j) = i Tr(rho0 [Theta(T), mu_bar(t_j)]),   Theta(T) = U(T)^dag Theta U(T)

and ``mu_bar(t_j) -> U(t_j)^dag mu U(t_j)`` as dt -> 0. The sign follows from
H = H0 - mu * eps and is the one that agrees with finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from .core import (
    QuantumSystem,
    TimeGrid,
    as_matrix,
    expectation,
    propagate,
)


class DependentObservablesError(ValueError):
    """Raised when an observable lies in the span of the preceding ones."""

    def __init__(self, index, residual):
        super().__init__(f"observable {index} is linearly dependent on earlier ones (residual {residual:.2e})")
        self.index = index
        self.residual = residual


@dataclass(frozen=True)
class GradientVector:
    """Per-observable gradient densities a^i(t_j); ``samples`` has shape (m, M)."""

    grid: TimeGrid
    samples: np.ndarray

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    def inner(self, f) -> np.ndarray:
        """Left-Riemann inner products int a^i(t) f(t) dt."""
        return self.samples @ np.asarray(f, dtype=float) * self.grid.dt

    def write_csv(self, path):
        return io.write_csv(path, ["t"] + [f"a_{i + 1}" for i in range(self.m)],
                            [[t, *self.samples[:, j]] for j, t in enumerate(self.grid.sample_times)])


def _phi(z):
    """(exp(z) - 1) / z, with the removable singularity at 0."""
    out = np.ones_like(z)
    big = np.abs(z) > 1e-8
    out[big] = np.expm1(z[big]) / z[big]
    small = ~big
    out[small] = 1 + z[small] / 2
    return out


def effective_dipoles(system: QuantumSystem, path) -> np.ndarray:
    """Step-averaged Heisenberg dipoles mu_bar(t_j), shape (M, N, N).

    For step j with H_j = W diag(e) W^dag:
        mu_bar_j = P^dag (K o W^dag mu W) P,  P = W^dag U(t_j),
        K_kl = (exp(i dt (e_k - e_l)) - 1) / (i dt (e_k - e_l)).
    """
    dt = path.grid.dt
    w, v = path.step_eigvals, path.step_eigvecs
    if w is None:
        raise ValueError("propagator path lacks step eigendecompositions")
    diff = w[:, :, None] - w[:, None, :]
    kern = _phi(1j * dt * diff)
    vh = np.swapaxes(v.conj(), 1, 2)
    mu_t = vh @ system.dipole[None] @ v
    p = vh @ path.unitaries[:-1]
    out = np.swapaxes(p.conj(), 1, 2) @ (kern * mu_t) @ p
    return 0.5 * (out + np.swapaxes(out.conj(), 1, 2))


def heisenberg_dipoles(system: QuantumSystem, path) -> np.ndarray:
    """U(t_j)^dag mu U(t_j) at the left end point of each step."""
    u = path.unitaries[:-1]
    return np.swapaxes(u.conj(), 1, 2) @ system.dipole[None] @ u


def gradient_operators(system, path, rho0, method="exact") -> np.ndarray:
    """Hermitian C_j with a(t_j) = Tr(C_j Theta(T)) for every observable Theta.

    C_j = i [mu_bar_j, rho0]. ``method="commutator"`` uses the point dipole
    U(t_j)^dag mu U(t_j) instead, which is only first-order accurate in dt.
    """
    rho = as_matrix(rho0)
    if method == "exact":
        mu = effective_dipoles(system, path)
    elif method == "commutator":
        mu = heisenberg_dipoles(system, path)
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return 1j * (mu @ rho - rho @ mu)


def functional_gradient(system, field_, rho0, observables, path=None, method="exact") -> GradientVector:
    """Gradient densities of each observable's final-time expectation value."""
    grid = field_.grid
    if path is None:
        path = propagate(system, field_)
    elif path.grid != grid:
        raise ValueError("propagator path and field use different grids")
    ops = gradient_operators(system, path, rho0, method)
    u_t = path.final
    heis = np.array([u_t.conj().T @ as_matrix(th) @ u_t for th in observables])
    # Tr(C_j Theta_k) = sum_ab C_j[a,b] Theta_k[b,a]
    vals = np.einsum("jab,kba->kj", ops, heis)
    if np.max(np.abs(vals.imag), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(vals.real), initial=0.0)):
        raise ArithmeticError("gradient has a non-negligible imaginary part")
    return GradientVector(grid, np.ascontiguousarray(vals.real))


def finite_difference_gradient(system, field_, rho0, theta, indices, h=1e-5) -> np.ndarray:
    """Central differences dPhi/d eps_j at the requested sample indices.

    Each entry re-propagates the whole field; this is the independent check on
    ``functional_gradient`` (compare against a(t_j) * dt).
    """
    base = np.array(field_.values, dtype=float)
    out = []
    for j in indices:
        vals = []
        for sign in (1.0, -1.0):
            x = base.copy()
            x[j] += sign * h
            u = propagate(system, x, field_.grid).final
            vals.append(expectation(u, rho0, theta))
        out.append((vals[0] - vals[1]) / (2 * h))
    return np.array(out)


@dataclass(frozen=True)
class OrthogonalObservableBasis:
    """Hilbert-Schmidt orthonormal observables with Theta_k = sum_i c[k, i] basis[i]."""

    basis: tuple
    coefficients: np.ndarray

    @property
    def m(self) -> int:
        return len(self.basis)

    def reconstruct(self, k) -> np.ndarray:
        return np.tensordot(self.coefficients[k], np.array(self.basis), axes=1)


def _hs_vec(a):
    a = as_matrix(a)
    return np.concatenate([a.real.ravel(), a.imag.ravel()])


def gram_schmidt(observables, tol=1e-10) -> OrthogonalObservableBasis:
    """Modified Gram-Schmidt under the Hilbert-Schmidt inner product Tr(A B).

    Raises DependentObservablesError naming the first observable whose residual
    norm falls below ``tol`` (relative to its own norm when that exceeds one).
    """
    mats = [as_matrix(o) for o in observables]
    if not mats:
        raise ValueError("no observables given")
    n = mats[0].shape[0]
    vecs = [_hs_vec(a) for a in mats]
    q: list[np.ndarray] = []
    m = len(vecs)
    coeffs = np.zeros((m, m))
    for k, v in enumerate(vecs):
        r = v.copy()
        for i, b in enumerate(q):
            c = b @ r
            coeffs[k, i] += c
            r = r - c * b
        # second pass keeps orthogonality at rounding level
        for i, b in enumerate(q):
            c = b @ r
            coeffs[k, i] += c
            r = r - c * b
        norm = np.linalg.norm(r)
        if norm < tol * max(1.0, np.linalg.norm(v)):
            raise DependentObservablesError(k, norm)
        coeffs[k, k] = norm
        q.append(r / norm)
    half = n * n
    basis = tuple((b[:half] + 1j * b[half:]).reshape(n, n) for b in q)
    return OrthogonalObservableBasis(basis, coeffs)


def expectation_gradient_from_basis(basis: OrthogonalObservableBasis, k, system, field_, rho0, path=None,
                                    method="exact") -> np.ndarray:
    """Gradient density of <Theta_k> assembled from the orthonormal basis gradients."""
    if not 0 <= k < basis.coefficients.shape[0]:
        raise IndexError(f"observable index {k} out of range")
    g = functional_gradient(system, field_, rho0, basis.basis, path=path, method=method)
    return basis.coefficients[k] @ g.samples


def monte_carlo_gradient(objective, x0, sigma=None, n_samples=1000, seed=0, mode="sampling",
                         antithetic=True, box_width=4.0) -> np.ndarray:
    """Statistical gradient estimate from black-box evaluations around ``x0``.

    With an isotropic Gaussian sampler of width ``sigma`` the covariance is
    sigma^2 I and the estimate is Sigma^-1 <(x - x0) Phi(x)>.

    ``mode="sampling"`` draws x ~ N(x0, sigma^2 I) and averages (x - x0) Phi(x).
    ``mode="weight"`` draws x uniformly from the box x0 +- box_width*sigma and
    weights each term by the Gaussian density pi(x - x0) times the box volume.
    ``antithetic`` pairs every offset d with -d; the sampler stays symmetric so
    the estimator's expectation is unchanged. All offsets come from a single
    Philox stream in a fixed order, so the result does not depend on how the
    objective calls are scheduled.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    if sigma is None:
        rms = np.sqrt(np.mean(x0 ** 2))
        sigma = 0.05 * rms if rms > 0 else 0.05
    if not sigma > 0:
        raise ValueError("singular sampler covariance (sigma must be > 0)")
    rng = np.random.Generator(np.random.Philox(seed))
    n_draw = (n_samples + 1) // 2 if antithetic else n_samples
    if mode == "sampling":
        offs = rng.normal(scale=sigma, size=(n_draw, d))
    elif mode == "weight":
        offs = rng.uniform(-box_width * sigma, box_width * sigma, size=(n_draw, d))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if antithetic:
        offs = np.concatenate([offs, -offs])
    vals = np.array([objective(x0 + o) for o in offs])
    if mode == "weight":
        log_pi = -0.5 * np.sum(offs ** 2, axis=1) / sigma ** 2 - 0.5 * d * np.log(2 * np.pi * sigma ** 2)
        volume = (2 * box_width * sigma) ** d
        vals = vals * np.exp(log_pi) * volume
    return (offs.T @ vals) / (len(offs) * sigma ** 2)


@dataclass
class AscentResult:
    field: object
    values: list
    iterations: int
    converged: bool


def steepest_ascent(system, field_, rho0, theta, max_iter=2000, step=None, target=None, tol=1e-4,
                    grad_tol=1e-10, armijo=1e-4) -> AscentResult:
    """Dynamic steepest ascent of <Theta> along the functional gradient.

    The trial step length is the Barzilai-Borwein estimate from the last two
    iterates, and is halved until the Armijo condition
    ``gain >= armijo * step * |grad|^2`` holds, so every accepted step raises
    the objective. Stops once ``target - value < tol`` (when a target is given)
    or the gradient norm drops below ``grad_tol``.
    """
    theta = as_matrix(theta)
    f = field_
    dt = f.grid.dt
    path = propagate(system, f)
    val = expectation(path.final, rho0, theta)
    values = [val]
    g = functional_gradient(system, f, rho0, [theta], path=path).samples[0]
    gnorm2 = float(g @ g * dt)
    if step is None:
        step = 0.01 / max(np.sqrt(gnorm2), 1e-12)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if target is not None and target - val < tol:
            converged = True
            break
        if gnorm2 < grad_tol ** 2:
            converged = target is None
            break
        while True:
            trial = f.with_values(f.values + step * g)
            tpath = propagate(system, trial)
            tval = expectation(tpath.final, rho0, theta)
            if tval - val >= armijo * step * gnorm2 or step < 1e-14:
                break
            step *= 0.5
        if step < 1e-14:
            break
        g_new = functional_gradient(system, trial, rho0, [theta], path=tpath).samples[0]
        s_vec, y_vec = trial.values - f.values, g_new - g
        f, path, val, g = trial, tpath, tval, g_new
        values.append(val)
        gnorm2 = float(g @ g * dt)
        # ascent on a locally concave objective: y . s < 0
        sy = -float(s_vec @ y_vec * dt)
        step = float(s_vec @ s_vec * dt) / sy if sy > 0 else 2.0 * step
    else:
        converged = target is not None and target - val < tol
    return AscentResult(f, values, it, converged)
