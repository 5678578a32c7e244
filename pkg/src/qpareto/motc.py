"""Multiobservable tracking control (MOTC).

A track w_s, s in [0, 1], prescribes the expectation values of m observables.
The field follows it by integrating, in the algorithmic time s,

    d eps/ds (t) = f_s(t) + [c_s + dw/ds - int a_s f_s dt]^T Gamma^-1 a_s(t),

where a_s holds the gradient densities, Gamma_ij = int a^i a^j dt is the
Gramian, f_s is a free function and c_s = beta (w_s - Phi_s) pulls the state
back onto the track.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import io
from .core import as_matrix, expectations, matrix_log_unitary, propagate, unitarity_error
from .fields import ControlField, fluence
from .gradients import OrthogonalObservableBasis, functional_gradient

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e9
TRUNCATION_RTOL = 1e-9


class SingularGramianError(np.linalg.LinAlgError):
    pass


class TrackingDivergedError(RuntimeError):
    """Tracking error grew past the divergence limit; ``result`` holds the partial run."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


class LevelSetDriftError(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


class SequentialHoldError(RuntimeError):
    pass


# ---------------------------------------------------------------- Gramian


@dataclass(frozen=True)
class Gramian:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    condition_number: float
    inversion_mode: str

    @property
    def singular_values(self) -> np.ndarray:
        return np.sort(np.abs(self.eigenvalues))[::-1]

    def solve(self, rhs, mode=None) -> np.ndarray:
        """Gamma^-1 rhs. ``exact`` refuses ill-conditioned Gramians, ``truncated``
        drops directions with eigenvalue below 1e-9 of the largest."""
        mode = mode or self.inversion_mode
        if mode == "auto":
            mode = self.inversion_mode
        w, v = self.eigenvalues, self.eigenvectors
        proj = v.T @ np.asarray(rhs, dtype=float)
        if mode == "exact":
            if not self.condition_number <= CONDITION_LIMIT:
                raise SingularGramianError(
                    f"Gramian condition number {self.condition_number:.3e} exceeds {CONDITION_LIMIT:.0e}")
            return v @ (proj / w)
        if mode == "truncated":
            keep = w > TRUNCATION_RTOL * max(w.max(), 0.0)
            out = np.zeros_like(proj)
            out[keep] = proj[keep] / w[keep]
            return v @ out
        raise ValueError(f"unknown inversion mode {mode!r}")


def gramian(gradients, limit=CONDITION_LIMIT) -> Gramian:
    """Gamma_ij = sum_j a^i(t_j) a^j(t_j) dt with its spectrum and condition number."""
    a = gradients.samples
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("need at least one gradient row")
    g = a @ a.T * gradients.grid.dt
    g = 0.5 * (g + g.T)
    w, v = np.linalg.eigh(g)
    sv = np.abs(w)
    cond = float(sv.max() / sv.min()) if sv.min() > 0 else np.inf
    mode = "truncated" if not cond <= limit else "exact"
    return Gramian(g, w, v, cond, mode)


# ---------------------------------------------------------------- tracks


@dataclass(frozen=True)
class ConstantTrack:
    w: np.ndarray

    def __call__(self, s):
        w = np.asarray(self.w, dtype=float)
        return w, np.zeros_like(w)


@dataclass(frozen=True)
class LinearTrack:
    w0: np.ndarray
    w1: np.ndarray

    def __call__(self, s):
        w0, w1 = np.asarray(self.w0, dtype=float), np.asarray(self.w1, dtype=float)
        return w0 + s * (w1 - w0), w1 - w0


class GeodesicTrack:
    """Expectations along Q_s = U0 exp(i A s) with A = -i log(U0^dag W), so Q_1 = W."""

    def __init__(self, rho0, observables, u0, w):
        if isinstance(observables, OrthogonalObservableBasis):
            self.coefficients = observables.coefficients
            self.ops = np.array(observables.basis)
        else:
            self.ops = np.array([as_matrix(o) for o in observables])
            self.coefficients = np.eye(len(self.ops))
        self.rho = as_matrix(rho0)
        self.u0 = np.asarray(u0, dtype=complex)
        self.w = np.asarray(w, dtype=complex)
        for name, u in (("U0", self.u0), ("W", self.w)):
            if unitarity_error(u) > 1e-9:
                raise ValueError(f"{name} is not unitary")
        self.generator = matrix_log_unitary(self.u0.conj().T @ self.w)
        self._ew, self._ev = np.linalg.eigh(self.generator)

    def unitary(self, s) -> np.ndarray:
        return self.u0 @ (self._ev * np.exp(1j * self._ew * s)) @ self._ev.conj().T

    def __call__(self, s):
        q = self.unitary(s)
        r = q @ self.rho @ q.conj().T
        # d/ds (Q rho Q^dag) = Q i[A, rho] Q^dag
        dr = q @ (1j * (self.generator @ self.rho - self.rho @ self.generator)) @ q.conj().T
        w = np.einsum("ij,kji->k", r, self.ops).real
        dw = np.einsum("ij,kji->k", dr, self.ops).real
        return self.coefficients @ w, self.coefficients @ dw


def geodesic_track(rho0, basis: OrthogonalObservableBasis, u0, w, s) -> np.ndarray:
    """Target vector w_s of the geodesic from U0 to W (see GeodesicTrack)."""
    return GeodesicTrack(rho0, basis, u0, w)(s)[0]


# ---------------------------------------------------------------- free functions


@dataclass(frozen=True)
class FluencePolicy:
    """f_s(t) = -eps_s(t) / (eta S(t)), which lowers fluence at every step."""

    eta: float = 10.0
    weight: object = 1.0  # S(t): scalar, array of M samples, or callable of t

    def __call__(self, s, values, grid):
        if callable(self.weight):
            sw = np.asarray(self.weight(grid.sample_times), dtype=float)
        else:
            sw = np.broadcast_to(np.asarray(self.weight, dtype=float), values.shape)
        if np.any(sw <= 0):
            raise ValueError("fluence weight S(t) must be positive")
        return -values / (self.eta * sw)

    def to_dict(self):
        return {"kind": "fluence", "eta": self.eta,
                "weight": "callable" if callable(self.weight) else np.asarray(self.weight).tolist()}


def _free_values(policy, s, values, grid):
    if policy is None or (isinstance(policy, str) and policy == "zero"):
        return np.zeros_like(values)
    if callable(policy):
        return np.asarray(policy(s, values, grid), dtype=float)
    arr = np.asarray(policy, dtype=float)
    if arr.shape != values.shape:
        raise ValueError("free function has the wrong number of samples")
    return arr


@dataclass
class TrackPlan:
    """What to track and how to integrate it."""

    target: Callable
    free: object = None
    beta: float = 10.0
    integrator: str = "euler"
    s_steps: int | None = None
    inversion: str = "auto"
    ramp_tol: float = 1e-3
    substep_tol: float | None = None
    max_substeps: int = 256

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.s_steps is None:
            self.s_steps = 500 if self.integrator == "euler" else 150
        if self.s_steps < 1:
            raise ValueError("s_steps must be >= 1")

    def to_dict(self):
        free = self.free
        if hasattr(free, "to_dict"):
            free = free.to_dict()
        elif free is not None and not (isinstance(free, str) and free == "zero"):
            free = "custom"
        return {"track": type(self.target).__name__, "free": free, "beta": self.beta,
                "integrator": self.integrator, "s_steps": self.s_steps, "inversion": self.inversion,
                "ramp_tol": self.ramp_tol, "substep_tol": self.substep_tol, "max_substeps": self.max_substeps}


# ---------------------------------------------------------------- one step


@dataclass
class StepInfo:
    increment: np.ndarray
    phi: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    gramian: Gramian
    coefficients: np.ndarray


def motc_step(system, rho0, observables, field_, plan: TrackPlan, s, path=None) -> StepInfo:
    """The field derivative d eps/ds at algorithmic time ``s``."""
    if path is None:
        path = propagate(system, field_)
    phi = expectations(path.final, rho0, observables)
    grads = functional_gradient(system, field_, rho0, observables, path=path)
    gram = gramian(grads)
    w, dw = plan.target(s)
    values = np.asarray(field_.values)
    f = _free_values(plan.free, s, values, field_.grid)
    rhs = plan.beta * (w - phi) + dw - grads.inner(f)
    x = gram.solve(rhs, plan.inversion)
    return StepInfo(f + x @ grads.samples, phi, np.asarray(w, dtype=float), np.asarray(dw, dtype=float), gram, x)


# ---------------------------------------------------------------- track runs


@dataclass
class TrackResult:
    s: np.ndarray
    fields: np.ndarray  # (len(s), M)
    expectations: np.ndarray  # (len(s), m)
    targets: np.ndarray  # (len(s), m)
    condition_numbers: np.ndarray
    fluences: np.ndarray
    grid: object
    status: str = "ok"
    ramp_iterations: int = 0
    plan: dict = field(default_factory=dict)

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.expectations - self.targets, axis=1)

    @property
    def observable_errors(self) -> np.ndarray:
        return np.abs(self.expectations - self.targets)

    @property
    def final_error(self) -> float:
        return float(self.errors[-1])

    @property
    def max_observable_error(self) -> float:
        return float(self.observable_errors.max())

    def field_at(self, i) -> ControlField:
        return ControlField(self.grid, self.fields[i])

    def write(self, outdir, manifest=None):
        """track.csv, field_s0/mid/final.csv and track_manifest.json under ``outdir``."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        m = self.expectations.shape[1]
        header = (["s"] + [f"w_{k + 1}" for k in range(m)] + [f"phi_{k + 1}" for k in range(m)]
                  + ["error", "condition_number", "fluence"])
        rows = [[self.s[i], *self.targets[i], *self.expectations[i], self.errors[i], self.condition_numbers[i],
                 self.fluences[i]] for i in range(len(self.s))]
        io.write_csv(out / "track.csv", header, rows)
        times = self.grid.sample_times
        for tag, i in (("s0", 0), ("smid", len(self.s) // 2), ("sfinal", len(self.s) - 1)):
            io.write_csv(out / f"field_{tag}.csv", ["t", "epsilon"], zip(times, self.fields[i]))
        info = {"plan": self.plan, "status": self.status, "ramp_iterations": self.ramp_iterations,
                "final_error": self.final_error, "grid": self.grid.to_dict()}
        if manifest:
            info.update(manifest)
        io.write_json(out / "track_manifest.json", info)
        return out


def _ramp_in(system, rho0, observables, field_, w0, tol, max_iter=20, mode="auto"):
    """Newton-type corrections that bring Phi onto w_0 before tracking starts."""
    for it in range(max_iter + 1):
        path = propagate(system, field_)
        phi = expectations(path.final, rho0, observables)
        if np.max(np.abs(phi - w0)) <= 0.1 * tol:
            return field_, it
        grads = functional_gradient(system, field_, rho0, observables, path=path)
        x = gramian(grads).solve(w0 - phi, mode)
        field_ = field_.with_values(field_.values + x @ grads.samples)
    return field_, max_iter


def run_track(system, rho0, observables, initial_field, plan: TrackPlan, raise_on_divergence=True,
              divergence_factor=10.0) -> TrackResult:
    """Integrate the MOTC equation over s in [0, 1].

    If Phi at the initial field misses w_0 by more than ``plan.ramp_tol`` a short
    Gramian-corrected ramp-in is run first. The run aborts when the tracking
    error exceeds ``divergence_factor`` times the span of the track (at least
    1e-2); the partial result is attached to TrackingDivergedError, or returned
    with status "diverged" when ``raise_on_divergence`` is False.
    """
    obs = [as_matrix(o) for o in observables]
    w0, _ = plan.target(0.0)
    w1, _ = plan.target(1.0)
    span = max(float(np.linalg.norm(np.asarray(w1) - np.asarray(w0))), 1e-2)
    f = initial_field
    phi0 = expectations(propagate(system, f).final, rho0, obs)
    ramp = 0
    if np.max(np.abs(phi0 - w0)) > plan.ramp_tol:
        log.info("initial mismatch %.3e, ramping in", np.max(np.abs(phi0 - w0)))
        f, ramp = _ramp_in(system, rho0, obs, f, np.asarray(w0, dtype=float), plan.ramp_tol, mode=plan.inversion)

    n = plan.s_steps
    ds = 1.0 / n
    grid = f.grid
    s_vals, fields, phis, ws, conds, flus = [], [], [], [], [], []
    substeps: list[int] = []
    status = "ok"

    def deriv(values, s, path=None):
        return motc_step(system, rho0, obs, ControlField(grid, values), plan, s, path=path)

    def adaptive_euler(values, s, info):
        """Euler substeps over [s, s + ds]. A substep of length h is accepted when
        Phi lands within ``plan.substep_tol * h`` of its first-order prediction,
        so the miss per unit of s stays below ``substep_tol`` and the steady
        tracking lag under correction is roughly ``substep_tol / beta``."""
        end = s + ds
        h = ds
        used = 0
        while s < end - 1e-15:
            h = min(h, end - s)
            while True:
                trial = values + h * info.increment
                path = propagate(system, trial, grid)
                phi = expectations(path.final, rho0, obs)
                # to first order the increment moves Phi by exactly c_s + dw/ds
                change = h * (plan.beta * (info.w - info.phi) + info.dw)
                miss = float(np.max(np.abs(phi - info.phi - change)))
                used += 1
                if miss <= plan.substep_tol * h or used >= plan.max_substeps:
                    break
                h *= 0.5
            values, s = trial, s + h
            if s < end - 1e-15:
                info = deriv(values, s, path)
            h *= 2.0
        return values, used

    def record(s, values, info):
        s_vals.append(s)
        fields.append(np.array(values))
        phis.append(info.phi)
        ws.append(info.w)
        conds.append(info.gramian.condition_number)
        flus.append(float(np.sum(values ** 2) * grid.dt))

    def result():
        return TrackResult(np.array(s_vals), np.array(fields), np.array(phis), np.array(ws), np.array(conds),
                           np.array(flus), grid, status, ramp, plan.to_dict())

    values = np.array(f.values)
    limit = divergence_factor * span
    for i in range(n + 1):
        s = i * ds
        k1 = deriv(values, s)
        record(s, values, k1)
        err = float(np.linalg.norm(k1.phi - k1.w))
        if not np.isfinite(err) or err > limit:
            status = "diverged"
            log.warning("tracking diverged at s=%.4f: error %.3e > %.3e (cond %.3e)", s, err, limit,
                        k1.gramian.condition_number)
            if raise_on_divergence:
                raise TrackingDivergedError(f"tracking error {err:.3e} exceeded {limit:.3e} at s={s:.4f}",
                                            result())
            break
        if i == n:
            break
        if plan.integrator == "euler" and plan.substep_tol is not None:
            values, used = adaptive_euler(values, s, k1)
            substeps.append(used)
            log.debug("s=%.4f: %d substep trials", s, used)
        elif plan.integrator == "euler":
            values = values + ds * k1.increment
        else:
            k2 = deriv(values + 0.5 * ds * k1.increment, s + 0.5 * ds).increment
            k3 = deriv(values + 0.5 * ds * k2, s + 0.5 * ds).increment
            k4 = deriv(values + ds * k3, s + ds).increment
            values = values + ds / 6.0 * (k1.increment + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(values)):
            status = "diverged"
            if raise_on_divergence:
                raise TrackingDivergedError("field became non-finite", result())
            break
    return result()


# ---------------------------------------------------------------- level sets


def level_set_excursion(system, rho0, observables, field_on_front, policy=None, s_steps=100, beta=0.0,
                        drift_tol=1e-2, retry_beta=10.0, start_tol=1e-3, chi=None,
                        integrator="euler") -> TrackResult:
    """Move the field inside the level set Phi_k = chi_k while the free function acts.

    With the default FluencePolicy the field sheds fluence. A drift above
    ``drift_tol`` aborts the run; when ``beta`` is 0 and ``retry_beta`` is set,
    the excursion is retried once with error correction.
    """
    obs = [as_matrix(o) for o in observables]
    policy = FluencePolicy() if policy is None else policy
    phi0 = expectations(propagate(system, field_on_front).final, rho0, obs)
    chi = phi0 if chi is None else np.asarray(chi, dtype=float)
    if np.max(np.abs(phi0 - chi)) > start_tol:
        raise ValueError(f"start field misses the level set by {np.max(np.abs(phi0 - chi)):.3e}")
    plan = TrackPlan(ConstantTrack(chi), free=policy, beta=beta, integrator=integrator, s_steps=s_steps,
                     ramp_tol=np.inf)
    res = run_track(system, rho0, obs, field_on_front, plan, raise_on_divergence=False)
    drift = res.max_observable_error
    if drift > drift_tol or res.status != "ok":
        if beta == 0 and retry_beta:
            log.info("level-set drift %.3e, retrying with beta=%g", drift, retry_beta)
            return level_set_excursion(system, rho0, obs, field_on_front, policy, s_steps, retry_beta,
                                       drift_tol, None, start_tol, chi, integrator)
        res.status = "drift"
        raise LevelSetDriftError(f"expectation drift {drift:.3e} exceeds {drift_tol:.1e}", res)
    return res


# ---------------------------------------------------------------- sequential maximization


def sequential_maximization(system, rho0, observables, order, initial_field, max_iter=2000, hold_tol=1e-3,
                            fail_tol=1e-2, stagnation_tol=1e-4, stagnation_steps=10, step=None,
                            beta=1.0) -> list[TrackResult]:
    """Maximize observables one at a time, holding those already maximized.

    Stage r raises Phi_{p_r} while the earlier Phi_{p_1..p_{r-1}} are held at
    their stage-end values. The stage field moves along the component of a^{p_r}
    orthogonal to the held gradients, so w^{p_r} rises at the rate
    gamma * |P a^{p_r}|^2, and the held values get the correction
    beta (chi - Phi)^T Gamma_H^-1 a_H. A step is accepted when Phi_{p_r} does not
    fall and every held value stays within ``hold_tol``; otherwise gamma halves.
    The conditional maximum is declared once |P a^{p_r}| < ``stagnation_tol`` for
    ``stagnation_steps`` consecutive steps.
    """
    obs = [as_matrix(o) for o in observables]
    order = list(order)
    if sorted(order) != list(range(len(obs))):
        raise ValueError("order must be a permutation of the observable indices")
    f = initial_field
    held: list[int] = []
    chi: dict[int, float] = {}
    stages = []
    for k in order:
        path = propagate(system, f)
        phi = expectations(path.final, rho0, obs)
        grads = functional_gradient(system, f, rho0, obs, path=path).samples
        dt = f.grid.dt
        gamma = step
        hist_s, hist_f, hist_phi, hist_w, hist_c, hist_fl = [], [], [], [], [], []
        quiet = 0

        def direction(phi, grads):
            a = grads[k]
            if not held:
                return a, np.zeros_like(a), 1.0
            ah = grads[held]
            gram = ah @ ah.T * dt
            gw, gv = np.linalg.eigh(gram)
            keep = gw > TRUNCATION_RTOL * gw.max()
            inv = (gv[:, keep] / gw[keep]) @ gv[:, keep].T
            proj = a - (inv @ (ah @ a * dt)) @ ah
            target = np.array([chi[h] for h in held])
            corr = (inv @ (beta * (target - phi[held]))) @ ah
            cond = gw.max() / gw.min() if gw.min() > 0 else np.inf
            return proj, corr, cond

        def targets_vec(phi):
            w = phi.copy()
            for h in held:
                w[h] = chi[h]
            return w

        proj, corr, cond = direction(phi, grads)
        for it in range(max_iter + 1):
            pnorm = float(np.sqrt(proj @ proj * dt))
            hist_s.append(it)
            hist_f.append(np.array(f.values))
            hist_phi.append(phi)
            hist_w.append(targets_vec(phi))
            hist_c.append(cond)
            hist_fl.append(fluence(f))
            quiet = quiet + 1 if pnorm < stagnation_tol else 0
            if quiet >= stagnation_steps or it == max_iter:
                break
            if gamma is None:
                gamma = 0.01 / max(pnorm, 1e-12)
            while True:
                trial = f.with_values(f.values + gamma * proj + corr)
                tpath = propagate(system, trial)
                tphi = expectations(tpath.final, rho0, obs)
                drift = max((abs(tphi[h] - chi[h]) for h in held), default=0.0)
                if tphi[k] >= phi[k] - 1e-12 and drift <= hold_tol:
                    break
                gamma *= 0.5
                corr = 0.5 * corr
                if gamma < 1e-14:
                    break
            if gamma < 1e-14:
                break
            f, phi = trial, tphi
            grads = functional_gradient(system, f, rho0, obs, path=tpath).samples
            proj, corr, cond = direction(phi, grads)
            gamma *= 1.5
        drift = max((abs(phi[h] - chi[h]) for h in held), default=0.0)
        total = max(len(hist_s) - 1, 1)
        res = TrackResult(np.array(hist_s, dtype=float) / total, np.array(hist_f), np.array(hist_phi),
                          np.array(hist_w), np.array(hist_c, dtype=float), np.array(hist_fl), f.grid,
                          "ok", 0, {"stage_observable": k, "held": list(held), "beta": beta})
        stages.append(res)
        if drift > fail_tol:
            raise SequentialHoldError(f"stage for observable {k} lost held targets by {drift:.3e}")
        held.append(k)
        chi[k] = float(phi[k])
    return stages
