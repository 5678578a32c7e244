"""Kinematic picture: objectives as functions of the unitary U alone.

Covers the gradient flow on U(N), eigenvalue-matching extrema, target
feasibility on the unitary orbit, permutation classes of critical points and
their dimensions, the Lemma-style convergence checks for weighted objectives
and the linear program that designs weights for a requested class.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.optimize
import scipy.special

from . import io, lp
from .core import (
    as_matrix,
    density_matrix,
    expectations,
    expm_hermitian,
    group_spectrum,
    observable,
    polar_unitary,
    random_unitary,
    von_neumann_entropy,
)

COMMUTE_TOL = 1e-10
MAX_PARTITION_DIM = 8
MAX_WEIGHT_DIM = 6
WEIGHT_FLOOR = 1e-6


class FlowStepUnderflow(RuntimeError):
    """The monotone step control shrank the step below the floor."""


class NonCommutingError(ValueError):
    pass


class OverdeterminedWarning(UserWarning):
    """More independent targets than the orbit dimension allows."""


class InfeasibleWeightsError(ValueError):
    pass


# ---------------------------------------------------------------- extrema


def matching_extrema(rho0, theta):
    """(chi_min, chi_max) of Tr(U rho0 U^dag Theta) over U(N)."""
    lam = np.sort(np.linalg.eigvalsh(as_matrix(rho0)))
    gam = np.sort(np.linalg.eigvalsh(as_matrix(theta)))
    return float(lam @ gam[::-1]), float(lam @ gam)


# ---------------------------------------------------------------- gradient flow


@dataclass
class FlowResult:
    unitary: np.ndarray
    objective: np.ndarray  # Phi_M after every accepted step, starting point first
    expectations: np.ndarray  # (accepted steps + 1, m)
    steps: int
    converged: bool
    unitaries: list | None = field(default=None, repr=False)


def weighted_observable(observables, weights) -> np.ndarray:
    mats = [as_matrix(o) for o in observables]
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(mats),):
        raise ValueError("need one weight per observable")
    return np.tensordot(w, np.array(mats), axes=1)


def kinematic_flow(rho0, observables, weights, u_init=None, steps=5000, step_size=None,
                   grad_tol=1e-7, min_step=1e-14, record_unitaries=False, stop_index=None,
                   stop_fraction=None) -> FlowResult:
    """Euler integration of dU/ds = [Theta_M, U rho0 U^dag] U on U(N).

    Theta_M = sum_k alpha_k Theta_k. Each step is projected back onto the group
    with the polar factor. A step that would lower Phi_M is retried at half the
    size; accepted steps grow the size by 1.2. Stops when the velocity norm
    falls below ``grad_tol``, or, when ``stop_fraction`` is given, as soon as
    observable ``stop_index`` reaches that fraction of its maximum.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    rho = as_matrix(rho0)
    mats = [as_matrix(o) for o in observables]
    theta_m = weighted_observable(mats, w)
    n = rho.shape[0]
    u = np.eye(n, dtype=complex) if u_init is None else np.asarray(u_init, dtype=complex)

    def state(u):
        r = u @ rho @ u.conj().T
        return float(np.trace(r @ theta_m).real), r

    phi, r = state(u)
    stop_level = None
    if stop_fraction is not None:
        idx = int(np.argmax(w)) if stop_index is None else stop_index
        stop_level = (idx, stop_fraction * matching_extrema(rho, mats[idx])[1])
    if step_size is None:
        scale = np.linalg.norm(theta_m, 2) * np.linalg.norm(rho, 2)
        step_size = 0.25 / max(scale, 1e-12)
    h = step_size
    objective = [phi]
    exps = [expectations(u, rho, mats)]
    traj = [u.copy()] if record_unitaries else None
    converged = False
    taken = 0
    while taken < steps:
        if stop_level is not None and exps[-1][stop_level[0]] >= stop_level[1]:
            converged = True
            break
        g = theta_m @ r - r @ theta_m
        if np.linalg.norm(g) < grad_tol:
            converged = True
            break
        while True:
            trial = polar_unitary(u + h * g @ u)
            tphi, tr = state(trial)
            if tphi >= phi - 1e-15 * max(1.0, abs(phi)):
                break
            h *= 0.5
            if h < min_step:
                raise FlowStepUnderflow(f"step size fell below {min_step:g} at Phi_M = {phi:.6g}")
        u, phi, r = trial, tphi, tr
        h *= 1.2
        taken += 1
        objective.append(phi)
        exps.append(expectations(u, rho, mats))
        if record_unitaries:
            traj.append(u.copy())
    return FlowResult(u, np.array(objective), np.array(exps), taken, converged, traj)


# ---------------------------------------------------------------- feasibility


@dataclass
class FeasibilityResult:
    found: bool
    unitary: np.ndarray | None
    residual: float
    restarts_used: int
    entropy: dict
    maxent_state: np.ndarray
    maxent_multipliers: np.ndarray
    maxent_residual: float
    overdetermined: bool


def _independent_count(mats, tol=1e-10) -> int:
    vecs = np.array([np.concatenate([m.real.ravel(), m.imag.ravel()]) for m in mats])
    s = np.linalg.svd(vecs, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0])))


def _gauss_newton(u, rho, mats, targets, tol, max_iter):
    """Levenberg-Marquardt on U(N) with the update U <- exp(iX) U, X = sum y_k G_k."""
    lam = 1e-6
    res = expectations(u, rho, mats) - targets
    cost = float(res @ res)
    for _ in range(max_iter):
        if np.sqrt(cost) < tol:
            break
        r = u @ rho @ u.conj().T
        # dPhi_k along exp(iX) is Tr(X G_k) with G_k = i[rho_U, Theta_k]
        gs = np.array([1j * (r @ th - th @ r) for th in mats])
        k = np.einsum("aij,bji->ab", gs, gs).real
        improved = False
        for _ in range(30):
            y = np.linalg.solve(k + lam * np.eye(len(mats)), -res)
            x = np.tensordot(y, gs, axes=1)
            trial = expm_hermitian(0.5 * (x + x.conj().T)) @ u
            tres = expectations(trial, rho, mats) - targets
            tcost = float(tres @ tres)
            if tcost < cost:
                u, res, cost = trial, tres, tcost
                lam = max(lam / 3, 1e-12)
                improved = True
                break
            lam *= 4
        if not improved:
            break
    return u, float(np.sqrt(cost))


def maxent_surrogate(observables, targets, max_iter=500):
    """Fit rho ~ exp(sum_k lambda_k Theta_k) to the targets through the convex dual."""
    mats = np.array([as_matrix(o) for o in observables])
    chi = np.asarray(targets, dtype=float)

    def dual(lmb):
        h = np.tensordot(lmb, mats, axes=1)
        w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
        logz = scipy.special.logsumexp(w)
        p = np.exp(w - logz)
        rho = (v * p) @ v.conj().T
        grad = np.einsum("ij,kji->k", rho, mats).real - chi
        return logz - lmb @ chi, grad

    sol = scipy.optimize.minimize(dual, np.zeros(len(chi)), jac=True, method="BFGS",
                                  options={"maxiter": max_iter, "gtol": 1e-10})
    h = np.tensordot(sol.x, mats, axes=1)
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    p = np.exp(w - scipy.special.logsumexp(w))
    rho = (v * p) @ v.conj().T
    resid = float(np.linalg.norm(np.einsum("ij,kji->k", rho, mats).real - chi))
    return rho, sol.x, resid


def feasible_target_solver(rho0, observables, targets, seed=0, restarts=8, tol=1e-6,
                           max_iter=2000) -> FeasibilityResult:
    """Look for U with Tr(U rho0 U^dag Theta_k) = chi_k for every k.

    Tries U = I first, then ``restarts`` Haar-random starts drawn from ``seed``.
    A stall above ``tol`` on every start is reported as not found, which is not
    a proof of infeasibility. The entropy of U rho0 U^dag does not depend on U,
    so it is reported once; the max-ent state fitted to the targets is
    returned alongside as a reference.
    """
    rho_obj = density_matrix(rho0)
    rho = rho_obj.matrix
    mats = [as_matrix(o) for o in observables]
    chi = np.asarray(targets, dtype=float)
    if chi.shape != (len(mats),):
        raise ValueError("need one target per observable")
    for k, th in enumerate(mats):
        lo, hi = matching_extrema(rho, th)
        if not lo - 1e-9 <= chi[k] <= hi + 1e-9:
            raise ValueError(f"target {k} = {chi[k]} outside [{lo}, {hi}]")
    n = rho.shape[0]
    rank = rho_obj.rank
    limit = 2 * n * rank - rank * rank
    over = _independent_count(mats) > limit
    if over:
        warnings.warn(f"{_independent_count(mats)} independent targets exceed the orbit bound {limit}",
                      OverdeterminedWarning, stacklevel=2)

    rng = np.random.default_rng(seed)
    starts = [np.eye(n, dtype=complex)] + [random_unitary(n, rng) for _ in range(restarts)]
    best_u, best_res, used = None, np.inf, 0
    for i, u0 in enumerate(starts):
        used = i + 1
        # boundary targets converge slowly, so aim well below the acceptance level
        u, res = _gauss_newton(u0, rho, mats, chi, 1e-3 * tol, max_iter)
        if res < best_res:
            best_u, best_res = u, res
        if res < tol:
            break
    me_rho, me_l, me_res = maxent_surrogate(mats, chi)
    found = best_res < tol
    return FeasibilityResult(found, best_u if found else None, best_res, used, von_neumann_entropy(rho_obj),
                             me_rho, me_l, me_res, over)


# ---------------------------------------------------------------- permutation classes


@dataclass(frozen=True)
class ContingencyTable:
    """Counts v[x, y] of positions shared by row block x and column block y."""

    rows: tuple
    cols: tuple
    entries: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.entries, dtype=int)
        if v.shape != (len(self.rows), len(self.cols)):
            raise ValueError("table shape does not match multiplicity vectors")
        if np.any(v < 0):
            raise ValueError("table entries must be nonnegative")
        if tuple(v.sum(axis=1)) != tuple(self.rows) or tuple(v.sum(axis=0)) != tuple(self.cols):
            raise ValueError("table margins do not match multiplicities")
        object.__setattr__(self, "entries", v)


def critical_dimension(rho_multiplicities, theta_multiplicities, table) -> int:
    """sum n_x^2 + sum m_y^2 - sum v_xy^2 for the critical manifold of a class."""
    if not isinstance(table, ContingencyTable):
        table = ContingencyTable(tuple(rho_multiplicities), tuple(theta_multiplicities), table)
    elif tuple(table.rows) != tuple(rho_multiplicities) or tuple(table.cols) != tuple(theta_multiplicities):
        raise ValueError("table margins do not match multiplicities")
    n = np.asarray(rho_multiplicities)
    m = np.asarray(theta_multiplicities)
    return int(np.sum(n ** 2) + np.sum(m ** 2) - np.sum(table.entries ** 2))


def _labels(values):
    """Block label of each position (blocks indexed by ascending value) and block sizes."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    _, mult = group_spectrum(values[order])
    labels = np.empty(values.size, dtype=int)
    labels[order] = np.repeat(np.arange(len(mult)), mult)
    return labels, mult


def _tables(perms, row_labels, n_rows, col_labels, n_cols):
    """Contingency table of every permutation, flattened to (P, n_rows * n_cols)."""
    key = row_labels[None, :] * n_cols + col_labels[perms]
    out = np.zeros((perms.shape[0], n_rows * n_cols), dtype=int)
    np.add.at(out, (np.repeat(np.arange(perms.shape[0]), perms.shape[1]), key.ravel()), 1)
    return out


def _all_perms(n):
    return np.array(list(itertools.permutations(range(n))), dtype=int).reshape(-1, n)


@dataclass
class PermutationClassPartition:
    """Classes of permutations with the same block pattern.

    A permutation p sends rho0's j-th ascending eigenvalue to Theta's position
    p[j]; ``perms`` lists all N! of them and ``class_ids`` gives each one's
    class. Class 0 is the maximal class, the rest are sorted by decreasing
    critical value.
    """

    observable_index: int | None
    perms: np.ndarray = field(repr=False)
    class_ids: np.ndarray = field(repr=False)
    tables: list = field(repr=False)
    critical_values: np.ndarray
    rho_multiplicities: tuple
    theta_multiplicities: tuple
    class_of_max: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.tables)

    @property
    def classes(self) -> list:
        out = [set() for _ in range(self.n_classes)]
        for p, c in zip(self.perms, self.class_ids):
            out[c].add(tuple(int(x) for x in p))
        return out

    def sizes(self) -> np.ndarray:
        return np.bincount(self.class_ids, minlength=self.n_classes)

    def dimension(self, i) -> int:
        return critical_dimension(self.rho_multiplicities, self.theta_multiplicities, self.tables[i])

    def class_of(self, perm) -> int:
        idx = np.flatnonzero(np.all(self.perms == np.asarray(perm), axis=1))
        if idx.size == 0:
            raise ValueError("not a permutation of the right size")
        return int(self.class_ids[idx[0]])

    def write_csv(self, path):
        sizes = self.sizes()
        return io.write_csv(path, ["class_id", "size", "critical_value", "dimension"],
                            [[i, int(sizes[i]), float(self.critical_values[i]), self.dimension(i)]
                             for i in range(self.n_classes)])


def _partition(lam, rho_labels, rho_mult, theta_vals, observable_index=None, perms=None):
    n = lam.size
    if perms is None:
        perms = _all_perms(n)
    col_labels, col_mult = _labels(theta_vals)
    r, c = len(rho_mult), len(col_mult)
    flat = _tables(perms, rho_labels, r, col_labels, c)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.ravel()
    crit = theta_vals[perms] @ lam
    class_crit = np.array([crit[inv == i].mean() for i in range(len(uniq))])
    # max class: ascending positions of rho matched to ascending positions of Theta
    asc = np.argsort(theta_vals, kind="stable")
    max_flat = _tables(asc[None, :], rho_labels, r, col_labels, c)[0]
    max_id = int(np.flatnonzero(np.all(uniq == max_flat, axis=1))[0])
    rest = sorted((i for i in range(len(uniq)) if i != max_id),
                  key=lambda i: (-round(class_crit[i], 12), tuple(uniq[i])))
    order = [max_id] + rest
    remap = np.empty(len(uniq), dtype=int)
    remap[order] = np.arange(len(uniq))
    tables = [ContingencyTable(tuple(rho_mult), tuple(col_mult), uniq[i].reshape(r, c)) for i in order]
    return PermutationClassPartition(observable_index, perms, remap[inv], tables, class_crit[order],
                                     tuple(rho_mult), tuple(col_mult))


def _rho_arrangement(rho0):
    rho = density_matrix(rho0) if not hasattr(rho0, "eigenvalues") else rho0
    lam = np.asarray(rho.eigenvalues, dtype=float)
    return lam, rho.block_labels(), rho.multiplicities


def partition_permutations(rho0, theta, observable_index=None) -> PermutationClassPartition:
    """Group all N! eigenvalue pairings of rho0 and Theta into critical classes."""
    lam, rl, rm = _rho_arrangement(rho0)
    n = lam.size
    if n > MAX_PARTITION_DIM:
        raise ValueError(f"N = {n} is too large to enumerate (limit {MAX_PARTITION_DIM})")
    th = observable(theta)
    if th.dim != n:
        raise ValueError("rho0 and Theta dimensions differ")
    return _partition(lam, rl, rm, np.asarray(th.eigenvalues, dtype=float), observable_index)


def common_eigenbasis(observables, tol=COMMUTE_TOL, seed=12345):
    """Unitary S diagonalizing every observable, plus the diagonal values (m, N).

    Uses the eigenvectors of a random real combination, which separates the
    joint eigenspaces with probability one.
    """
    mats = [as_matrix(o) for o in observables]
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            c = mats[i] @ mats[j] - mats[j] @ mats[i]
            if np.max(np.abs(c), initial=0.0) > tol:
                raise NonCommutingError(f"observables {i} and {j} do not commute")
    coef = np.random.default_rng(seed).uniform(0.5, 1.5, len(mats))
    _, s = np.linalg.eigh(np.tensordot(coef, np.array(mats), axes=1))
    diags = np.array([np.diagonal(s.conj().T @ m @ s).real for m in mats])
    for m, d in zip(mats, diags):
        off = s.conj().T @ m @ s - np.diag(d)
        if np.max(np.abs(off)) > 1e-8 * max(1.0, np.max(np.abs(d))):
            raise ArithmeticError("failed to find a common eigenbasis")
    return s, diags


@dataclass
class _Joint:
    lam: np.ndarray
    rho_labels: np.ndarray
    rho_mult: tuple
    values: np.ndarray  # (m, N) values of each observable on the common basis
    perms: np.ndarray
    class_ids: np.ndarray  # (m, P) class of each perm in each observable's own partition
    own: list  # own partitions


def _joint(rho0, observables, max_dim=MAX_PARTITION_DIM) -> _Joint:
    lam, rl, rm = _rho_arrangement(rho0)
    n = lam.size
    if n > max_dim:
        raise ValueError(f"N = {n} is too large to enumerate (limit {max_dim})")
    _, vals = common_eigenbasis(observables)
    perms = _all_perms(n)
    own, ids = [], []
    for k, v in enumerate(vals):
        part = partition_permutations(rho0, np.diag(np.sort(v)), observable_index=k)
        lookup = {t.entries.tobytes(): i for i, t in enumerate(part.tables)}
        labels, mult = _labels(v)
        flat = _tables(perms, rl, len(rm), labels, len(mult))
        ids.append([lookup[row.reshape(len(rm), len(mult)).astype(int).tobytes()] for row in flat])
        own.append(part)
    return _Joint(lam, rl, rm, vals, perms, np.array(ids), own)


# ---------------------------------------------------------------- intersections


@dataclass
class IntersectionBounds:
    lower: int | None
    upper: int
    common_permutations: int

    @property
    def empty(self) -> bool:
        return self.common_permutations == 0


def intersection_bounds(theta_a, theta_b, rho0, i, j, lower=True) -> IntersectionBounds:
    """Dimension bounds for the intersection of class i of Theta_a with class j of Theta_b.

    upper = min of the two critical dimensions. For commuting pairs the lower
    bound is the largest sum n_x^2 + sum p_xy^2 - sum q_xyz^2 over permutations
    lying in both classes; p counts positions per (a-block, b-block) and q
    counts rho blocks against them. ``lower`` is None when no permutation lies
    in both classes.
    """
    pa = partition_permutations(rho0, theta_a)
    pb = partition_permutations(rho0, theta_b)
    upper = min(pa.dimension(i), pb.dimension(j))
    if not lower:
        return IntersectionBounds(None, upper, -1)
    joint = _joint(rho0, [theta_a, theta_b])
    mask = (joint.class_ids[0] == i) & (joint.class_ids[1] == j)
    if not np.any(mask):
        return IntersectionBounds(None, upper, 0)
    la, _ = _labels(joint.values[0])
    lb, _ = _labels(joint.values[1])
    nb = lb.max() + 1
    pair = la * nb + lb
    p = np.bincount(pair)
    sum_n2 = int(np.sum(np.asarray(joint.rho_mult) ** 2))
    sum_p2 = int(np.sum(p ** 2))
    best = None
    n_pair = pair.max() + 1
    for perm in joint.perms[mask]:
        q = np.bincount(joint.rho_labels * n_pair + pair[perm])
        val = sum_n2 + sum_p2 - int(np.sum(q ** 2))
        best = val if best is None else max(best, val)
    return IntersectionBounds(best, upper, int(mask.sum()))


# ---------------------------------------------------------------- Lemma-style checks


@dataclass
class Lemma1Verdict:
    """Convergence flags for one observable under the weighted objective.

    The flags are not exclusive; ``label`` picks the strongest that holds, in the
    order guaranteed_weak, may_converge_strong, may_converge_weak, none.
    """

    observable_index: int
    may_converge_weak: bool
    guaranteed_weak: bool
    may_converge_strong: bool
    dim_weighted_max: int
    intersection: IntersectionBounds | None = None

    @property
    def label(self) -> str:
        if self.guaranteed_weak:
            return "guaranteed_weak"
        if self.may_converge_strong:
            return "may_converge_strong"
        if self.may_converge_weak:
            return "may_converge_weak"
        return "none"


def lemma1_check(rho0, observables, weights) -> list[Lemma1Verdict]:
    w = np.asarray(weights, dtype=float)
    mats = [as_matrix(o) for o in observables]
    if w.shape != (len(mats),) or np.any(w <= 0):
        raise ValueError("need one strictly positive weight per observable")
    theta_m = weighted_observable(mats, w)
    joint = _joint(rho0, mats + [theta_m])
    m = len(mats)
    in_max = joint.class_ids == 0  # (m + 1, P)
    max_m = in_max[m]
    lm, _ = _labels(joint.values[m])
    weak = [bool(np.any(in_max[k] & max_m)) for k in range(m)]
    strong = all(weak)
    out = []
    for k in range(m):
        lk, _ = _labels(joint.values[k])
        nested = all(len(set(lk[lm == b])) == 1 for b in np.unique(lm))
        subset = bool(np.all(in_max[k][max_m]))
        bounds = None
        if weak[k]:
            bounds = intersection_bounds(mats[k], theta_m, rho0, 0, 0)
        out.append(Lemma1Verdict(k, weak[k], nested and subset, strong, joint.own[m].dimension(0), bounds))
    return out


# ---------------------------------------------------------------- weight design


@dataclass
class WeightSolution:
    weights: np.ndarray
    permutation: tuple
    margin: float
    critical_values: np.ndarray  # per observable at the chosen permutation


def _weight_lp(gaps, floor):
    """max t s.t. gaps @ alpha >= t, alpha >= floor, sum(alpha) = 1, t >= 0."""
    m = gaps.shape[1] if gaps.size else 0
    # variables: beta = alpha - floor (m), t
    if gaps.size:
        a_ub = np.hstack([-gaps, np.ones((gaps.shape[0], 1))])
        b_ub = floor * gaps.sum(axis=1)
    else:
        a_ub = np.zeros((0, m + 1))
        b_ub = np.zeros(0)
    cap = np.zeros((1, m + 1))
    cap[0, -1] = 1.0
    a_ub = np.vstack([a_ub, cap])
    b_ub = np.append(b_ub, 1.0)
    a_eq = np.append(np.ones(m), 0.0)[None, :]
    b_eq = [1.0 - m * floor]
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = lp.linprog(c, a_ub, b_ub, a_eq, b_eq)
    if res.status != "optimal":
        return None, None
    return res.x[:m] + floor, float(res.x[-1])


def weight_solver(rho0, observables, requested, floor=WEIGHT_FLOOR) -> WeightSolution:
    """Weights alpha_k > 0 that make a permutation in the requested classes the maximum.

    ``requested`` maps observable index to a class index of that observable's
    own partition (0 is the maximal class). Observables without a request may
    sit in any class. For each candidate permutation the LP maximizes the
    smallest gap sum_k alpha_k (c_k(pi) - c_k(pi')) over permutations pi' with a
    different critical-value vector. The first candidate with a strictly
    positive gap is returned, else the first with a zero gap.
    """
    mats = [as_matrix(o) for o in observables]
    if not mats:
        raise ValueError("no observables given")
    joint = _joint(rho0, mats, max_dim=MAX_WEIGHT_DIM)
    mask = np.ones(joint.perms.shape[0], dtype=bool)
    for k, cls in dict(requested).items():
        if not 0 <= k < len(mats):
            raise IndexError(f"observable index {k} out of range")
        mask &= joint.class_ids[k] == cls
    if not np.any(mask):
        raise InfeasibleWeightsError("requested classes have no permutation in common")
    crit = np.array([v[joint.perms] @ joint.lam for v in joint.values]).T  # (P, m)
    rounded = np.round(crit, 12)
    first_zero = None
    seen = set()
    for idx in np.flatnonzero(mask):
        key = tuple(rounded[idx])
        if key in seen:
            continue
        seen.add(key)
        gaps = crit[idx] - crit
        keep = np.max(np.abs(gaps), axis=1) > 1e-12
        gaps = np.unique(np.round(gaps[keep], 13), axis=0)
        alpha, margin = _weight_lp(gaps, floor)
        if alpha is None:
            continue
        sol = WeightSolution(alpha, tuple(int(x) for x in joint.perms[idx]), margin, crit[idx])
        if margin > 1e-12:
            return sol
        if first_zero is None:
            first_zero = sol
    if first_zero is not None:
        return first_zero
    raise InfeasibleWeightsError("no weighting makes the requested classes maximal")


# ---------------------------------------------------------------- report


@dataclass
class ParetoReport:
    ranges: list  # [chi_min, chi_max] per observable
    targets: list | None
    feasible: bool | None
    residual: float | None
    weights: list | None
    permutation: list | None
    max_class_dimensions: list
    weighted_max_dimension: int | None
    intersections: dict

    def to_json(self, **kw) -> str:
        return json.dumps(asdict(self), **kw)


def pareto_report(rho0, observables, targets=None, requested=None, seed=0) -> ParetoReport:
    """Ranges, optional target feasibility, optional weight design and dimension bounds."""
    mats = [as_matrix(o) for o in observables]
    ranges = [list(matching_extrema(rho0, m)) for m in mats]
    feasible = residual = None
    if targets is not None:
        for k, (lo, hi) in enumerate(ranges):
            if not lo - 1e-9 <= targets[k] <= hi + 1e-9:
                raise ValueError(f"target {k} outside [{lo}, {hi}]")
        res = feasible_target_solver(rho0, mats, targets, seed=seed)
        feasible, residual = res.found, res.residual
    n = mats[0].shape[0]
    dims, inter = [], {}
    weights = perm = wdim = None
    if n <= MAX_PARTITION_DIM:
        dims = [partition_permutations(rho0, m).dimension(0) for m in mats]
        if requested is not None and n <= MAX_WEIGHT_DIM:
            sol = weight_solver(rho0, mats, requested)
            weights, perm = sol.weights.tolist(), list(sol.permutation)
            theta_m = weighted_observable(mats, sol.weights)
            wdim = partition_permutations(rho0, theta_m).dimension(0)
            for k, m in enumerate(mats):
                b = intersection_bounds(m, theta_m, rho0, 0, 0)
                inter[str(k)] = {"lower": b.lower, "upper": b.upper}
    return ParetoReport(ranges, None if targets is None else list(map(float, targets)), feasible, residual,
                        weights, perm, dims, wdim, inter)
