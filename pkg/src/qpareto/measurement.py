"""Simulated measurements: mutually unbiased bases, finite-shot statistics and
maximum-likelihood state estimation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from scipy.stats import chi2

from . import io
from .core import DensityMatrix, as_matrix


class IncompleteMeasurementWarning(UserWarning):
    """The measured operators do not span the Hermitian matrices."""


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    return all(n % p for p in range(2, int(n ** 0.5) + 1))


# ---------------------------------------------------------------- MUB


@dataclass(frozen=True)
class MubFamily:
    """N + 1 mutually unbiased bases; ``bases[r]`` holds basis vectors as columns."""

    dim: int
    bases: tuple

    def __post_init__(self):
        n = self.dim
        if len(self.bases) != n + 1:
            raise ValueError("a complete family has N + 1 bases")
        eye = np.eye(n)
        for r, v in enumerate(self.bases):
            if np.max(np.abs(v.conj().T @ v - eye)) > 1e-10:
                raise ValueError(f"basis {r} is not unitary")
        for r in range(n + 1):
            for q in range(r + 1, n + 1):
                ov = np.abs(self.bases[r].conj().T @ self.bases[q]) ** 2
                if np.max(np.abs(ov - 1.0 / n)) > 1e-9:
                    raise ValueError(f"bases {r} and {q} are not unbiased")


def build_mub(n: int) -> MubFamily:
    """V^(0) = I and, for 1 <= r <= N, basis vector p of V^(r) has components
    exp(2 pi i (r q^2 + p q) / N) / sqrt(N), q = 0..N-1.

    Vector p is stored as column p. Only odd primes N are supported.
    """
    n = int(n)
    if n % 2 == 0 or not _is_prime(n):
        raise ValueError(f"N = {n} is not an odd prime")
    q = np.arange(n)[:, None]
    p = np.arange(n)[None, :]
    bases = [np.eye(n, dtype=complex)]
    for r in range(1, n + 1):
        bases.append(np.exp(2j * np.pi * ((r * q * q + p * q) % n) / n) / np.sqrt(n))
    return MubFamily(n, tuple(bases))


def mub_observables(family: MubFamily, count=None) -> list:
    """Projectors V^(r)|i><i|V^(r)^dag for i = 1..N-1, in the order r(N-1) + i.

    ``i`` counts from one, so the last vector of every basis is left out (its
    projector is fixed by the others). ``count`` truncates the list.
    """
    n = family.dim
    out = []
    for v in family.bases:
        for i in range(n - 1):
            col = v[:, i]
            out.append(np.outer(col, col.conj()))
    return out if count is None else out[:count]


def mub_nondegenerate_observables(family: MubFamily, spectrum=None) -> list:
    """One nondegenerate observable V Sigma V^dag per basis, Sigma = diag(1..N) by default."""
    n = family.dim
    sig = np.arange(1, n + 1, dtype=float) if spectrum is None else np.asarray(spectrum, dtype=float)
    return [(v * sig) @ v.conj().T for v in family.bases]


# ---------------------------------------------------------------- shots


@dataclass(frozen=True)
class ShotRecord:
    basis_index: int | None
    shots: int
    counts: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if np.any(c < 0) or int(c.sum()) != self.shots:
            raise ValueError("counts must be nonnegative and sum to the number of shots")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.shots


def outcome_probabilities(rho, basis) -> np.ndarray:
    """p_i = <v_i| rho |v_i>, with the last one taken as 1 - sum of the others."""
    v = np.asarray(basis, dtype=complex)
    p = np.einsum("ai,ab,bi->i", v.conj(), as_matrix(rho), v).real
    if np.any(p < -1e-10) or np.any(p > 1 + 1e-10):
        raise ValueError("outcome probabilities outside [0, 1]")
    p = np.clip(p, 0.0, 1.0)
    p[-1] = max(0.0, 1.0 - p[:-1].sum())
    return p / p.sum()


def simulate_measurement(rho, basis, shots, seed, basis_index=None) -> ShotRecord:
    if shots < 1:
        raise ValueError("need at least one shot")
    p = outcome_probabilities(rho, basis)
    counts = np.random.default_rng(seed).multinomial(shots, p)
    return ShotRecord(basis_index, int(shots), counts, seed)


def simulate_mub_records(rho, family: MubFamily, shots, seed) -> list[ShotRecord]:
    """One record per basis; basis r uses the seed sequence child r of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(family.bases))
    out = []
    for r, (v, ss) in enumerate(zip(family.bases, children)):
        p = outcome_probabilities(rho, v)
        counts = np.random.default_rng(ss).multinomial(shots, p)
        out.append(ShotRecord(r, int(shots), counts, seed))
    return out


def group_outcomes(record: ShotRecord, eigenvalues, rtol=1e-9):
    """Pool the outcomes of a degenerate observable by eigenvalue.

    Returns (distinct values, pooled counts, independent frequencies); the last
    array has s - 1 entries for s distinct eigenvalues, since the frequencies
    sum to one.
    """
    g = np.asarray(eigenvalues, dtype=float)
    if g.size != record.counts.size:
        raise ValueError("one eigenvalue per outcome is required")
    order = np.argsort(g, kind="stable")
    distinct = [g[order[0]]]
    labels = np.empty(g.size, dtype=int)
    labels[order[0]] = 0
    scale = max(1.0, np.max(np.abs(g)))
    for i in order[1:]:
        if g[i] - distinct[-1] > rtol * scale:
            distinct.append(g[i])
        labels[i] = len(distinct) - 1
    pooled = np.bincount(labels, weights=record.counts, minlength=len(distinct)).astype(np.int64)
    return np.array(distinct), pooled, pooled[:-1] / record.shots


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


def expectation_from_probabilities(p, coefficients, eigenvalues) -> float:
    """sum_i c_i p_i gamma_i."""
    return float(np.sum(np.asarray(coefficients) * np.asarray(p) * np.asarray(eigenvalues)))


def expectation_from_frequencies(record: ShotRecord, coefficients, eigenvalues, basis=None,
                                 expected_basis=None) -> Estimate:
    """Plug-in estimate of sum_i c_i p_i gamma_i with its multinomial standard error.

    When both ``basis`` (the record's measurement basis) and ``expected_basis``
    (the basis the expansion refers to) are given they must agree up to
    per-column phases.
    """
    if basis is not None and expected_basis is not None:
        ov = np.abs(np.asarray(expected_basis).conj().T @ np.asarray(basis))
        if np.max(np.abs(ov - np.eye(ov.shape[0]))) > 1e-8:
            raise ValueError("record was taken in a different basis than the observable expansion")
    w = np.asarray(coefficients, dtype=float) * np.asarray(eigenvalues, dtype=float)
    if w.shape != record.counts.shape:
        raise ValueError("need one coefficient and eigenvalue per outcome")
    f = record.frequencies
    mean = float(w @ f)
    var = float((w ** 2) @ f - mean ** 2) / record.shots
    return Estimate(mean, float(np.sqrt(max(var, 0.0))))


def chi_square_test(record: ShotRecord, p):
    """Pearson statistic over outcomes with p_i > 0 and its upper-tail p-value."""
    p = np.asarray(p, dtype=float)
    keep = p > 0
    exp = record.shots * p[keep]
    stat = float(np.sum((record.counts[keep] - exp) ** 2 / exp))
    dof = int(keep.sum()) - 1
    return stat, float(chi2.sf(stat, dof))


def write_records_csv(path, records):
    rows = [(rec.basis_index, i, int(c)) for rec in records for i, c in enumerate(rec.counts)]
    return io.write_csv(path, ["basis", "outcome", "count"], rows)


def read_records_csv(path) -> list[ShotRecord]:
    _, rows = io.read_csv(path)
    by_basis: dict[int, dict[int, int]] = {}
    for b, i, c in rows:
        by_basis.setdefault(int(b), {})[int(i)] = int(c)
    out = []
    for b in sorted(by_basis):
        d = by_basis[b]
        counts = np.array([d[i] for i in range(len(d))])
        out.append(ShotRecord(b, int(counts.sum()), counts))
    return out


# ---------------------------------------------------------------- MLE


@dataclass
class StateEstimate:
    rho_hat: DensityMatrix
    log_likelihood: float
    iterations: int
    fidelity_vs_truth: float | None = None
    history: list = field(default_factory=list, repr=False)
    rank_deficient: bool = False

    def to_dict(self):
        return {"rho_hat": io.matrix_to_json(self.rho_hat.matrix), "log_likelihood": self.log_likelihood,
                "iterations": self.iterations, "fidelity_vs_truth": self.fidelity_vs_truth,
                "rank_deficient": self.rank_deficient}


def fidelity(rho, sigma) -> float:
    """Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2."""
    a = as_matrix(rho)
    b = as_matrix(sigma)
    w, v = np.linalg.eigh(a)
    sa = (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T
    inner = sa @ b @ sa
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    return float(np.sum(np.sqrt(np.clip(ev, 0, None))) ** 2)


def _tri_index(n):
    rows, cols = np.tril_indices(n)
    off = rows != cols
    return rows, cols, off


def _unpack(x, n, rows, cols, off):
    t = np.zeros((n, n), dtype=complex)
    k = rows.size
    t[rows, cols] = x[:k]
    t[rows[off], cols[off]] += 1j * x[k:]
    return t


def _pack(t, rows, cols, off):
    return np.concatenate([t[rows, cols].real, t[rows[off], cols[off]].imag])


def _spans_hermitian(projectors, n) -> bool:
    vecs = np.array([np.concatenate([p.real.ravel(), p.imag.ravel()]) for p in projectors])
    return np.linalg.matrix_rank(vecs, tol=1e-8) >= n * n


def mle_from_frequencies(projectors, counts, truth=None, seed=0, max_iter=5000, tol=1e-12) -> StateEstimate:
    """Maximize L(T) = sum_i n_i ln Tr(T^dag T F_i) - n Tr(T^dag T), T lower triangular.

    ``projectors`` are the POVM elements F_i, ``counts`` the matching n_i
    (floats are allowed, e.g. exact probabilities times a nominal shot count).
    The multiplier equal to the total count makes the stationary point trace
    one; the result is renormalized anyway to absorb solver tolerance. The
    optimizer is L-BFGS, whose line search never accepts a worse objective, and
    the likelihood after every iteration is kept in ``history``.
    """
    f = np.array([as_matrix(p) for p in projectors])
    nvec = np.asarray(counts, dtype=float)
    n = f.shape[1]
    total = nvec.sum()
    if total <= 0:
        raise ValueError("no counts")
    deficient = not _spans_hermitian(f, n)
    if deficient:
        warnings.warn("measurement set is not informationally complete", IncompleteMeasurementWarning,
                      stacklevel=2)
    rows, cols, off = _tri_index(n)
    rng = np.random.default_rng(seed)
    t0 = np.eye(n) / np.sqrt(n) + 0.01 * np.tril(rng.normal(size=(n, n)))
    x0 = _pack(t0.astype(complex), rows, cols, off)

    def negll(x):
        t = _unpack(x, n, rows, cols, off)
        rho = t.conj().T @ t
        p = np.einsum("ab,iba->i", rho, f).real
        p = np.maximum(p, 1e-300)
        ll = float(nvec @ np.log(p) - total * np.trace(rho).real)
        r = np.einsum("i,iab->ab", nvec / p, f) - total * np.eye(n)
        # dL = 2 Re Tr(R T^dag dT)
        g = (r @ t.conj().T).T
        grad = np.concatenate([2 * g[rows, cols].real, -2 * g[rows[off], cols[off]].imag])
        return -ll, -grad

    history = [-negll(x0)[0]]
    sol = scipy.optimize.minimize(negll, x0, jac=True, method="L-BFGS-B",
                                  callback=lambda xk: history.append(-negll(xk)[0]),
                                  options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10, "maxcor": 30})
    t = _unpack(sol.x, n, rows, cols, off)
    rho = t.conj().T @ t
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    est = DensityMatrix.from_matrix(rho)
    fid = None if truth is None else fidelity(truth, est.matrix)
    return StateEstimate(est, float(-sol.fun), int(sol.nit), fid, history, deficient)


def mub_projectors(family: MubFamily, bases=None) -> list:
    idx = range(len(family.bases)) if bases is None else bases
    return [np.outer(family.bases[r][:, i], family.bases[r][:, i].conj()) for r in idx for i in range(family.dim)]


def mle_estimate(records, family: MubFamily, truth=None, seed=0, **kw) -> StateEstimate:
    """MLE from shot records taken in the bases of ``family``."""
    projs, counts = [], []
    for rec in records:
        v = family.bases[rec.basis_index]
        for i, c in enumerate(rec.counts):
            projs.append(np.outer(v[:, i], v[:, i].conj()))
            counts.append(c)
    total = sum(rec.shots for rec in records)
    if total < family.dim ** 2:
        raise ValueError("need at least N^2 shots in total")
    return mle_from_frequencies(projs, counts, truth=truth, seed=seed, **kw)


def exact_mub_counts(rho, family: MubFamily, shots=1.0) -> list:
    """Expected counts per basis outcome (infinite-shot data scaled to ``shots``)."""
    return [shots * outcome_probabilities(rho, v) for v in family.bases]
