"""Dense two-phase simplex for small linear programs.

Solves  min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0
with Bland's rule, which cannot cycle. Intended for the few-variable,
few-hundred-constraint problems produced by weight design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-10


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float | None


def _pivot(tab, row, col):
    tab[row] /= tab[row, col]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] -= tab[r, col] * tab[row]


def _run(tab, basis, n_cols, max_iter=50_000):
    """Minimize the objective in the last row of ``tab`` over columns < n_cols."""
    for _ in range(max_iter):
        cost = tab[-1, :n_cols]
        entering = next((j for j in range(n_cols) if cost[j] < -EPS), None)
        if entering is None:
            return "optimal"
        col = tab[:-1, entering]
        rhs = tab[:-1, -1]
        best = None
        for i in np.flatnonzero(col > EPS):
            ratio = rhs[i] / col[i]
            if best is None or ratio < best[0] - EPS or (abs(ratio - best[0]) <= EPS and basis[i] < basis[best[1]]):
                best = (ratio, i)
        if best is None:
            return "unbounded"
        _pivot(tab, best[1], entering)
        basis[best[1]] = entering
    raise RuntimeError("simplex iteration limit reached")


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None) -> LPResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # columns: x (n) | slacks (m_ub) | artificials (m) | rhs
    rows = np.zeros((m, n + m_ub))
    rhs = np.concatenate([b_ub, b_eq])
    rows[:m_ub, :n] = A_ub
    rows[:m_ub, n:] = np.eye(m_ub)
    rows[m_ub:, :n] = A_eq
    neg = rhs < 0
    rows[neg] *= -1
    rhs = np.abs(rhs)

    n_struct = n + m_ub
    tab = np.zeros((m + 1, n_struct + m + 1))
    tab[:m, :n_struct] = rows
    tab[:m, n_struct:n_struct + m] = np.eye(m)
    tab[:m, -1] = rhs
    basis = list(range(n_struct, n_struct + m))
    # a nonnegated inequality row can start from its slack instead of an artificial
    for i in range(m_ub):
        if not neg[i]:
            basis[i] = n + i
            tab[i, n_struct + i] = 0.0

    # phase 1: minimize the sum of artificials still in the basis
    art_rows = [i for i in range(m) if basis[i] >= n_struct]
    tab[-1, :] = 0.0
    for i in art_rows:
        tab[-1, :] -= tab[i, :]
        tab[-1, basis[i]] = 0.0
    # artificial columns never re-enter once they leave
    for i in range(m):
        if i not in art_rows:
            tab[:, n_struct + i] = 0.0
    _run(tab, basis, n_struct + m)
    if -tab[-1, -1] > 1e-8 * max(1.0, np.max(rhs, initial=0.0)):
        return LPResult("infeasible", None, None)

    # drive remaining zero-level artificials out of the basis
    for i in range(m):
        if basis[i] >= n_struct:
            nz = np.flatnonzero(np.abs(tab[i, :n_struct]) > EPS)
            if nz.size:
                _pivot(tab, i, nz[0])
                basis[i] = nz[0]
    keep = [i for i in range(m) if basis[i] < n_struct]
    tab2 = np.zeros((len(keep) + 1, n_struct + 1))
    tab2[:-1, :n_struct] = tab[keep, :n_struct]
    tab2[:-1, -1] = tab[keep, -1]
    basis2 = [basis[i] for i in keep]
    tab2[-1, :n] = c
    for r, b in enumerate(basis2):
        if tab2[-1, b] != 0.0:
            tab2[-1] -= tab2[-1, b] * tab2[r]

    status = _run(tab2, basis2, n_struct)
    if status == "unbounded":
        return LPResult("unbounded", None, None)
    x = np.zeros(n_struct)
    for r, b in enumerate(basis2):
        x[b] = tab2[r, -1]
    return LPResult("optimal", x[:n], float(c @ x[:n]))
