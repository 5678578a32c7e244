"""Independent references for the critical-manifold combinatorics.

Dimensions come from the rank of the tangent map of a double coset, computed
directly from commutant generators, not from contingency-table formulas.
"""

import itertools

import numpy as np


def _skew_generators(labels):
    """Real basis of the skew-Hermitian matrices that are block diagonal for ``labels``."""
    n = len(labels)
    gens = []
    for a in range(n):
        for b in range(a, n):
            if labels[a] != labels[b]:
                continue
            e = np.zeros((n, n), complex)
            if a == b:
                e[a, a] = 1j
                gens.append(e)
            else:
                e[a, b], e[b, a] = 1, -1
                gens.append(e.copy())
                e[a, b], e[b, a] = 1j, 1j
                gens.append(e)
    return gens


def orbit_dimension(rho_labels, theta_labels, perm):
    """Rank of (A, B) -> A P + P B, the tangent space of the double coset through P.

    P sends position j to position perm[j]; A commutes with Theta, B with rho0.
    """
    n = len(perm)
    p = np.zeros((n, n))
    p[list(perm), range(n)] = 1
    vecs = [(a @ p).ravel() for a in _skew_generators(theta_labels)]
    vecs += [(p @ b).ravel() for b in _skew_generators(rho_labels)]
    mat = np.array([np.concatenate([v.real, v.imag]) for v in vecs])
    return int(np.linalg.matrix_rank(mat, tol=1e-9))


def block_content(rho_vals, theta_labels, perm):
    """For each Theta block, the sorted rho eigenvalues the permutation places there."""
    out = {}
    for j, target in enumerate(perm):
        out.setdefault(theta_labels[target], []).append(round(rho_vals[j], 12))
    return tuple(sorted((k, tuple(sorted(v))) for k, v in out.items()))


def patterns(n):
    """All ascending multiplicity patterns (compositions) of n."""
    out = []
    for cuts in itertools.product([0, 1], repeat=n - 1):
        sizes, run = [], 1
        for c in cuts:
            if c:
                sizes.append(run)
                run = 1
            else:
                run += 1
        sizes.append(run)
        out.append(tuple(sizes))
    return out


def spectrum(mult, scale=1.0, offset=0.0):
    return np.repeat(offset + scale * np.arange(1, len(mult) + 1, dtype=float), mult)


def rho_from(mult):
    v = spectrum(mult)
    return np.diag(v / v.sum())


def labels_of(vals):
    _, inv = np.unique(np.round(vals, 12), return_inverse=True)
    return inv


def label_vectors(n):
    """Every way to assign ascending-block labels to positions, all patterns."""
    out = set()
    for pat in patterns(n):
        base = np.repeat(np.arange(len(pat)), pat)
        for perm in itertools.permutations(range(n)):
            out.add(tuple(base[list(perm)]))
    return sorted(out)


def sorted_perm(labels, perm):
    """Re-express a position permutation in the ascending eigenbasis of a diagonal observable."""
    order = np.argsort(np.asarray(labels), kind="stable")
    where = np.empty_like(order)
    where[order] = np.arange(len(order))
    return tuple(int(where[t]) for t in perm)
