"""Independent reference computations used by the tests.

None of these import the solver; they work directly on the discrete model
of a 1D cell: ``n`` free cells with per-cell gradients ``G_i`` and ``n + 1``
facet jumps ``J_k`` (two of them against the fixed outer data), energy
``sum W(G_i) h + sum psi(J_k)``.  The jumps and gradients are tied by
``sum J_k = a_R - a_L - h sum G_i``.
"""
import itertools
from functools import lru_cache

import numpy as np

GRADIENT_SET = np.arange(-2, 3, dtype=float)  # quantized gradients
JUMP_STEP = 0.25  # quantized jumps: multiples of 1/4 in [-4, 4]
JUMP_SET = tuple(np.arange(-16, 17) * JUMP_STEP)


def min_jump_cost(total, n_facets, psi, jump_set=JUMP_SET):
    """Exhaustive minimum of ``sum psi(J_k)`` over ``J_k`` in ``jump_set``
    with ``sum J_k = total``, by dynamic programming over partial sums."""
    target = round(total / JUMP_STEP)
    if abs(total / JUMP_STEP - target) > 1e-9:
        return np.inf
    return _jump_table(n_facets, psi, tuple(jump_set)).get(int(target), np.inf)


@lru_cache(maxsize=None)
def _jump_table(n_facets, psi, jump_set):
    steps = [int(round(j / JUMP_STEP)) for j in jump_set]
    costs = [float(psi(j)) for j in jump_set]
    best = {0: 0.0}
    for _ in range(n_facets):
        nxt = {}
        for s, c in best.items():
            for k, cost in zip(steps, costs):
                if c + cost < nxt.get(s + k, np.inf):
                    nxt[s + k] = c + cost
        best = nxt
    return best


@lru_cache(maxsize=None)
def _gradient_tuples(n):
    return np.array(list(itertools.product(GRADIENT_SET, repeat=n)))


def _enumerate(n, mean, W, jump_cost):
    G = _gradient_tuples(n)
    G = G[np.abs(G.sum(axis=1) - n * mean) < 1e-9]
    bulk = np.vectorize(W)(G).sum(axis=1) / n
    sums = G.sum(axis=1)
    best = np.inf
    for total in np.unique(sums):
        best = min(best, bulk[sums == total].min() + jump_cost(total / n))
    return best


def brute_force_bulk(A, B, W, psi, n=8):
    """Minimum over all quantized gradients with mean ``B`` and all quantized
    jump placements on the unit cell with outer data ``A x``."""
    return _enumerate(n, B, W, lambda gsum: min_jump_cost(A - gsum, n + 1, psi))


def brute_force_surface(lam, psi, n=8, W_rec=None):
    """Surface cell: outer data 0 left, ``lam`` right.  Without ``W_rec`` the
    gradients vanish; with it, gradients are quantized with zero mean and
    cost ``W_rec`` per unit volume."""
    if W_rec is None:
        return min_jump_cost(lam, n + 1, psi)
    return _enumerate(n, 0.0, W_rec, lambda gsum: min_jump_cost(lam - gsum, n + 1, psi))


def square(g):
    return g * g


def scaled_abs(j):
    return 2.0 * abs(j)


# frozen brute-force table for W = xi^2, psi = |lambda|, n = 8
FROZEN_BULK = {(A, B): float(B * B + abs(A - B)) for A in range(-2, 3) for B in range(-2, 3)}
