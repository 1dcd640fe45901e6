"""Random fixtures for the rounding and least-squares tests."""

import numpy as np
from scipy import optimize, sparse

from topdown.constraints import ConstraintSet


def rounding_fixture(rng: np.random.Generator, max_binaries: int = 12):
    """Children-of-a-parent rounding problem with TUM structure.

    Returns ``(x_tilde, constraints, objective)``: stacked child cells whose
    per-cell sums are integers (aggregation equalities), per-child totals bounded
    by the floor/ceil of their real totals, and an objective made of the detailed
    cells plus one total row per child.
    """
    while True:
        k = int(rng.integers(1, 4))
        c = int(rng.integers(1, 5))
        n = k * c
        x = rng.uniform(0, 4, size=(k, c))
        # make every column sum an integer by adjusting the last child upwards
        for j in range(c):
            s = x[:, j].sum()
            x[-1, j] += np.ceil(s) - s
        # integral entries exercise the "no increment" path
        ints = rng.random((k, c)) < 0.25
        for j in range(c):
            if ints[:-1, j].any():
                x[:-1, j][ints[:-1, j]] = np.round(x[:-1, j][ints[:-1, j]])
                s = x[:, j].sum()
                x[-1, j] += np.ceil(s) - s
        xt = x.reshape(-1)
        frac_count = int(np.sum(np.abs(xt - np.round(xt)) > 1e-9))
        if frac_count > max_binaries:
            continue
        agg = sparse.hstack([sparse.identity(c)] * k, format="csr")
        parent = np.round(x.sum(axis=0))
        child_rows = sparse.kron(sparse.identity(k), np.ones((1, c)), format="csr")
        tot = x.sum(axis=1)
        kind = rng.integers(0, 3)
        if kind == 0:
            ub, rhs = child_rows, np.ceil(tot - 1e-12)
        elif kind == 1:
            ub, rhs = -child_rows, -np.floor(tot + 1e-12)
        else:
            ub, rhs = sparse.csr_matrix((0, n)), np.zeros(0)
        cs = ConstraintSet(n, agg, parent, ub, rhs)
        objective = sparse.vstack([sparse.identity(n), child_rows], format="csr")
        return xt, cs, objective


def infeasible_rounding_fixture():
    """One cell at 0.5 that must sum to 2: no binary increment reaches it."""
    cs = ConstraintSet(1, np.array([[1.0]]), np.array([2.0]), np.zeros((0, 1)), np.zeros(0))
    return np.array([0.5]), cs, sparse.identity(1, format="csr")


def random_feasible_points(cs: ConstraintSet, rng: np.random.Generator, count: int, anchor=None):
    """Feasible points: random convex combinations of LP vertices (plus an optional known point)."""
    vertices = [] if anchor is None else [np.asarray(anchor, float)]
    for _ in range(max(4, count // 10)):
        res = optimize.linprog(rng.normal(size=cs.n), A_ub=cs.ub_matrix if cs.n_ub else None,
                               b_ub=cs.ub_rhs if cs.n_ub else None,
                               A_eq=cs.eq_matrix if cs.n_eq else None, b_eq=cs.eq_rhs if cs.n_eq else None,
                               bounds=[(0, 50)] * cs.n, method="highs")
        if res.status == 0:
            vertices.append(res.x)
    V = np.array(vertices)
    pts = []
    for _ in range(count):
        w = rng.dirichlet(np.ones(len(V)))
        pts.append(w @ V)
    return pts
