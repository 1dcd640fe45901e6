"""Weighted non-negative least squares, tolerance LPs and controlled rounding.

The least-squares estimator is a convex QP solved by an interior-point conic
solver and checked against its KKT conditions. The rounder chooses binary
increments over the floor of the real solution; its LP relaxation is tried
first (integral whenever the system is totally unimodular) and a
branch-and-bound MILP is used otherwise.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import clarabel
import numpy as np
from scipy import optimize, sparse

from .constraints import ConstraintSet, violations

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
SNAP_TOL = 1e-9


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


class NoConvergenceError(SolverError):
    pass


@dataclass(frozen=True)
class PriorBlock:
    """A previous pass's stacked queries ``B`` and the values ``B x~`` they must stay near."""

    matrix: sparse.csr_matrix
    values: np.ndarray


@dataclass
class LeastSquaresProblem:
    Q: sparse.csr_matrix
    weights: np.ndarray
    targets: np.ndarray
    constraints: ConstraintSet
    prior: Sequence[PriorBlock] = ()
    tau: float = 0.0

    def __post_init__(self):
        self.Q = sparse.csr_matrix(self.Q, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        m, n = self.Q.shape
        if self.weights.shape != (m,) or self.targets.shape != (m,):
            raise ValueError("weights and targets must match the number of query rows")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if self.constraints.n != n:
            raise ValueError("constraint system and query matrix disagree on the variable count")

    @property
    def n(self) -> int:
        return self.Q.shape[1]

    def objective(self, x) -> float:
        r = self.Q @ np.asarray(x, dtype=float) - self.targets
        return float(r @ (self.weights * r))


@dataclass(frozen=True)
class RealSolution:
    x: np.ndarray
    objective: float
    status: str
    iterations: int
    residuals: dict = field(default_factory=dict)


@dataclass(frozen=True)
class IntegerSolution:
    x: np.ndarray
    y: np.ndarray
    objective: float


def _prior_rows(prior: Sequence[PriorBlock], tau: float, n: int):
    if not prior:
        return sparse.csr_matrix((0, n)), np.zeros(0)
    B = sparse.vstack([p.matrix for p in prior], format="csr")
    b = np.concatenate([np.asarray(p.values, dtype=float) for p in prior])
    return sparse.vstack([B, -B], format="csr"), np.concatenate([b + tau, -b + tau])


def _hard_feasible(cs: ConstraintSet) -> bool:
    res = optimize.linprog(
        np.zeros(cs.n), A_ub=cs.ub_matrix if cs.n_ub else None, b_ub=cs.ub_rhs if cs.n_ub else None,
        A_eq=cs.eq_matrix if cs.n_eq else None, b_eq=cs.eq_rhs if cs.n_eq else None,
        bounds=(0, None), method="highs",
    )
    return res.status == 0


def nnls_solve(p: LeastSquaresProblem, max_iter: int = 500) -> RealSolution:
    """Minimize (Qx - m)' W (Qx - m) over x >= 0 subject to the constraint system."""
    n = p.n
    cs = p.constraints
    Pu, pb = _prior_rows(p.prior, p.tau, n)
    W = sparse.diags(p.weights)
    P = (p.Q.T @ W @ p.Q).tocsc()
    q = -(p.Q.T @ (p.weights * p.targets))

    if cs.n_eq == 0 and cs.n_ub == 0 and Pu.shape[0] == 0:
        diag = P.diagonal()
        if sparse.triu(P, 1).nnz == 0 and np.all(diag > 0):
            x = np.maximum(0.0, -q / diag)
            return RealSolution(x, p.objective(x), "closed-form", 0, {"primal": 0.0, "stationarity": 0.0})

    A = sparse.vstack([cs.eq_matrix, cs.ub_matrix, Pu, -sparse.identity(n)], format="csc")
    b = np.concatenate([cs.eq_rhs, cs.ub_rhs, pb, np.zeros(n)])
    n_ineq = cs.n_ub + Pu.shape[0] + n
    cones = []
    if cs.n_eq:
        cones.append(clarabel.ZeroConeT(cs.n_eq))
    cones.append(clarabel.NonnegativeConeT(n_ineq))

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    solver = clarabel.DefaultSolver(sparse.triu(P, format="csc"), q, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if "Infeasible" in status:
        if not _hard_feasible(cs):
            raise InfeasibleError("invariant/aggregation constraints admit no non-negative solution")
        raise InfeasibleError("prior-pass tolerance block is inconsistent with the hard constraints")
    if status not in ("Solved", "AlmostSolved"):
        raise NoConvergenceError(f"QP solver stopped with status {status} after {sol.iterations} iterations")

    x = np.asarray(sol.x, dtype=float)
    z = np.asarray(sol.z, dtype=float)
    # clean interior-point fuzz: tiny negatives are the bound itself
    x[(x < 0) & (x > -FEAS_TOL)] = 0.0
    grad = P @ x + q
    stat = grad + A.T @ z
    scale = max(1.0, float(np.abs(grad).max(initial=0.0)), float(np.abs(q).max(initial=0.0)))
    primal = float(np.abs(A @ x - b)[: cs.n_eq].max(initial=0.0))
    excess = A @ x - b
    primal = max(primal, float(excess[cs.n_eq:].max(initial=0.0)))
    residuals = {"primal": primal, "stationarity": float(np.abs(stat).max(initial=0.0)) / scale}
    if residuals["primal"] > FEAS_TOL or residuals["stationarity"] > FEAS_TOL:
        raise NoConvergenceError(f"KKT residuals too large: {residuals}")
    return RealSolution(x, p.objective(x), status, int(sol.iterations), residuals)


def solve_tolerance(constraints: ConstraintSet, blocks: Sequence[PriorBlock]) -> float:
    """Smallest tau such that some feasible x meets every block within tau (infinity norm)."""
    if not blocks:
        return 0.0
    cs = constraints
    n = cs.n
    B = sparse.vstack([blk.matrix for blk in blocks], format="csr")
    b = np.concatenate([np.asarray(blk.values, dtype=float) for blk in blocks])
    m = B.shape[0]
    tau_col = sparse.csr_matrix(-np.ones((m, 1)))
    A_ub = sparse.vstack([
        sparse.hstack([B, tau_col]),
        sparse.hstack([-B, tau_col]),
        sparse.hstack([cs.ub_matrix, sparse.csr_matrix((cs.n_ub, 1))]),
    ], format="csr")
    b_ub = np.concatenate([b, -b, cs.ub_rhs])
    A_eq = sparse.hstack([cs.eq_matrix, sparse.csr_matrix((cs.n_eq, 1))], format="csr") if cs.n_eq else None
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=cs.eq_rhs if cs.n_eq else None,
                           bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverError(f"tolerance LP failed: {res.message}")
    return max(0.0, float(res.x[-1]))


# controlled rounding -------------------------------------------------------------


def snap(x_tilde) -> np.ndarray:
    x = np.asarray(x_tilde, dtype=float).copy()
    near = np.abs(x - np.round(x)) <= SNAP_TOL
    x[near] = np.round(x[near])
    return np.maximum(x, 0.0)


@dataclass
class _RoundingModel:
    floor: np.ndarray
    frac: np.ndarray
    free: np.ndarray  # indices of cells that may be incremented
    c: np.ndarray  # objective over [y_free, t]
    const: float
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    eq_labels: tuple
    ub_labels: tuple
    n_t: int

    @property
    def n_vars(self) -> int:
        return self.free.size + self.n_t


def _objective_rows(objective: sparse.spmatrix, n: int) -> dict[tuple[int, ...], int]:
    """Distinct objective row supports with their multiplicities."""
    m = sparse.csr_matrix(objective)
    if m.shape[1] != n:
        raise ValueError("objective query matrix has the wrong width")
    rows: dict[tuple[int, ...], int] = {}
    for r in range(m.shape[0]):
        cols = m.indices[m.indptr[r]:m.indptr[r + 1]]
        vals = m.data[m.indptr[r]:m.indptr[r + 1]]
        key = tuple(sorted(int(c) for c, v in zip(cols, vals) if v != 0))
        if key:
            rows[key] = rows.get(key, 0) + 1
    return rows


def _build_rounding(x_tilde, cs: ConstraintSet, objective, prior_eq) -> _RoundingModel:
    x = snap(x_tilde)
    n = x.size
    floor = np.floor(x)
    frac = x - floor
    free = np.flatnonzero(frac > 0)
    pos = {int(i): k for k, i in enumerate(free)}
    nf = free.size

    lin = np.zeros(nf)
    const = 0.0
    t_rows: list[tuple[list[int], float, int]] = []
    for cols, mult in _objective_rows(objective, n).items():
        F = float(frac[list(cols)].sum())
        vs = [pos[c] for c in cols if c in pos]
        if not vs:
            const += mult * abs(F)
        elif len(vs) == 1 and len(cols) == 1:
            # |f - y| = f + (1 - 2f) y for y in {0, 1}
            const += mult * F
            lin[vs[0]] += mult * (1 - 2 * F)
        else:
            t_rows.append((vs, F, mult))

    n_t = len(t_rows)
    c = np.concatenate([lin, np.array([m for _, _, m in t_rows], dtype=float)])
    rows, cols_, data, rhs = [], [], [], []
    for k, (vs, F, _) in enumerate(t_rows):
        # t_k >= F - sum y  and  t_k >= sum y - F
        for sign in (1, -1):
            r = len(rhs)
            for v in vs:
                rows.append(r); cols_.append(v); data.append(-1.0 * sign)
            rows.append(r); cols_.append(nf + k); data.append(-1.0)
            rhs.append(-F * sign)
    A_t = sparse.csr_matrix((data, (rows, cols_)), shape=(len(rhs), nf + n_t))

    def restrict(M, b):
        M = sparse.csr_matrix(M)
        rhs_ = np.asarray(b, dtype=float) - M @ floor
        sub = M[:, free] if nf else sparse.csr_matrix((M.shape[0], 0))
        return sparse.hstack([sub, sparse.csr_matrix((M.shape[0], n_t))], format="csr"), rhs_

    A_u, b_u = restrict(cs.ub_matrix, cs.ub_rhs)
    eq_blocks = [restrict(cs.eq_matrix, cs.eq_rhs)]
    eq_labels = list(cs.eq_labels)
    for j, (M, vals) in enumerate(prior_eq):
        eq_blocks.append(restrict(M, vals))
        eq_labels += [f"prior pass {j + 1} row {r}" for r in range(M.shape[0])]
    A_eq = sparse.vstack([b_[0] for b_ in eq_blocks], format="csr")
    b_eq = np.concatenate([b_[1] for b_ in eq_blocks])
    return _RoundingModel(
        floor, frac, free, c, const,
        sparse.vstack([A_t, A_u], format="csr"), np.concatenate([np.array(rhs), b_u]),
        A_eq, b_eq, tuple(eq_labels), tuple(cs.ub_labels), n_t,
    )


def _unreachable_row(model: _RoundingModel) -> str:
    nf = model.free.size
    for M, b, labels, kind in ((model.A_eq, model.b_eq, model.eq_labels, "eq"),
                               (model.A_ub[2 * model.n_t:], model.b_ub[2 * model.n_t:], model.ub_labels, "ub")):
        M = sparse.csr_matrix(M)[:, :nf]
        lo = np.asarray(M.minimum(0).sum(axis=1)).ravel()
        hi = np.asarray(M.maximum(0).sum(axis=1)).ravel()
        for r in range(M.shape[0]):
            if (kind == "eq" and not lo[r] - 1e-9 <= b[r] <= hi[r] + 1e-9) or (kind == "ub" and lo[r] > b[r] + 1e-9):
                return labels[r]
    return "combination of constraints (no single row is unreachable)"


def _solve_binary(model: _RoundingModel, c: np.ndarray):
    nf = model.free.size
    ub = np.concatenate([np.ones(nf), np.full(model.n_t, np.inf)])
    lb = np.zeros(nf + model.n_t)
    kw = dict(A_ub=model.A_ub if model.A_ub.shape[0] else None, b_ub=model.b_ub if model.A_ub.shape[0] else None,
              A_eq=model.A_eq if model.A_eq.shape[0] else None, b_eq=model.b_eq if model.A_eq.shape[0] else None)
    lp = optimize.linprog(c, bounds=list(zip(lb, ub)), method="highs-ds", **kw)
    if lp.status == 2:
        return None
    if lp.status == 0:
        y = lp.x[:nf]
        if np.all(np.abs(y - np.round(y)) <= 1e-9):
            return np.round(y)
    constraints = []
    if model.A_ub.shape[0]:
        constraints.append(optimize.LinearConstraint(model.A_ub, -np.inf, model.b_ub))
    if model.A_eq.shape[0]:
        constraints.append(optimize.LinearConstraint(model.A_eq, model.b_eq, model.b_eq))
    integrality = np.concatenate([np.ones(nf), np.zeros(model.n_t)])
    res = optimize.milp(c, constraints=constraints, integrality=integrality,
                        bounds=optimize.Bounds(lb, ub), options={"mip_rel_gap": 0.0})
    if res.status == 2 or res.x is None:
        if res.status in (2, 3) or res.x is None:
            return None
    return np.round(res.x[:nf])


def _true_objective(frac: np.ndarray, free: np.ndarray, y_free: np.ndarray, objective) -> float:
    y = np.zeros(frac.size)
    y[free] = y_free
    return float(np.abs(sparse.csr_matrix(objective) @ (frac - y)).sum())


def round_solve(x_tilde, cs: ConstraintSet, objective, prior_eq: Sequence[tuple] = ()) -> IntegerSolution:
    """Integer x^ = floor(x~) + y, y binary, closest to x~ in the L1 norm of ``objective`` queries.

    ``prior_eq`` holds ``(M, values)`` pairs that must hold exactly (earlier rounder
    passes). Among optimal y, increments on lower-indexed cells are preferred.
    """
    objective = sparse.csr_matrix(objective)
    model = _build_rounding(x_tilde, cs, objective, prior_eq)
    nf = model.free.size
    if model.n_vars == 0:
        y_free = np.zeros(0)
        if violations(model.floor, cs, 1e-9) or any(
                np.any(np.abs(sparse.csr_matrix(M) @ model.floor - np.asarray(v, float)) > 1e-9) for M, v in prior_eq):
            raise InfeasibleError(f"rounding infeasible; unreachable row: {_unreachable_row(model)}")
        return IntegerSolution(model.floor.astype(np.int64), np.zeros(model.floor.size, np.int64),
                               _true_objective(model.frac, model.free, y_free, objective))
    y_free = _solve_binary(model, model.c)
    if y_free is None:
        raise InfeasibleError(f"rounding infeasible; unreachable row: {_unreachable_row(model)}")
    best = _true_objective(model.frac, model.free, y_free, objective)
    if nf > 1:
        # must sit above the LP dual tolerance or the simplex ignores it
        bias = np.concatenate([-1e-6 * (nf - np.arange(nf)) / nf, np.zeros(model.n_t)])
        alt = _solve_binary(model, model.c + bias)
        if alt is not None:
            val = _true_objective(model.frac, model.free, alt, objective)
            if val <= best + 1e-9:
                y_free, best = alt, val
    y = np.zeros(model.floor.size)
    y[model.free] = y_free
    x_hat = (model.floor + y).astype(np.int64)
    bad = violations(x_hat, cs, 1e-9)
    for M, vals in prior_eq:
        r = sparse.csr_matrix(M) @ x_hat - np.asarray(vals, dtype=float)
        if np.any(np.abs(r) > 1e-9):
            bad.append("prior-pass equality")
    if bad:
        raise SolverError(f"rounded solution violates {bad[0]}")
    return IntegerSolution(x_hat, y.astype(np.int64), best)


def milp_oracle(x_tilde, cs: ConstraintSet, objective, prior_eq: Sequence[tuple] = (), max_vars: int = 16):
    """Exhaustive search over all binary increments.

    Returns ``(objective value, list of optimal y vectors)`` or ``(None, [])`` if
    no increment vector is feasible.
    """
    x = snap(x_tilde)
    floor = np.floor(x)
    frac = x - floor
    free = np.flatnonzero(frac > 0)
    if free.size > max_vars:
        raise ValueError(f"oracle limited to {max_vars} fractional cells, got {free.size}")
    objective = sparse.csr_matrix(objective)
    Y = np.array(list(itertools.product((0, 1), repeat=free.size)), dtype=float).reshape(2 ** free.size, free.size)
    full = np.zeros((Y.shape[0], x.size))
    full[:, free] = Y
    X = floor + full
    ok = np.ones(Y.shape[0], dtype=bool)
    if cs.n_eq:
        ok &= np.all(np.abs(cs.eq_matrix @ X.T - cs.eq_rhs[:, None]) <= 1e-9, axis=0)
    if cs.n_ub:
        ok &= np.all(cs.ub_matrix @ X.T <= cs.ub_rhs[:, None] + 1e-9, axis=0)
    for M, vals in prior_eq:
        ok &= np.all(np.abs(sparse.csr_matrix(M) @ X.T - np.asarray(vals, float)[:, None]) <= 1e-9, axis=0)
    if not ok.any():
        return None, []
    obj = np.abs(objective @ (frac[None, :] - full).T).sum(axis=0)
    obj[~ok] = np.inf
    best = float(obj.min())
    winners = [full[i].astype(np.int64) for i in np.flatnonzero(obj <= best + 1e-9)]
    return best, winners
