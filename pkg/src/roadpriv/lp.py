"""Linear-program solvers behind a small common interface.

Problems are stated as ``min c @ x`` s.t. ``A_ub @ x <= b_ub``,
``A_eq @ x == b_eq``, ``x >= 0``.

``SimplexSolver`` is a dense two-phase tableau simplex with Bland's rule; it
is exact up to float round-off and never cycles, but its tableau grows with
(constraints x variables) so it is meant for small instances. ``HighsSolver``
delegates to the HiGHS dual simplex shipped with scipy and handles the
desk-scale sizes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import Infeasible, SolverTimeout


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    iterations: int
    solver: str


class LPSolver:
    name = "abstract"

    def solve(self, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None) -> LPResult:
        raise NotImplementedError


class HighsSolver(LPSolver):
    name = "highs"

    def __init__(self, tol: float = 1e-10, time_limit: float | None = None):
        self.tol = tol
        self.time_limit = time_limit

    def solve(self, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None) -> LPResult:
        from scipy.optimize import linprog

        options = {
            "primal_feasibility_tolerance": self.tol,
            "dual_feasibility_tolerance": self.tol,
        }
        if self.time_limit is not None:
            options["time_limit"] = self.time_limit
        res = linprog(
            c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
            bounds=(0, None), method="highs-ds", options=options,
        )
        if res.status == 1:
            raise SolverTimeout(res.message)
        if res.status != 0:
            raise Infeasible(res.message)
        return LPResult(np.asarray(res.x, dtype=float), float(res.fun), int(res.nit), self.name)


class SimplexSolver(LPSolver):
    """Two-phase dense tableau simplex with Bland's anti-cycling rule."""

    name = "simplex"

    def __init__(self, tol: float = 1e-11, max_iter: int = 200_000):
        self.tol = tol
        self.max_iter = max_iter

    def solve(self, c, A_ub=None, b_ub=None, A_eq=None, b_eq=None) -> LPResult:
        c = np.asarray(c, dtype=float)
        n = len(c)
        A_ub = _dense(A_ub, n)
        A_eq = _dense(A_eq, n)
        b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
        b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
        m_ub, m_eq = len(b_ub), len(b_eq)
        m = m_ub + m_eq

        # rows: [A_ub | I | 0] and [A_eq | 0 | 0], then artificials where needed
        A = np.zeros((m, n + m_ub))
        A[:m_ub, :n] = A_ub
        A[:m_ub, n:] = np.eye(m_ub)
        A[m_ub:, :n] = A_eq
        b = np.concatenate([b_ub, b_eq])
        neg = b < 0
        A[neg] *= -1.0
        b[neg] *= -1.0

        basis = np.full(m, -1, dtype=np.int64)
        for r in range(m_ub):
            if not neg[r]:
                basis[r] = n + r
        need = np.flatnonzero(basis < 0)
        n_struct = n + m_ub
        art = np.zeros((m, len(need)))
        art[need, np.arange(len(need))] = 1.0
        basis[need] = n_struct + np.arange(len(need))

        T = np.zeros((m + 1, n_struct + len(need) + 1))
        T[:m, :n_struct] = A
        T[:m, n_struct:-1] = art
        T[:m, -1] = b
        iters = 0

        if len(need):
            # phase 1: minimize the sum of artificials
            T[m, :] = 0.0
            T[m, n_struct:-1] = 1.0
            for r in need:
                T[m] -= T[r]
            iters += self._run(T, basis, n_struct + len(need))
            if T[m, -1] < -1e-9:
                raise Infeasible("phase 1 ended with positive artificial mass")
            # pivot zero-level artificials out of the basis
            keep = np.ones(m, dtype=bool)
            for r in range(m):
                if basis[r] >= n_struct:
                    cols = np.flatnonzero(np.abs(T[r, :n_struct]) > self.tol)
                    if len(cols):
                        _pivot(T, basis, r, int(cols[0]))
                    else:
                        keep[r] = False
            rows = np.append(np.flatnonzero(keep), m)
            T = np.delete(T[rows], np.s_[n_struct:-1], axis=1)
            basis = basis[keep]
            m = len(basis)

        # phase 2
        T[m, :] = 0.0
        T[m, :n] = c
        for r in range(m):
            cb = T[m, basis[r]]
            if cb != 0.0:
                T[m] -= cb * T[r]
        iters += self._run(T, basis, n_struct)

        x_full = np.zeros(n_struct)
        x_full[basis] = T[:m, -1]
        x = x_full[:n]
        return LPResult(x, float(c @ x), iters, self.name)

    def _run(self, T, basis, n_cols) -> int:
        m = len(basis)
        it = 0
        while True:
            red = T[m, :n_cols]
            enter = np.flatnonzero(red < -self.tol)
            if len(enter) == 0:
                return it
            j = int(enter[0])
            col = T[:m, j]
            pos = col > self.tol
            if not pos.any():
                raise Infeasible("objective unbounded below")
            ratios = np.full(m, np.inf)
            ratios[pos] = T[:m, -1][pos] / col[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + 1e-14)
            r = int(ties[np.argmin(basis[ties])])
            _pivot(T, basis, r, j)
            it += 1
            if it > self.max_iter:
                raise SolverTimeout(f"simplex exceeded {self.max_iter} pivots")


def _pivot(T, basis, r, j):
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    nz = np.flatnonzero(col)
    if len(nz):
        T[nz] -= np.outer(col[nz], T[r])
    basis[r] = j


def _dense(A, n):
    if A is None:
        return np.zeros((0, n))
    if sparse.issparse(A):
        return A.toarray()
    return np.asarray(A, dtype=float)


SOLVERS = {"highs": HighsSolver, "simplex": SimplexSolver}


def get_solver(name: str | LPSolver = "highs") -> LPSolver:
    if isinstance(name, LPSolver):
        return name
    try:
        return SOLVERS[name]()
    except KeyError:
        raise ValueError(f"unknown LP solver {name!r}; choose from {sorted(SOLVERS)}") from None
