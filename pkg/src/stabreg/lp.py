"""Dense two-phase primal simplex.

Problems are stated as maximisation::

    max  c @ x
    s.t. A_ub @ x <= b_ub
         A_eq @ x == b_eq
         lo <= x <= hi            (per-variable bounds, either side may be None)

Infeasibility and unboundedness are returned as statuses, not raised.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-9
DEGENERATE_RUN = 50


@dataclass
class LpProblem:
    c: np.ndarray
    A_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    # one (lo, hi) pair per variable; None means unbounded on that side
    bounds: Optional[Sequence[tuple]] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        if self.A_ub is None:
            self.A_ub, self.b_ub = np.zeros((0, n)), np.zeros(0)
        if self.A_eq is None:
            self.A_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        self.A_ub = np.asarray(self.A_ub, dtype=float).reshape(-1, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float).ravel()
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.bounds is None:
            self.bounds = [(0.0, None)] * n
        if len(self.bounds) != n:
            raise ValueError(f"expected {n} bounds, got {len(self.bounds)}")
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise ValueError("row count of A and b differ")
        for arr in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP coefficients must be finite")


@dataclass
class LpSolution:
    status: str
    x: Optional[np.ndarray] = None
    objective: Optional[float] = None
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@njit(cache=True)
def _pivot_kernel(T, row, col):
    # Gauss-Jordan step touching only nonzero entries of the pivot row/column
    nrow, ncol = T.shape
    inv = 1.0 / T[row, col]
    nzc = np.empty(ncol, dtype=np.int64)
    k = 0
    for j in range(ncol):
        v = T[row, j] * inv
        T[row, j] = v
        if v != 0.0:
            nzc[k] = j
            k += 1
    for i in range(nrow):
        if i == row:
            continue
        f = T[i, col]
        if f == 0.0:
            continue
        for q in range(k):
            j = nzc[q]
            T[i, j] -= f * T[row, j]
        T[i, col] = 0.0
    T[row, col] = 1.0


class _Tableau:
    """Simplex tableau: m constraint rows plus one objective row.

    The objective row holds reduced costs of a *minimisation*; a column is
    eligible to enter when its entry is negative.
    """

    def __init__(self, T: np.ndarray, basis: np.ndarray, rule: str):
        self.T = T
        self.basis = basis
        self.rule = rule
        self.iterations = 0
        self.weights = np.ones(T.shape[1] - 1)  # devex reference weights

    def _entering(self, ncols: int, degenerate_run: int) -> int:
        z = self.T[-1, :ncols]
        if self.rule == "bland" or (self.rule == "hybrid" and degenerate_run > DEGENERATE_RUN):
            idx = np.flatnonzero(z < -PIVOT_TOL)
            return int(idx[0]) if idx.size else -1
        if self.rule == "dantzig":
            j = int(np.argmin(z))
            return j if z[j] < -PIVOT_TOL else -1
        score = np.where(z < -PIVOT_TOL, z * z / self.weights[:ncols], -1.0)
        j = int(np.argmax(score))
        return j if score[j] > 0 else -1

    def _leaving(self, col: int) -> int:
        a = self.T[:-1, col]
        rhs = self.T[:-1, -1]
        rows = np.flatnonzero(a > PIVOT_TOL)
        if rows.size == 0:
            return -1
        ratios = rhs[rows] / a[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        # Bland: among ties leave the row whose basic variable has lowest index
        return int(ties[np.argmin(self.basis[ties])])

    def pivot(self, row: int, col: int) -> None:
        leaving = self.basis[row]
        _pivot_kernel(self.T, row, col)
        w = self.weights
        wq = w[col]
        np.maximum(w, self.T[row, :-1] ** 2 * wq, out=w)
        w[leaving] = max(w[leaving], 1.0)
        self.basis[row] = col
        self.iterations += 1

    def run(self, ncols: int, max_iter: int) -> str:
        degenerate_run = 0
        while self.iterations < max_iter:
            col = self._entering(ncols, degenerate_run)
            if col < 0:
                return OPTIMAL
            row = self._leaving(col)
            if row < 0:
                return UNBOUNDED
            degenerate_run = degenerate_run + 1 if self.T[row, -1] <= FEAS_TOL else 0
            self.pivot(row, col)
        raise RuntimeError(f"simplex did not terminate in {max_iter} pivots")


def _to_standard(p: LpProblem):
    """Rewrite bounds so every variable is >= 0.

    Returns (c, A_ub, b_ub, A_eq, b_eq, recover) where recover maps the
    standard-form solution back to the original variables.
    """
    n = p.c.size
    cols = []  # per original var: list of (std_col, sign)
    offset = np.zeros(n)
    c_std, ub_cols, eq_cols = [], [], []
    extra_rows, extra_rhs = [], []
    k = 0
    for i, (lo, hi) in enumerate(p.bounds):
        lo = -np.inf if lo is None else float(lo)
        hi = np.inf if hi is None else float(hi)
        if lo > hi:
            return None
        if np.isfinite(lo):
            offset[i] = lo
            cols.append([(k, 1.0)])
            c_std.append(p.c[i])
            ub_cols.append(p.A_ub[:, i])
            eq_cols.append(p.A_eq[:, i])
            if np.isfinite(hi):
                extra_rows.append((k, 1.0))
                extra_rhs.append(hi - lo)
            k += 1
        elif np.isfinite(hi):
            # x = hi - y
            offset[i] = hi
            cols.append([(k, -1.0)])
            c_std.append(-p.c[i])
            ub_cols.append(-p.A_ub[:, i])
            eq_cols.append(-p.A_eq[:, i])
            k += 1
        else:
            cols.append([(k, 1.0), (k + 1, -1.0)])
            c_std += [p.c[i], -p.c[i]]
            ub_cols += [p.A_ub[:, i], -p.A_ub[:, i]]
            eq_cols += [p.A_eq[:, i], -p.A_eq[:, i]]
            k += 2
    A_ub = np.column_stack(ub_cols) if k else np.zeros((p.A_ub.shape[0], 0))
    A_eq = np.column_stack(eq_cols) if k else np.zeros((p.A_eq.shape[0], 0))
    b_ub = p.b_ub - p.A_ub @ offset
    b_eq = p.b_eq - p.A_eq @ offset
    if extra_rows:
        E = np.zeros((len(extra_rows), k))
        for r, (col, v) in enumerate(extra_rows):
            E[r, col] = v
        A_ub = np.vstack([A_ub, E])
        b_ub = np.concatenate([b_ub, extra_rhs])

    def recover(y):
        x = offset.copy()
        for i, parts in enumerate(cols):
            for col, sign in parts:
                x[i] += sign * y[col]
        return x

    return np.array(c_std, dtype=float), A_ub, b_ub, A_eq, b_eq, recover


def solve_lp(p: LpProblem, rule: str = "hybrid", max_iter: int = 200_000) -> LpSolution:
    """Solve ``p`` with a two-phase tableau simplex.

    ``rule`` selects the entering-variable rule: ``"bland"`` (lowest index,
    always terminates), ``"dantzig"`` (most negative reduced cost) or
    ``"hybrid"`` (devex pricing, switching to Bland whenever a run of
    degenerate pivots grows long, so cycling cannot occur). Leaving-row ties go
    to the lowest basic index.
    """
    std = _to_standard(p)
    if std is None:
        return LpSolution(INFEASIBLE)
    c, A_ub, b_ub, A_eq, b_eq, recover = std
    n = c.size
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    A = np.vstack([A_ub, A_eq]) if m else np.zeros((0, n))
    b = np.concatenate([b_ub, b_eq])
    # slack columns for <= rows
    S = np.zeros((m, m_ub))
    S[np.arange(m_ub), np.arange(m_ub)] = 1.0
    flip = b < 0
    A[flip] *= -1
    S[flip] *= -1
    b = np.abs(b)
    need_art = np.flatnonzero(flip | (np.arange(m) >= m_ub))
    n_art = need_art.size
    ncols = n + m_ub + n_art

    T = np.zeros((m + 1, ncols + 1))
    T[:m, :n] = A
    T[:m, n:n + m_ub] = S
    T[need_art, n + m_ub + np.arange(n_art)] = 1.0
    T[:m, -1] = b
    basis = np.empty(m, dtype=int)
    slack_rows = np.setdiff1d(np.arange(m_ub), need_art)
    basis[slack_rows] = n + slack_rows
    basis[need_art] = n + m_ub + np.arange(n_art)

    tab = _Tableau(T, basis, rule)
    if n_art:
        # phase 1: minimise the sum of artificials
        T[-1, :] = 0.0
        T[-1, :] -= T[need_art].sum(axis=0)
        T[-1, n + m_ub:ncols] = 0.0
        tab.run(ncols, max_iter)
        if -T[-1, -1] > 1e-7 * max(1.0, np.abs(b).max(initial=0.0)):
            return LpSolution(INFEASIBLE, iterations=tab.iterations)
        # drive remaining artificials out of the basis
        art_start = n + m_ub
        drop = []
        for r in np.flatnonzero(tab.basis >= art_start):
            cand = np.flatnonzero(np.abs(T[r, :art_start]) > PIVOT_TOL)
            if cand.size:
                tab.pivot(r, int(cand[0]))
            else:
                drop.append(r)
        if drop:
            keep = np.setdiff1d(np.arange(m), drop)
            T = np.vstack([T[keep], T[-1:]])
            tab.T = T
            tab.basis = tab.basis[keep]
        T = np.delete(tab.T, np.arange(art_start, ncols), axis=1)
        tab.T = T
        tab.weights = np.ones(art_start)
        ncols = art_start

    # phase 2 objective: minimise -c
    T = tab.T
    T[-1, :] = 0.0
    T[-1, :n] = -c
    for r, j in enumerate(tab.basis):
        if T[-1, j] != 0.0:
            T[-1] -= T[-1, j] * T[r]
    status = tab.run(ncols, max_iter)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, iterations=tab.iterations)
    y = np.zeros(ncols)
    y[tab.basis] = T[:-1, -1]
    x = recover(y[:n])
    return LpSolution(OPTIMAL, x=x, objective=float(p.c @ x), iterations=tab.iterations)
