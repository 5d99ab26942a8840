"""Dense two-phase simplex for small linear programs.

Minimizes c.x subject to A x (<=|>=|=) b with x >= 0. Bland's rule is used
for both the entering and leaving choices, which rules out cycling; the
tableau is dense float64, adequate for the problem sizes produced by
per-neuron repair (hundreds of rows/columns).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-7


@dataclass
class SimplexResult:
    status: str  # optimal | infeasible | unbounded | timeout
    x: np.ndarray | None = None
    objective: float | None = None


def _pivot(tableau: np.ndarray, row: int, col: int) -> None:
    tableau[row] /= tableau[row, col]
    for r in range(tableau.shape[0]):
        if r != row and tableau[r, col] != 0.0:
            tableau[r] -= tableau[r, col] * tableau[row]


def _iterate(tableau, basis, costs, deadline, max_iter):
    """Run simplex pivots to optimality. Returns a status string."""
    m = tableau.shape[0]
    n = tableau.shape[1] - 1
    for _ in range(max_iter):
        if deadline is not None and time.monotonic() > deadline:
            return "timeout"
        reduced = costs - costs[basis] @ tableau[:, :n]
        entering = -1
        for j in range(n):
            if reduced[j] < -PIVOT_TOL:
                entering = j
                break
        if entering < 0:
            return "optimal"
        # ratio test; ties resolved by smallest basis variable index (Bland)
        best_ratio = None
        leaving = -1
        for i in range(m):
            a = tableau[i, entering]
            if a > PIVOT_TOL:
                ratio = tableau[i, -1] / a
                if (best_ratio is None or ratio < best_ratio - PIVOT_TOL
                        or (abs(ratio - best_ratio) <= PIVOT_TOL and basis[i] < basis[leaving])):
                    best_ratio = ratio
                    leaving = i
        if leaving < 0:
            return "unbounded"
        _pivot(tableau, leaving, entering)
        basis[leaving] = entering
    return "timeout"


def simplex_solve(c, a, senses, b, deadline=None, max_iter=50000) -> SimplexResult:
    """Minimize c.x s.t. a x (senses) b, x >= 0.

    `deadline` is a time.monotonic() timestamp; crossing it yields status
    "timeout". Infeasibility is certified by a positive phase-1 optimum.
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).copy()
    b = np.asarray(b, dtype=np.float64).copy()
    senses = list(senses)
    m, n = a.shape
    if b.shape != (m,) or c.shape != (n,) or len(senses) != m:
        raise ValueError("inconsistent LP dimensions")

    for i in range(m):
        if b[i] < 0:
            a[i] *= -1.0
            b[i] *= -1.0
            senses[i] = {"<=": ">=", ">=": "<=", "=": "="}[senses[i]]

    n_slack = sum(1 for s in senses if s in ("<=", ">="))
    art_rows = [i for i, s in enumerate(senses) if s in (">=", "=")]
    n_art = len(art_rows)
    total = n + n_slack + n_art

    tableau = np.zeros((m, total + 1))
    tableau[:, :n] = a
    tableau[:, -1] = b
    basis = [0] * m
    s_at = n
    a_at = n + n_slack
    for i, sense in enumerate(senses):
        if sense == "<=":
            tableau[i, s_at] = 1.0
            basis[i] = s_at
            s_at += 1
        elif sense == ">=":
            tableau[i, s_at] = -1.0
            s_at += 1
            tableau[i, a_at] = 1.0
            basis[i] = a_at
            a_at += 1
        else:
            tableau[i, a_at] = 1.0
            basis[i] = a_at
            a_at += 1

    if n_art:
        phase1_costs = np.zeros(total)
        phase1_costs[n + n_slack :] = 1.0
        status = _iterate(tableau, basis, phase1_costs, deadline, max_iter)
        if status != "optimal":
            return SimplexResult(status)
        art_value = sum(tableau[i, -1] for i in range(m) if basis[i] >= n + n_slack)
        if art_value > FEAS_TOL:
            return SimplexResult("infeasible")
        # drive leftover (degenerate) artificials out of the basis
        drop_rows = []
        for i in range(m):
            if basis[i] >= n + n_slack:
                pivot_col = -1
                for j in range(n + n_slack):
                    if abs(tableau[i, j]) > PIVOT_TOL:
                        pivot_col = j
                        break
                if pivot_col >= 0:
                    _pivot(tableau, i, pivot_col)
                    basis[i] = pivot_col
                else:
                    drop_rows.append(i)
        if drop_rows:
            keep = [i for i in range(m) if i not in drop_rows]
            tableau = tableau[keep]
            basis = [basis[i] for i in keep]
            m = len(basis)
        tableau = np.hstack([tableau[:, : n + n_slack], tableau[:, -1:]])

    phase2_costs = np.zeros(n + n_slack)
    phase2_costs[:n] = c
    status = _iterate(tableau, basis, phase2_costs, deadline, max_iter)
    if status != "optimal":
        return SimplexResult(status)

    x = np.zeros(n + n_slack)
    for i, var in enumerate(basis):
        x[var] = tableau[i, -1]
    x = x[:n]
    return SimplexResult("optimal", x, float(c @ x))
