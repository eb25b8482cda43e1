"""Dense two-phase primal simplex with variable bounds.

Pivoting uses Dantzig pricing and falls back to Bland's rule after a run of
degenerate steps, which guarantees termination on degenerate vertices.  On
success the primal point, row duals and reduced costs are recomputed from
the final basis (fresh factorization), so reported solutions do not inherit
tableau drift.

Sign conventions of the reported duals match the Lagrangian
``c'x + sum_i dual_i * (a_i'x - b_i)``: equality-row duals are free,
``<=``-row duals are nonnegative, and the reduced cost of a variable
sitting at a zero lower bound is the multiplier of its nonnegativity
constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ..lp import INF, Model

FEAS_TOL = 1e-7
OPT_TOL = 1e-9
PIVOT_TOL = 1e-10
DEGENERATE_STEP = 1e-11
BLAND_TRIGGER = 25
REFRESH_EVERY = 600


class LPStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"
    NUMERIC = "numeric"


class _NumericError(Exception):
    pass


class _Unbounded(Exception):
    pass


@dataclass
class LPSolution:
    status: LPStatus
    objective: float = math.nan
    x: Optional[np.ndarray] = None
    dual: Optional[np.ndarray] = None  # per constraint
    reduced_cost: Optional[np.ndarray] = None  # per variable
    iterations: int = 0
    duality_gap: float = math.nan
    max_violation: float = math.nan
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is LPStatus.OPTIMAL

    def dual_by_name(self, model: Model) -> dict:
        out = {}
        for i, con in enumerate(model.cons):
            if con.dual:
                out[con.dual] = float(self.dual[i])
        for j, var in enumerate(model.vars):
            if var.nonneg_dual:
                out[var.nonneg_dual] = max(float(self.reduced_cost[j]), 0.0)
        return out

    def x_by_name(self, model: Model) -> dict:
        return {v.name: float(self.x[j]) for j, v in enumerate(model.vars)}


class _Tableau:
    """Computational form: min c'x, Ax = b, 0 <= x <= u (u may be inf)."""

    def __init__(self, A: np.ndarray, b: np.ndarray, u: np.ndarray, n_structural: int):
        self.A = A
        self.b = b
        self.u = u
        self.n_structural = n_structural
        self.m, self.n = A.shape
        self.basis = np.zeros(self.m, dtype=int)
        self.at_upper = np.zeros(self.n, dtype=bool)
        self.is_basic = np.zeros(self.n, dtype=bool)
        self.allowed = np.ones(self.n, dtype=bool)
        self.T: Optional[np.ndarray] = None
        self.cbar: Optional[np.ndarray] = None
        self.xB: Optional[np.ndarray] = None
        self.last_pivot = (-1, -1)

    def refresh(self, c: np.ndarray):
        B = self.A[:, self.basis]
        rhs = self.b.copy()
        ub_cols = np.where(self.at_upper & ~self.is_basic)[0]
        if len(ub_cols):
            rhs = rhs - self.A[:, ub_cols] @ self.u[ub_cols]
        try:
            self.T = np.linalg.solve(B, self.A)
            self.xB = np.linalg.solve(B, rhs)
        except np.linalg.LinAlgError as exc:
            raise _NumericError(f"singular basis during refresh: {exc}")
        self.cbar = c - c[self.basis] @ self.T

    def pivot(self, j: int, r: int):
        col = self.T[:, j].copy()
        piv = col[r]
        if abs(piv) < 1e-9:
            raise _NumericError(f"pivot too small ({piv:.3e}) at row {r}, col {j}")
        self.T[r] /= piv
        col[r] = 0.0
        self.T -= np.outer(col, self.T[r])
        self.cbar = self.cbar - self.cbar[j] * self.T[r]
        leaving = self.basis[r]
        self.is_basic[leaving] = False
        self.is_basic[j] = True
        self.basis[r] = j
        self.last_pivot = (j, leaving)


def _price(tab: _Tableau, bland: bool) -> Optional[tuple]:
    """Entering column and direction (+1 from lower bound, -1 from upper)."""
    cbar = tab.cbar
    can_lower = (
        (~tab.is_basic) & (~tab.at_upper) & tab.allowed & (tab.u > 0) & (cbar < -OPT_TOL)
    )
    can_upper = (~tab.is_basic) & tab.at_upper & tab.allowed & (cbar > OPT_TOL)
    any_lower, any_upper = can_lower.any(), can_upper.any()
    if not any_lower and not any_upper:
        return None
    if bland:
        best, direction = tab.n, 0
        if any_lower:
            j = int(np.argmax(can_lower))
            best, direction = j, +1
        if any_upper:
            j = int(np.argmax(can_upper))
            if j < best:
                best, direction = j, -1
        return best, direction
    score = np.zeros(tab.n)
    score[can_lower] = -cbar[can_lower]
    score[can_upper] = cbar[can_upper]
    j = int(np.argmax(score))
    return j, (+1 if can_lower[j] else -1)


def _ratio_test(tab: _Tableau, j: int, direction: int) -> tuple:
    """Max step for the entering column; (-1) row index means a bound flip.

    Two-pass (Harris-style): the first pass finds the step limit allowing a
    tiny bound violation, the second picks the largest pivot magnitude among
    rows within that limit, which keeps the basis well conditioned.
    """
    incr = direction * tab.T[:, j]  # xB moves by -t * incr
    xB = tab.xB
    uB = tab.u[tab.basis]
    pos = incr > PIVOT_TOL
    neg = (incr < -PIVOT_TOL) & np.isfinite(uB)
    slack_tol = 1e-9
    t_limit = INF
    ratios = np.full(tab.m, INF)
    if pos.any():
        ratios[pos] = np.maximum(xB[pos], 0.0) / incr[pos]
        t_limit = min(t_limit, float(np.min((np.maximum(xB[pos], 0.0) + slack_tol) / incr[pos])))
    if neg.any():
        head = np.maximum(uB[neg] - xB[neg], 0.0)
        ratios[neg] = head / (-incr[neg])
        t_limit = min(t_limit, float(np.min((head + slack_tol) / (-incr[neg]))))
    t_row, r_row = INF, -1
    eligible = (pos | neg) & (ratios <= t_limit)
    if eligible.any():
        mag = np.where(eligible, np.abs(incr), -1.0)
        r_row = int(np.argmax(mag))
        t_row = float(max(ratios[r_row], 0.0))
    t_flip = float(tab.u[j])
    if t_row <= t_flip:
        if not math.isfinite(t_row):
            raise _Unbounded()
        return t_row, r_row
    return t_flip, -1


def _ratio_test_bland(tab: _Tableau, j: int, direction: int) -> tuple:
    """Same step length, leaving row chosen by smallest basic variable index."""
    t_best, r_best = _ratio_test(tab, j, direction)
    if r_best == -1:
        return t_best, r_best
    incr = direction * tab.T[:, j]
    uB = tab.u[tab.basis]
    candidates = []
    for r in range(tab.m):
        if incr[r] > PIVOT_TOL:
            ratio = max(tab.xB[r], 0.0) / incr[r]
            if ratio <= t_best + 1e-12:
                candidates.append((int(tab.basis[r]), r))
        elif incr[r] < -PIVOT_TOL and np.isfinite(uB[r]):
            ratio = max(uB[r] - tab.xB[r], 0.0) / (-incr[r])
            if ratio <= t_best + 1e-12:
                candidates.append((int(tab.basis[r]), r))
    candidates.sort()
    return t_best, candidates[0][1]


def _apply_step(tab: _Tableau, j: int, direction: int, t: float, r: int):
    incr = direction * tab.T[:, j]
    tab.xB = tab.xB - t * incr
    np.maximum(tab.xB, 0.0, out=tab.xB)
    if r == -1:
        tab.at_upper[j] = not tab.at_upper[j]
        return
    leaving = int(tab.basis[r])
    leaves_at_upper = incr[r] < 0 and np.isfinite(tab.u[leaving])
    tab.pivot(j, r)
    tab.at_upper[leaving] = bool(leaves_at_upper)
    tab.xB[r] = t if direction > 0 else tab.u[j] - t
    tab.at_upper[j] = False


def _run_phase(
    tab: _Tableau,
    c: np.ndarray,
    iteration_budget: int,
    force_bland: bool = False,
    refresh_every: int = REFRESH_EVERY,
) -> tuple:
    tab.refresh(c)
    iters = 0
    degenerate_run = 0
    bland = force_bland
    since_refresh = 0
    numeric_retries = 0
    while True:
        choice = _price(tab, bland)
        if choice is None:
            # guard against drift-induced false optimality
            if since_refresh > 0:
                tab.refresh(c)
                since_refresh = 0
                if _price(tab, bland) is not None:
                    continue
            return iters, "optimal"
        if iters >= iteration_budget:
            return iters, "iteration_limit"
        j, direction = choice
        try:
            if bland:
                t, r = _ratio_test_bland(tab, j, direction)
            else:
                t, r = _ratio_test(tab, j, direction)
            _apply_step(tab, j, direction, t, r)
        except _Unbounded:
            return iters, "unbounded"
        except _NumericError:
            numeric_retries += 1
            if numeric_retries > 50:
                raise
            tab.refresh(c)
            since_refresh = 0
            continue
        iters += 1
        since_refresh += 1
        if t <= DEGENERATE_STEP:
            degenerate_run += 1
            if degenerate_run >= BLAND_TRIGGER:
                bland = True
        else:
            degenerate_run = 0
            bland = force_bland
        if since_refresh >= refresh_every:
            tab.refresh(c)
            since_refresh = 0


def _build_computational(model: Model, tariff: Optional[dict]):
    """Shift/split variables and append slack columns."""
    c_orig = model.objective_vector(tariff)
    n0 = model.num_vars
    lb, ub = model.bounds_arrays()
    col_of = []
    cols_c: list[float] = []
    cols_u: list[float] = []
    obj_shift = 0.0

    def new_col(cost: float, upper: float) -> int:
        cols_c.append(cost)
        cols_u.append(upper)
        return len(cols_c) - 1

    for j in range(n0):
        l, u = lb[j], ub[j]
        if l == -INF and u == INF:
            cp = new_col(c_orig[j], INF)
            cm = new_col(-c_orig[j], INF)
            col_of.append(("split", cp, cm))
        elif l == -INF:
            col = new_col(-c_orig[j], INF)
            obj_shift += c_orig[j] * u
            col_of.append(("mirror", col, u))
        else:
            col = new_col(c_orig[j], u - l)
            if l != 0.0:
                obj_shift += c_orig[j] * l
            col_of.append(("shift", col, l))

    A_rows, senses, b = model.dense_rows()
    m = model.num_cons
    slack_of = [-1] * m
    for i in range(m):
        if senses[i] == "<=":
            slack_of[i] = new_col(0.0, INF)

    n_cols = len(cols_c)
    A = np.zeros((m, n_cols))
    b_adj = b.copy()
    for j in range(n0):
        mapping = col_of[j]
        col_data = A_rows[:, j]
        if mapping[0] == "shift":
            _, col, l = mapping
            A[:, col] = col_data
            if l != 0.0:
                b_adj -= col_data * l
        elif mapping[0] == "mirror":
            _, col, u = mapping
            A[:, col] = -col_data
            b_adj -= col_data * u
        else:
            _, cp, cm = mapping
            A[:, cp] = col_data
            A[:, cm] = -col_data
    for i in range(m):
        if slack_of[i] >= 0:
            A[i, slack_of[i]] = 1.0

    return A, b_adj, np.array(cols_c), np.array(cols_u), col_of, slack_of, obj_shift


def solve_model(
    model: Model,
    tariff: Optional[dict] = None,
    iteration_limit: Optional[int] = None,
) -> LPSolution:
    """Solve an LP ``Model``; integrality marks are relaxed to the box.

    A failed or inconsistent fast solve is retried once from scratch under
    Bland's rule with frequent refactorization; that pass terminates on any
    degenerate instance at the cost of speed.
    """
    sol = _solve_once(model, tariff, iteration_limit, force_bland=False)
    acceptable = sol.status not in (LPStatus.NUMERIC, LPStatus.ITERATION_LIMIT) and not (
        sol.status is LPStatus.OPTIMAL and sol.max_violation > 10 * FEAS_TOL
    )
    if acceptable:
        return sol
    retry = _solve_once(model, tariff, iteration_limit, force_bland=True)
    if retry.status is LPStatus.NUMERIC and sol.status is not LPStatus.NUMERIC:
        return sol
    return retry


def _solve_once(
    model: Model,
    tariff: Optional[dict],
    iteration_limit: Optional[int],
    force_bland: bool,
) -> LPSolution:
    m, n0 = model.num_cons, model.num_vars
    if n0 == 0:
        return LPSolution(
            LPStatus.OPTIMAL, model.offset_value(tariff), np.zeros(0), np.zeros(m), np.zeros(0)
        )
    A, b, c, u, col_of, slack_of, obj_shift = _build_computational(model, tariff)
    obj_shift += model.offset_value(tariff) - model.obj_offset
    refresh_every = 150 if force_bland else REFRESH_EVERY
    if iteration_limit is None:
        iteration_limit = 20000 + 30 * (A.shape[0] + A.shape[1])

    n_real = A.shape[1]
    art_rows = []
    basis = np.full(m, -1, dtype=int)
    for i in range(m):
        if slack_of[i] >= 0 and b[i] >= 0:
            basis[i] = slack_of[i]
        else:
            art_rows.append(i)
    n_art = len(art_rows)
    if n_art:
        A_art = np.zeros((m, n_art))
        for k, i in enumerate(art_rows):
            A_art[i, k] = 1.0 if b[i] >= 0 else -1.0
            basis[i] = n_real + k
        A = np.hstack([A, A_art])
        c = np.concatenate([c, np.zeros(n_art)])
        u = np.concatenate([u, np.full(n_art, INF)])

    tab = _Tableau(A, b, u, n_real)
    tab.basis = basis
    tab.is_basic[basis] = True
    total_iters = 0

    try:
        if n_art:
            c1 = np.zeros(A.shape[1])
            c1[n_real:] = 1.0
            iters, status = _run_phase(
                tab, c1, iteration_budget=iteration_limit,
                force_bland=force_bland, refresh_every=refresh_every,
            )
            total_iters += iters
            if status == "iteration_limit":
                return LPSolution(
                    LPStatus.ITERATION_LIMIT,
                    iterations=total_iters,
                    message=f"phase 1 stalled, last pivot {tab.last_pivot}",
                )
            if status == "unbounded":  # pragma: no cover - phase 1 is bounded below
                return LPSolution(
                    LPStatus.NUMERIC, iterations=total_iters, message="phase 1 unbounded"
                )
            tab.refresh(c1)
            art_basic = tab.basis >= n_real
            infeas = float(tab.xB[art_basic].sum()) if art_basic.any() else 0.0
            if infeas > FEAS_TOL:
                return LPSolution(
                    LPStatus.INFEASIBLE,
                    iterations=total_iters,
                    message=f"phase 1 objective {infeas:.3e}",
                )
            for r in range(m):
                if tab.basis[r] >= n_real:
                    row = np.abs(tab.T[r, :n_real].copy())
                    row[tab.is_basic[:n_real]] = 0.0
                    row[tab.at_upper[:n_real]] = 0.0
                    jbest = int(np.argmax(row))
                    if row[jbest] > 1e-8:
                        tab.pivot(jbest, r)
                        tab.xB[r] = 0.0
                        tab.at_upper[jbest] = False
            tab.allowed[n_real:] = False
            tab.u[n_real:] = 0.0

        iters, status = _run_phase(
            tab, c, iteration_budget=iteration_limit - total_iters,
            force_bland=force_bland, refresh_every=refresh_every,
        )
        total_iters += iters
    except _NumericError as exc:
        cond = _condition_estimate(tab)
        return LPSolution(
            LPStatus.NUMERIC,
            iterations=total_iters,
            message=f"{exc}; basis condition ~{cond:.2e}",
        )

    if status == "iteration_limit":
        return LPSolution(
            LPStatus.ITERATION_LIMIT,
            iterations=total_iters,
            message=f"phase 2 stalled, last pivot {tab.last_pivot}",
        )
    if status == "unbounded":
        return LPSolution(LPStatus.UNBOUNDED, iterations=total_iters)

    return _extract(model, tab, c, b, col_of, obj_shift, total_iters)


def _condition_estimate(tab: _Tableau) -> float:
    try:
        return float(np.linalg.cond(tab.A[:, tab.basis]))
    except Exception:  # pragma: no cover
        return math.inf


def _extract(
    model: Model,
    tab: _Tableau,
    c: np.ndarray,
    b: np.ndarray,
    col_of,
    obj_shift: float,
    iterations: int,
) -> LPSolution:
    """Recompute primal/dual quantities from the final basis."""
    A = tab.A
    B = A[:, tab.basis]
    ub_cols = np.where(tab.at_upper & ~tab.is_basic & np.isfinite(tab.u))[0]
    rhs = b.copy()
    if len(ub_cols):
        rhs = rhs - A[:, ub_cols] @ tab.u[ub_cols]
    try:
        xB = np.linalg.solve(B, rhs)
        y = np.linalg.solve(B.T, c[tab.basis])
    except np.linalg.LinAlgError:  # pragma: no cover
        return LPSolution(LPStatus.NUMERIC, iterations=iterations, message="singular final basis")
    x_comp = np.zeros(A.shape[1])
    x_comp[ub_cols] = tab.u[ub_cols]
    x_comp[tab.basis] = xB
    cbar = c - y @ A

    x = np.zeros(model.num_vars)
    reduced = np.zeros(model.num_vars)
    for j, mapping in enumerate(col_of):
        if mapping[0] == "shift":
            _, col, l = mapping
            x[j] = x_comp[col] + l
            reduced[j] = cbar[col]
        elif mapping[0] == "mirror":
            _, col, uu = mapping
            x[j] = uu - x_comp[col]
            reduced[j] = -cbar[col]
        else:
            _, cp, cm = mapping
            x[j] = x_comp[cp] - x_comp[cm]
            reduced[j] = cbar[cp]
    # snap roundoff-level bound violations so callers see exact zeros
    for j, var in enumerate(model.vars):
        if var.lb != -INF and var.lb - 1e-7 < x[j] < var.lb:
            x[j] = var.lb
        if var.ub != INF and var.ub < x[j] < var.ub + 1e-7:
            x[j] = var.ub

    duals = -y  # multiplier of (a'x - b)
    for i, con in enumerate(model.cons):
        if con.sense == "<=" and -1e-6 < duals[i] < 0.0:
            duals[i] = 0.0

    objective = float(c @ x_comp) + obj_shift + model.obj_offset
    dual_obj = float(y @ b)
    if len(ub_cols):
        dual_obj += float(cbar[ub_cols] @ tab.u[ub_cols])
    gap = abs(objective - (dual_obj + obj_shift + model.obj_offset))
    violation = model.max_violation(x)
    return LPSolution(
        status=LPStatus.OPTIMAL,
        objective=objective,
        x=x,
        dual=duals,
        reduced_cost=reduced,
        iterations=iterations,
        duality_gap=gap,
        max_violation=violation,
    )
