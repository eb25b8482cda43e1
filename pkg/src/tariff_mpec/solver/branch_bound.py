"""Best-bound branch and bound over binaries, plus the enumeration oracle.

Nodes are selected by best LP bound (ties: depth, then creation order), so
exploration order cannot change the final incumbent.  Branching prefers
complementarity-gating binaries over tariff-expansion bits: the gates
decide the combinatorial structure, the bits only refine the tariff level.

``enumerate_patterns`` is the brute-force oracle for small instances: it
exhausts every complementarity pattern (forcing ``slack = 0`` or
``dual = 0`` directly, no big-M constants involved) and every bit
assignment, solving one LP per feasible leaf.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from ..lp import INF, Model
from .simplex import LPSolution, LPStatus, solve_model

INT_TOL = 1e-6
COMP_TOL = 1e-6


class MILPStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    GAP_LIMIT = "gap_limit"
    TIME_LIMIT = "time_limit"
    NODE_LIMIT = "node_limit"
    NO_SOLUTION = "no_solution"


@dataclass
class MILPLimits:
    gap: float = 1e-4
    time_seconds: float = math.inf
    nodes: int = 1_000_000


@dataclass
class SolveReport:
    status: MILPStatus
    objective: float = math.nan
    best_bound: float = math.nan
    nodes: int = 0
    wall_seconds: float = 0.0
    x: Optional[np.ndarray] = None
    primal: dict = field(default_factory=dict)
    dual: dict = field(default_factory=dict)  # duals of the fixed-binary leaf LP
    message: str = ""

    @property
    def gap(self) -> float:
        if not math.isfinite(self.objective):
            return math.inf
        if not math.isfinite(self.best_bound):
            return math.inf
        denom = max(abs(self.objective), 1e-9)
        return max(0.0, (self.objective - self.best_bound) / denom)

    @property
    def optimal(self) -> bool:
        return self.status is MILPStatus.OPTIMAL


@dataclass
class BinaryProgram:
    """Duck-typed wrapper letting plain MILPs run through ``solve_milp``."""

    model: Model
    pairs: list = field(default_factory=list)


def _solve_with_bounds(model: Model, overrides: dict, tariff=None) -> LPSolution:
    saved = {}
    try:
        for j, (lb, ub) in overrides.items():
            var = model.vars[j]
            saved[j] = (var.lb, var.ub)
            var.lb, var.ub = lb, ub
        return solve_model(model, tariff=tariff)
    finally:
        for j, (lb, ub) in saved.items():
            model.vars[j].lb, model.vars[j].ub = lb, ub


# ---------------------------------------------------------------------------
# presolve: interval propagation and structurally decided gates
# ---------------------------------------------------------------------------


def propagate_bounds(model: Model, overrides: dict, passes: int = 6) -> Optional[dict]:
    """Feasibility-based bound tightening; returns None on proven emptiness."""
    lb = np.array([v.lb for v in model.vars])
    ub = np.array([v.ub for v in model.vars])
    for j, (l, u) in overrides.items():
        lb[j], ub[j] = l, u

    def contrib(j, a):
        """(min, max) contribution of one term; may be +-inf."""
        if a > 0:
            return a * lb[j], a * ub[j]
        return a * ub[j], a * lb[j]

    for _ in range(passes):
        changed = False
        for con in model.cons:
            items = list(con.coefs.items())
            lo_fin = hi_fin = 0.0
            lo_inf = hi_inf = 0  # number of infinite contributions
            lows, highs = [], []
            for j, a in items:
                l, h = contrib(j, a)
                lows.append(l)
                highs.append(h)
                if math.isinf(l):
                    lo_inf += 1
                else:
                    lo_fin += l
                if math.isinf(h):
                    hi_inf += 1
                else:
                    hi_fin += h
            for k, (j, a) in enumerate(items):
                l, h = lows[k], highs[k]
                # lower activity excluding j
                if lo_inf - (1 if math.isinf(l) else 0) == 0:
                    other_lo = lo_fin - (0.0 if math.isinf(l) else l)
                    bound = (con.rhs - other_lo) / abs(a)
                    if a > 0:
                        if bound < ub[j] - 1e-9:
                            ub[j] = bound
                            changed = True
                    else:
                        if -bound > lb[j] + 1e-9:
                            lb[j] = -bound
                            changed = True
                if con.sense == "==" and hi_inf - (1 if math.isinf(h) else 0) == 0:
                    other_hi = hi_fin - (0.0 if math.isinf(h) else h)
                    bound = (con.rhs - other_hi) / abs(a)
                    if a > 0:
                        if bound > lb[j] + 1e-9:
                            lb[j] = bound
                            changed = True
                    else:
                        if -bound < ub[j] - 1e-9:
                            ub[j] = -bound
                            changed = True
            if np.any(lb > ub + 1e-7):
                return None
        if not changed:
            break
    if np.any(lb > ub + 1e-7):
        return None
    out = {}
    for j, v in enumerate(model.vars):
        l = lb[j]
        u = ub[j]
        if v.binary:
            # integral binaries: snap tightened bounds onto {0, 1}
            l = 1.0 if l > INT_TOL else 0.0
            u = 0.0 if u < 1.0 - INT_TOL else 1.0
            if l > u:
                return None
        if l != v.lb or u != v.ub:
            out[j] = (l, u)
    return out


def presolve_gates(milp, overrides: dict) -> Optional[dict]:
    """Fix gating binaries whose pair is structurally decided.

    A pair whose slack is identically zero can take the dual-free side
    (r = 1) without cutting any feasible point; a pair whose dual is pinned
    at zero can take r = 0 provided the primal-side constant cannot bind.
    """
    model = milp.model
    overrides = dict(overrides)
    for _ in range(4):
        tight = propagate_bounds(model, overrides)
        if tight is None:
            return None
        overrides.update(tight)
        lb = np.array([v.lb for v in model.vars])
        ub = np.array([v.ub for v in model.vars])
        for j, (l, u) in overrides.items():
            lb[j], ub[j] = l, u
        changed = False
        for lp in milp.pairs:
            rj = model.var_index(lp.binary)
            if lb[rj] == ub[rj]:
                continue
            s_hi = lp.pair.slack_const
            for name, coef in lp.pair.slack_coefs.items():
                j = model.var_index(name)
                s_hi += coef * (ub[j] if coef > 0 else lb[j])
            dj = model.var_index(lp.pair.dual)
            if s_hi <= 1e-9:
                overrides[rj] = (1.0, 1.0)
                changed = True
            elif ub[dj] <= 1e-9 and s_hi <= lp.m_primal + 1e-9:
                overrides[rj] = (0.0, 0.0)
                changed = True
        if not changed:
            return overrides
    return overrides


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------


def _pair_violations(milp, x_by_name: dict, fixed: set) -> list:
    """Pairs still open for branching whose sides are both active."""
    out = []
    for lp in milp.pairs:
        j = milp.model.var_index(lp.binary)
        if j in fixed:
            continue
        slack = max(lp.pair.slack_value(x_by_name), 0.0)
        dual = max(x_by_name[lp.pair.dual], 0.0)
        if min(slack, dual) > COMP_TOL and slack * dual > 1e-8:
            out.append((lp, slack * dual))
    return out


def _round_gates(milp, x_by_name: dict) -> dict:
    """Consistent gate assignment at a (near-)complementary point."""
    fixes = {}
    for lp in milp.pairs:
        slack = lp.pair.slack_value(x_by_name)
        dual = x_by_name[lp.pair.dual]
        j = milp.model.var_index(lp.binary)
        if dual > COMP_TOL:
            fixes[j] = (1.0, 1.0)
        elif slack > COMP_TOL:
            fixes[j] = (0.0, 0.0)
        else:
            r = x_by_name[lp.binary]
            v = 1.0 if r >= 0.5 else 0.0
            fixes[j] = (v, v)
    return fixes


def solve_milp(
    milp,
    limits: Optional[MILPLimits] = None,
    heuristic: Optional[Callable] = None,
    heuristic_every: int = 40,
) -> SolveReport:
    """Branch and bound on a linearized equilibrium model (or any Model
    wrapped with ``pairs`` metadata; plain MILPs get bit-style branching)."""
    limits = limits or MILPLimits()
    model = milp.model
    t0 = time.monotonic()

    root_fix = presolve_gates(milp, {})
    if root_fix is None:
        return SolveReport(MILPStatus.INFEASIBLE, message="presolve proved infeasibility")

    binaries = model.binaries()
    gate_names = {model.var_index(lp.binary) for lp in milp.pairs}
    bit_binaries = [j for j in binaries if j not in gate_names]

    incumbent = math.inf
    incumbent_x: Optional[np.ndarray] = None
    incumbent_sol: Optional[LPSolution] = None

    counter = itertools.count()
    heap: list = []
    explored = 0

    def leaf_attempt(fixes: dict) -> Optional[LPSolution]:
        merged = dict(root_fix)
        merged.update(fixes)
        for j in binaries:
            if j not in merged:
                return None
        sol = _solve_with_bounds(model, merged)
        return sol if sol.optimal else None

    def try_incumbent(sol: LPSolution) -> bool:
        nonlocal incumbent, incumbent_x, incumbent_sol
        obj = model.objective_value(sol.x)
        if obj < incumbent - 1e-9:
            if model.max_violation(sol.x) > 1e-5:
                return False
            incumbent = obj
            incumbent_x = sol.x.copy()
            incumbent_sol = sol
            return True
        return False

    # root
    root_sol = _solve_with_bounds(model, root_fix)
    if root_sol.status is LPStatus.INFEASIBLE:
        return SolveReport(MILPStatus.INFEASIBLE, nodes=1, wall_seconds=time.monotonic() - t0)
    if root_sol.status is LPStatus.UNBOUNDED:
        return SolveReport(MILPStatus.UNBOUNDED, nodes=1, wall_seconds=time.monotonic() - t0)
    if not root_sol.optimal:
        return SolveReport(
            MILPStatus.NO_SOLUTION, nodes=1, message=f"root LP {root_sol.status.value}"
        )
    heapq.heappush(heap, (root_sol.objective, 0, next(counter), dict(), root_sol))

    def maybe_heuristic(sol: LPSolution):
        if heuristic is None:
            return
        got = heuristic(milp, sol)
        if got is None:
            return
        x_cand = np.asarray(got[0], dtype=float).copy()
        for j in binaries:
            x_cand[j] = round(x_cand[j])
        try_incumbent(LPSolution(LPStatus.OPTIMAL, model.objective_value(x_cand), x_cand))

    maybe_heuristic(root_sol)

    status = MILPStatus.OPTIMAL
    best_bound = root_sol.objective
    while heap:
        bound, depth, _, fixes, sol = heapq.heappop(heap)
        best_bound = bound
        denom = max(abs(incumbent), 1e-9)
        if incumbent_x is not None and (incumbent - bound) / denom <= limits.gap:
            status = MILPStatus.OPTIMAL
            heap.clear()
            break
        if bound >= incumbent - 1e-9:
            continue
        if time.monotonic() - t0 > limits.time_seconds:
            status = MILPStatus.TIME_LIMIT
            break
        if explored >= limits.nodes:
            status = MILPStatus.NODE_LIMIT
            break
        explored += 1
        if sol is None:
            merged = dict(root_fix)
            merged.update(fixes)
            sol = _solve_with_bounds(model, merged)
            if not sol.optimal:
                continue  # infeasible or failed child
            if sol.objective >= incumbent - 1e-9:
                continue
            # keep best-bound order honest: requeue if no longer the best
            if heap and sol.objective > heap[0][0] + 1e-12:
                heapq.heappush(heap, (sol.objective, depth, next(counter), fixes, sol))
                continue
            bound = sol.objective
        x_by_name = sol.x_by_name(model)

        if explored % heuristic_every == 0:
            maybe_heuristic(sol)

        fixed_set = set(root_fix) | set(fixes)
        viols = _pair_violations(milp, x_by_name, fixed_set)
        if viols:
            lp, _ = max(viols, key=lambda t: (t[1], t[0].binary))
            j = milp.model.var_index(lp.binary)
            slack = lp.pair.slack_value(x_by_name)
            dual = x_by_name[lp.pair.dual]
            first = 1.0 if dual >= slack else 0.0
            for value in (first, 1.0 - first):
                child = dict(fixes)
                child[j] = (value, value)
                heapq.heappush(heap, (bound, depth + 1, next(counter), child, None))
            continue
        frac_bits = [
            (abs(sol.x[j] - round(sol.x[j])), j)
            for j in bit_binaries
            if abs(sol.x[j] - round(sol.x[j])) > INT_TOL and j not in fixed_set
        ]
        if frac_bits:
            frac_bits.sort(key=lambda t: (-t[0], t[1]))
            j = frac_bits[0][1]
            nearest = round(sol.x[j])
            for value in (nearest, 1.0 - nearest):
                child = dict(fixes)
                child[j] = (value, value)
                heapq.heappush(heap, (bound, depth + 1, next(counter), child, None))
            continue

        # complementary and integral: pin the pattern and resolve exactly
        gate_fixes = _round_gates(milp, x_by_name)
        leaf_fixes = dict(fixes)
        leaf_fixes.update(gate_fixes)
        for j in bit_binaries:
            v = round(sol.x[j])
            leaf_fixes.setdefault(j, (v, v))
        leaf = leaf_attempt(leaf_fixes)
        if leaf is not None:
            try_incumbent(leaf)
        # the node is fully resolved either way
        continue

    wall = time.monotonic() - t0
    if incumbent_x is None:
        if status in (MILPStatus.TIME_LIMIT, MILPStatus.NODE_LIMIT):
            return SolveReport(status, nodes=explored, wall_seconds=wall, best_bound=best_bound)
        return SolveReport(
            MILPStatus.NO_SOLUTION, nodes=explored, wall_seconds=wall, best_bound=best_bound
        )
    if not heap and status is MILPStatus.OPTIMAL:
        best_bound = incumbent if not math.isfinite(best_bound) else min(best_bound, incumbent)
    report = SolveReport(
        status=status,
        objective=incumbent,
        best_bound=best_bound if math.isfinite(best_bound) else incumbent,
        nodes=explored,
        wall_seconds=wall,
        x=incumbent_x,
        primal={v.name: float(incumbent_x[j]) for j, v in enumerate(model.vars)},
        dual=(incumbent_sol.dual_by_name(model) if incumbent_sol.dual is not None else {}),
    )
    if report.status is MILPStatus.OPTIMAL and report.gap > limits.gap:
        report.status = MILPStatus.GAP_LIMIT
    return report


# ---------------------------------------------------------------------------
# exhaustive complementarity-pattern enumeration (oracle)
# ---------------------------------------------------------------------------


@dataclass
class EnumerationResult:
    objective: float
    patterns_feasible: int
    patterns_total: int
    x: Optional[np.ndarray] = None


def enumerate_patterns(
    base_model: Model,
    pairs: list,
    bit_names: Optional[list] = None,
    prune: bool = True,
) -> EnumerationResult:
    """Exhaustive minimum over complementarity patterns and bit values.

    Works on a model WITHOUT big-M rows: the pattern forces ``slack = 0``
    via an equality row or ``dual = 0`` via a bound, so the result is
    independent of any linearization constant.
    """
    model = base_model.copy()
    bit_names = bit_names or []
    total = (2 ** len(pairs)) * (2 ** len(bit_names))
    best = EnumerationResult(math.inf, 0, total)

    def descend(level: int):
        sol = solve_model(model)
        if sol.status is LPStatus.INFEASIBLE:
            return
        if prune and sol.optimal and sol.objective >= best.objective - 1e-12:
            return
        if level == len(pairs) + len(bit_names):
            if sol.optimal and sol.objective < best.objective:
                best.objective = sol.objective
                best.x = sol.x.copy()
                best.patterns_feasible += 1
            elif sol.optimal:
                best.patterns_feasible += 1
            return
        if level < len(pairs):
            pair = pairs[level]
            # branch A: slack forced to zero
            idx = model.add_con(
                f"enum_slack[{pair.name}]",
                dict(pair.slack_coefs),
                "==",
                -pair.slack_const,
                tag="enumeration",
            )
            descend(level + 1)
            dropped = model.cons.pop()
            del model._con_index[dropped.name]
            # branch B: dual forced to zero
            dj = model.var_index(pair.dual)
            old = model.vars[dj].ub
            model.vars[dj].ub = 0.0
            descend(level + 1)
            model.vars[dj].ub = old
        else:
            name = bit_names[level - len(pairs)]
            j = model.var_index(name)
            old = (model.vars[j].lb, model.vars[j].ub)
            for v in (0.0, 1.0):
                model.vars[j].lb = v
                model.vars[j].ub = v
                descend(level + 1)
            model.vars[j].lb, model.vars[j].ub = old

    descend(0)
    return best
