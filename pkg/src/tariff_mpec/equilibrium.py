"""End-to-end equilibrium solving: assemble, linearize, solve, unpack.

The internal backend runs branch and bound helped by a decomposition
heuristic: candidate tariffs from the node relaxation are snapped onto the
bit grid, every household LP is solved exactly at those charges, and the
resulting primal/dual point (flows, duals, gates, expansion bits, grid
variables) is assembled into a full incumbent whenever the recovery band
accepts it.  The fixed charge acts as the continuous gap filler when the
structure allows one.

The external backend writes the MILP as MPS and drives a configured solver
command (see ``tariff-mpec-highs`` for the shipped reference backend).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import FixedTariff, ScenarioConfig, ValidationError
from .agent_lp import (
    AgentBill,
    extract_schedule,
    household_bill,
    tariff_values,
)
from .kkt import assemble_equilibrium
from .linearize import MILPModel, audit_big_m, build_milp
from .lp import Model
from .solver import MILPLimits, MILPStatus, SolveReport, solve_milp, solve_model
from .solver.mps import run_external_solver


def _bits_of(k: int, nbits: int) -> list:
    return [(k >> (nbits - i)) & 1 for i in range(1, nbits + 1)]


class _DecompositionHeuristic:
    def __init__(self, milp: MILPModel):
        self.milp = milp
        self.system = milp.system
        self.scenario = milp.system.scenario
        self._cache: dict = {}

    def _households_at(self, tariff: FixedTariff):
        key = (round(tariff.vnt, 12), round(tariff.cnt, 12))
        if key not in self._cache:
            sols = []
            for agent, hh_model, layout in self.system.households:
                sol = solve_model(hh_model, tariff=tariff_values(tariff))
                if not sol.optimal:
                    sols = None
                    break
                sols.append((agent, hh_model, layout, sol))
            self._cache[key] = sols
        return self._cache[key]

    def _assemble(self, tariff: FixedTariff, kv: int, kc: int):
        """Full MILP point at a grid tariff, or None if the band rejects it."""
        scenario = self.scenario
        system = self.system
        milp = self.milp
        model = milp.model
        W = scenario.scaling_factor
        H = scenario.horizon
        nm = scenario.tariff.net_metering
        sols = self._households_at(tariff)
        if sols is None:
            return None

        x = np.zeros(model.num_vars)
        qv = 0.0
        qp = 0.0
        net = np.zeros(H)
        for agent, hh_model, layout, sol in sols:
            duals = sol.dual_by_name(hh_model)
            for j, var in enumerate(hh_model.vars):
                x[model.var_index(var.name)] = sol.x[j]
            for name, value in duals.items():
                x[model.var_index(name)] = value
            for unit in layout.units:
                imp = np.array(
                    [sol.x[hh_model.var_index(f"imp[{unit.name},{h}]")] for h in range(1, H + 1)]
                )
                exp = np.array(
                    [sol.x[hh_model.var_index(f"exp[{unit.name},{h}]")] for h in range(1, H + 1)]
                )
                net += imp - exp
                qv += W * float(imp.sum() - nm * exp.sum())
                # normalize an undetermined peak onto the measured maximum
                peak_j = model.var_index(f"peak[{unit.name}]")
                mu_peak = [duals.get(f"mu_peak[{unit.name},{h}]", 0.0) for h in range(1, H + 1)]
                if max(mu_peak) <= 1e-9:
                    x[peak_j] = float(np.max(imp + exp))
                qp += x[peak_j]
        e_gi = np.maximum(net, 0.0)
        e_ge = np.maximum(-net, 0.0)
        e_g = e_gi + e_ge
        agc = max(0.0, float(np.max(e_g)) - scenario.grid_costs.existing_capacity)
        for h in range(1, H + 1):
            x[model.var_index(f"e_gi[{h}]")] = e_gi[h - 1]
            x[model.var_index(f"e_ge[{h}]")] = e_ge[h - 1]
            x[model.var_index(f"e_g[{h}]")] = e_g[h - 1]
        x[model.var_index("agc")] = agc

        cost_n = scenario.grid_costs.sunk_costs + scenario.grid_costs.incremental_capacity_cost * agc
        base_rev = tariff.vnt * qv + tariff.cnt * qp
        n = system.connection_count
        fnt_max = system.tariff_bounds["fnt"]
        fnt = min(max((cost_n - base_rev) / n, 0.0), fnt_max) if n else 0.0
        revenue = base_rev + n * fnt
        delta = scenario.recovery_band
        if not (cost_n * (1 - delta) - 1e-9 <= revenue <= cost_n * (1 + delta) + 1e-9):
            return None

        x[model.var_index("vnt")] = tariff.vnt
        x[model.var_index("cnt")] = tariff.cnt
        x[model.var_index("fnt")] = fnt
        if model.has_var("qv"):
            x[model.var_index("qv")] = qv
        if model.has_var("qp"):
            x[model.var_index("qp")] = qp
        for sym, k, quantity, zfam in (("vnt", kv, qv, "zv"), ("cnt", kc, qp, "zc")):
            names = self.milp.bit_vars.get(sym)
            if not names:
                continue
            bits = _bits_of(k, len(names))
            for pos, (name, b) in enumerate(zip(names, bits), start=1):
                x[model.var_index(name)] = float(b)
                x[model.var_index(f"{zfam}[{pos}]")] = quantity * b
        # gates consistent with the household complementarity pattern
        x_by_name = {v.name: x[j] for j, v in enumerate(model.vars)}
        for lp in milp.pairs:
            slack = lp.pair.slack_value(x_by_name)
            dual = x_by_name[lp.pair.dual]
            j = model.var_index(lp.binary)
            if dual > 1e-9:
                x[j] = 1.0
            elif slack > 1e-9:
                x[j] = 0.0
                if 0.0 < dual <= 1e-7:
                    x[model.var_index(lp.pair.dual)] = 0.0
            else:
                x[j] = 1.0
        return x

    def __call__(self, milp: MILPModel, node_sol):
        scenario = self.scenario
        steps = milp.grid_steps
        if "vnt" not in steps:
            return None
        step_v = steps["vnt"]
        nv = len(milp.bit_vars["vnt"])
        kv_max = 2 ** nv - 1
        model = milp.model
        vnt_rel = float(node_sol.x[model.var_index("vnt")])
        kv0 = int(round(vnt_rel / step_v))
        candidates = []
        has_cnt = "cnt" in steps
        if has_cnt:
            step_c = steps["cnt"]
            nc = len(milp.bit_vars["cnt"])
            kc_max = 2 ** nc - 1
            cnt_rel = float(node_sol.x[model.var_index("cnt")])
            kc0 = int(round(cnt_rel / step_c))
        for dk in (0, -1, 1, -2, 2, -3, 3):
            kv = min(max(kv0 + dk, 0), kv_max)
            if has_cnt:
                for dc in (0, -1, 1):
                    kc = min(max(kc0 + dc, 0), kc_max)
                    candidates.append((kv, kc))
            else:
                candidates.append((kv, 0))
        # fixpoint refinements: required volumetric level at observed volume
        probe = self._refine_candidate(kv0, steps, milp)
        if probe is not None:
            candidates.extend(probe)
            probe2 = self._refine_candidate(probe[0][0], steps, milp)
            if probe2 is not None:
                candidates.extend(probe2)
        seen = set()
        best = None
        best_obj = math.inf
        for kv, kc in candidates:
            if (kv, kc) in seen:
                continue
            seen.add((kv, kc))
            tariff = FixedTariff(
                vnt=kv * step_v,
                cnt=(kc * steps["cnt"]) if has_cnt else 0.0,
                fnt=0.0,
                net_metering=scenario.tariff.net_metering,
            )
            x = self._assemble(tariff, kv, kc)
            if x is None:
                continue
            obj = model.objective_value(x)
            if obj < best_obj:
                best, best_obj = x, obj
        if best is None:
            return None
        return best, "decomposition"

    def _refine_candidate(self, kv0: int, steps, milp) -> Optional[list]:
        """Grid levels solving the recovery equation at the observed volume."""
        scenario = self.scenario
        step_v = steps["vnt"]
        nv = len(milp.bit_vars["vnt"])
        kv_max = 2 ** nv - 1
        tariff = FixedTariff(
            vnt=min(max(kv0, 0), kv_max) * step_v,
            net_metering=scenario.tariff.net_metering,
        )
        sols = self._households_at(tariff)
        if sols is None:
            return None
        W = scenario.scaling_factor
        H = scenario.horizon
        nm = scenario.tariff.net_metering
        qv = 0.0
        net = np.zeros(H)
        for agent, hh_model, layout, sol in sols:
            for unit in layout.units:
                imp = np.array(
                    [sol.x[hh_model.var_index(f"imp[{unit.name},{h}]")] for h in range(1, H + 1)]
                )
                exp = np.array(
                    [sol.x[hh_model.var_index(f"exp[{unit.name},{h}]")] for h in range(1, H + 1)]
                )
                qv += W * float(imp.sum() - nm * exp.sum())
                net += imp - exp
        if qv <= 0:
            return None
        agc = max(0.0, float(np.max(np.abs(net))) - scenario.grid_costs.existing_capacity)
        cost_n = scenario.grid_costs.sunk_costs + scenario.grid_costs.incremental_capacity_cost * agc
        k_req = int(round(cost_n / qv / step_v))
        out = []
        for dk in (0, -1, 1, -2, 2):
            k = min(max(k_req + dk, 0), kv_max)
            out.append((k, 0))
        return out


@dataclass
class HouseholdResult:
    agent_id: str
    kind: str
    bill: AgentBill
    measured_peak: float
    pv_capacity: float
    battery_capacity: float
    units: int


@dataclass
class EquilibriumResult:
    scenario: ScenarioConfig
    milp: MILPModel
    report: SolveReport
    tariffs: dict = field(default_factory=dict)
    cost_n: float = math.nan
    revenue: float = math.nan
    agc: float = math.nan
    coincident_peak: float = math.nan
    households: list = field(default_factory=list)

    @property
    def solved(self) -> bool:
        return self.report.x is not None

    @property
    def total_bills(self) -> float:
        return sum(h.bill.total for h in self.households)


def unpack_result(milp: MILPModel, report: SolveReport) -> EquilibriumResult:
    result = EquilibriumResult(milp.system.scenario, milp, report)
    if report.x is None:
        return result
    scenario = milp.system.scenario
    model = milp.model
    x = report.x
    tariff = FixedTariff(
        vnt=float(x[model.var_index("vnt")]),
        cnt=float(x[model.var_index("cnt")]),
        fnt=float(x[model.var_index("fnt")]),
        net_metering=scenario.tariff.net_metering,
    )
    result.tariffs = {"vnt": tariff.vnt, "cnt": tariff.cnt, "fnt": tariff.fnt}
    result.agc = float(x[model.var_index("agc")])
    grid = scenario.grid_costs
    result.cost_n = grid.sunk_costs + grid.incremental_capacity_cost * result.agc
    e_g = [float(x[model.var_index(f"e_g[{h}]")]) for h in range(1, scenario.horizon + 1)]
    result.coincident_peak = max(e_g) if e_g else 0.0

    W = scenario.scaling_factor
    revenue = milp.system.connection_count * tariff.fnt
    for agent, hh_model, layout in milp.system.households:
        x_hh = np.array([x[model.var_index(v.name)] for v in hh_model.vars])
        bill = household_bill(hh_model, layout, x_hh, tariff)
        schedule = extract_schedule(hh_model, layout, x_hh)
        result.households.append(
            HouseholdResult(
                agent_id=agent.id,
                kind=agent.kind.value,
                bill=bill,
                measured_peak=schedule.coincident_peak,
                pv_capacity=schedule.pv_capacity,
                battery_capacity=schedule.battery_capacity,
                units=len(layout.units),
            )
        )
        for unit in layout.units:
            imp = sum(
                x[model.var_index(f"imp[{unit.name},{h}]")] for h in range(1, scenario.horizon + 1)
            )
            exp = sum(
                x[model.var_index(f"exp[{unit.name},{h}]")] for h in range(1, scenario.horizon + 1)
            )
            revenue += W * (imp - scenario.tariff.net_metering * exp) * tariff.vnt
            revenue += tariff.cnt * x[model.var_index(f"peak[{unit.name}]")]
    result.revenue = revenue
    return result


def apply_structural_fixes(milp: MILPModel) -> int:
    """Pin structurally decided gates/bounds onto the model itself.

    Away-hour EV pairs, discharge pairs without V2G and peak pairs under a
    zero capacity charge are all decided before any search; fixing them
    shrinks the tree for the internal solver and the exported MPS alike.
    Returns the number of bounds tightened; raises if presolve proves the
    model empty.
    """
    from .solver.branch_bound import presolve_gates

    fixes = presolve_gates(milp, {})
    if fixes is None:
        raise ValidationError(f"{milp.model.name}: presolve proved infeasibility")
    for j, (lb, ub) in fixes.items():
        milp.model.vars[j].lb = lb
        milp.model.vars[j].ub = ub
    return len(fixes)


def solve_equilibrium(
    scenario: ScenarioConfig,
    backend: str = "internal",
    limits: Optional[MILPLimits] = None,
    use_heuristic: bool = True,
) -> EquilibriumResult:
    """Assemble, linearize and solve one scenario's equilibrium MILP."""
    system = assemble_equilibrium(scenario)
    milp = build_milp(system, scenario.linearization)
    apply_structural_fixes(milp)
    limits = limits or MILPLimits()
    if backend == "internal":
        heuristic = _DecompositionHeuristic(milp) if use_heuristic else None
        report = solve_milp(milp, limits=limits, heuristic=heuristic)
    elif backend.startswith("mps:"):
        command = backend[len("mps:"):]
        timeout = limits.time_seconds if math.isfinite(limits.time_seconds) else 900.0
        report = run_external_solver(milp.model, command, timeout=timeout)
    else:
        raise ValidationError(f"unknown backend {backend!r}; use 'internal' or 'mps:<command>'")
    return unpack_result(milp, report)
