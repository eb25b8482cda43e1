"""Mechanical optimality conditions and single-level equilibrium assembly.

``derive_kkt`` turns a tagged household LP into stationarity rows (one per
variable), complementarity pairs (one per inequality, including tracked
nonnegativity bounds) and the list of equality constraints carried
verbatim.  The derivation is purely structural: a stationarity row is the
objective coefficient plus the constraint-coefficient-weighted duals, so it
can be validated against the simplex duals of any solved instance.

``assemble_equilibrium`` merges every household's conditions with the
regulator's objective and grid-side constraints into one model whose only
remaining nonlinearities are the tariff-times-quantity products in the
cost-recovery band; those are flagged for the linearizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ScenarioConfig, TariffKind, ValidationError
from .lp import INF, Model
from .agent_lp import HouseholdLayout, build_household


@dataclass(frozen=True)
class StationarityRow:
    """const + sum(tariff) + sum(coef * dual) = 0 for one primal variable."""

    var: str
    const: float
    tariff: dict  # tariff symbol -> multiplier
    terms: dict  # dual name -> coefficient

    def residual(self, duals: dict, tariff_values: dict) -> float:
        value = self.const
        for sym, mult in self.tariff.items():
            value += mult * tariff_values[sym]
        for dual, coef in self.terms.items():
            value += coef * duals.get(dual, 0.0)
        return value


@dataclass(frozen=True)
class ComplementarityPair:
    """slack >= 0 perpendicular to dual >= 0.

    ``slack = const + sum(coefs * primal)``; the unit of the big-M
    linearization.  ``family`` groups pairs that share one big-M constant.
    """

    name: str
    family: str
    slack_coefs: dict  # primal var name -> coefficient
    slack_const: float
    dual: str

    def slack_value(self, x_by_name: dict) -> float:
        return self.slack_const + sum(
            coef * x_by_name[v] for v, coef in self.slack_coefs.items()
        )


@dataclass
class KKTSystem:
    stationarity: list
    pairs: list
    equalities: list  # names of equality constraints carried verbatim


def derive_kkt(model: Model) -> KKTSystem:
    """Optimality conditions of a tagged LP, one row per variable."""
    terms_by_var: dict[int, dict] = {j: {} for j in range(model.num_vars)}
    pairs: list[ComplementarityPair] = []
    equalities: list[str] = []
    for con in model.cons:
        if con.dual is None:
            raise ValidationError(f"constraint {con.name!r} has no dual symbol; cannot derive")
        for j, coef in con.coefs.items():
            slot = terms_by_var[j]
            slot[con.dual] = slot.get(con.dual, 0.0) + coef
        if con.sense == "==":
            equalities.append(con.name)
        else:
            pairs.append(
                ComplementarityPair(
                    name=f"pair[{con.name}]",
                    family=con.tag or "untagged",
                    slack_coefs={model.vars[j].name: -c for j, c in con.coefs.items()},
                    slack_const=con.rhs,
                    dual=con.dual,
                )
            )
    rows = []
    for j, var in enumerate(model.vars):
        terms = dict(terms_by_var[j])
        if var.lb == 0.0 and var.nonneg_dual is not None:
            terms[var.nonneg_dual] = terms.get(var.nonneg_dual, 0.0) - 1.0
            pairs.append(
                ComplementarityPair(
                    name=f"pair[{var.name}>=0]",
                    family=var.nonneg_tag or "nonneg",
                    slack_coefs={var.name: 1.0},
                    slack_const=0.0,
                    dual=var.nonneg_dual,
                )
            )
        elif var.lb == 0.0 and var.nonneg_dual is None:
            raise ValidationError(
                f"variable {var.name!r} has an untagged nonnegativity bound"
            )
        rows.append(
            StationarityRow(
                var=var.name,
                const=model.obj.get(j, 0.0),
                tariff=dict(model.obj_tariff.get(j, {})),
                terms=terms,
            )
        )
    return KKTSystem(stationarity=rows, pairs=pairs, equalities=equalities)


@dataclass
class KKTResidualReport:
    max_stationarity: float
    max_complementarity: float
    max_feasibility: float

    def passes(self, tol: float) -> bool:
        return max(self.max_stationarity, self.max_complementarity, self.max_feasibility) <= tol


def check_kkt_residuals(
    model: Model,
    kkt: KKTSystem,
    x: np.ndarray,
    duals: dict,
    tariff_values: dict,
) -> KKTResidualReport:
    """Evaluate a candidate primal/dual pair against the derived system."""
    x_by_name = {v.name: float(x[j]) for j, v in enumerate(model.vars)}
    stat = 0.0
    for row in kkt.stationarity:
        stat = max(stat, abs(row.residual(duals, tariff_values)))
    comp = 0.0
    for pair in kkt.pairs:
        comp = max(comp, abs(pair.slack_value(x_by_name) * duals.get(pair.dual, 0.0)))
    feas = model.max_violation(x)
    return KKTResidualReport(stat, comp, feas)


@dataclass
class EquilibriumSystem:
    """Single-level system: household optimality + regulator constraints.

    ``model`` holds every linear piece (household feasibility, stationarity,
    grid-side rows, the regulator objective).  ``pairs`` and ``bilinear``
    are handed to the linearizer; the cost-recovery band is added there once
    the products have been expanded.
    """

    scenario: ScenarioConfig
    model: Model
    pairs: list
    stationarity: list
    households: list  # (agent, household model, layout)
    bilinear: list  # (quantity var name, tariff symbol)
    unit_caps: dict  # unit name -> per-slot flow envelope
    flow_caps: dict  # unit name -> (import cap array, export cap array)
    connection_count: int

    @property
    def tariff_bounds(self) -> dict:
        t = self.scenario.tariff
        cap_ok = t.capacity_allowed
        return {
            "vnt": t.volumetric_max,
            "cnt": t.capacity_max if cap_ok else 0.0,
            "fnt": t.fixed_max if t.fixed_allowed else 0.0,
        }

    def quantity_bounds(self) -> dict:
        """Valid ranges for the aggregate billed quantities."""
        W = self.scenario.scaling_factor
        nm = self.scenario.tariff.net_metering
        imp_total = sum(float(ci.sum()) for ci, _ in self.flow_caps.values())
        exp_total = sum(float(ce.sum()) for _, ce in self.flow_caps.values())
        qv_hi = W * (imp_total + (exp_total if nm == -1 else 0.0))
        qv_lo = -W * exp_total if nm == 1 else 0.0
        return {"qv": (qv_lo, qv_hi), "qp": (0.0, sum(self.unit_caps.values()))}


def _unit_flow_caps(agent, unit) -> tuple:
    """Per-hour valid import/export envelopes at household-optimal points.

    A household optimum never imports and exports simultaneously (selling
    below the buying price makes that strictly wasteful), so imports are
    bounded by demand plus everything that can charge, exports by
    everything that can discharge or generate.
    """
    H = agent.horizon
    imp_cap = np.zeros(H)
    exp_cap = np.zeros(H)
    if unit.name == agent.id:
        imp_cap += agent.load
    if unit.has_ev and agent.ev is not None:
        imp_cap += agent.ev.charge_power
        exp_cap += agent.ev.discharge_power
    if unit.has_der and agent.storage is not None:
        imp_cap += agent.battery_limit * agent.storage.charge_ratio
        exp_cap += agent.battery_limit * agent.storage.discharge_ratio
        exp_cap += agent.pv_limit * agent.solar_availability
    if unit.local:
        # behind-the-meter transfers can re-route anything the pair can
        # discharge or generate through either meter; add the whole pool
        # to both directions (loose but valid)
        pool = np.zeros(H)
        if agent.ev is not None:
            pool += agent.ev.discharge_power
        if agent.kind.can_invest and agent.storage is not None:
            pool += agent.battery_limit * agent.storage.discharge_ratio
            pool += agent.pv_limit * agent.solar_availability
        imp_cap += pool
        exp_cap += pool
    return imp_cap, exp_cap


def assemble_equilibrium(scenario: ScenarioConfig) -> EquilibriumSystem:
    """Merge all household optimality systems under the regulator problem."""
    W = scenario.scaling_factor
    H = scenario.horizon
    tariff = scenario.tariff
    grid = scenario.grid_costs

    merged = Model(f"equilibrium:{scenario.name}")
    all_pairs: list[ComplementarityPair] = []
    all_rows: list[StationarityRow] = []
    households = []
    bilinear = []
    unit_caps = {}

    # tariff columns; disallowed charges are pinned to zero
    bounds = {
        "vnt": tariff.volumetric_max,
        "cnt": tariff.capacity_max if tariff.capacity_allowed else 0.0,
        "fnt": tariff.fixed_max if tariff.fixed_allowed else 0.0,
    }
    for sym in ("vnt", "cnt", "fnt"):
        merged.add_var(sym, lb=0.0, ub=bounds[sym])

    flow_caps = {}
    for agent in scenario.agents:
        hh_model, layout = build_household(agent, W, tariff.net_metering)
        kkt = derive_kkt(hh_model)
        households.append((agent, hh_model, layout))

        for var in hh_model.vars:
            merged.add_var(var.name, lb=var.lb, ub=var.ub)
        # explicit boxes valid at household-optimal points; they are not
        # part of the household optimality system, only relaxation food
        for unit in layout.units:
            imp_cap, exp_cap = _unit_flow_caps(agent, unit)
            flow_caps[unit.name] = (imp_cap, exp_cap)
            for h in range(1, H + 1):
                merged.vars[merged.var_index(f"imp[{unit.name},{h}]")].ub = float(
                    imp_cap[h - 1]
                )
                merged.vars[merged.var_index(f"exp[{unit.name},{h}]")].ub = float(
                    exp_cap[h - 1]
                )
                if unit.has_ev:
                    merged.vars[merged.var_index(f"ev_soc[{unit.name},{h}]")].ub = (
                        agent.ev.soc_max
                    )
                    merged.vars[merged.var_index(f"ev_ch[{unit.name},{h}]")].ub = float(
                        agent.ev.charge_power[h - 1]
                    )
                    merged.vars[merged.var_index(f"ev_dis[{unit.name},{h}]")].ub = float(
                        agent.ev.discharge_power[h - 1]
                    )
                if unit.has_der:
                    st = agent.storage
                    merged.vars[merged.var_index(f"batt_soc[{unit.name},{h}]")].ub = (
                        agent.battery_limit * st.soc_max_frac
                    )
                    merged.vars[merged.var_index(f"batt_ch[{unit.name},{h}]")].ub = (
                        agent.battery_limit * st.charge_ratio
                    )
                    merged.vars[merged.var_index(f"batt_dis[{unit.name},{h}]")].ub = (
                        agent.battery_limit * st.discharge_ratio
                    )
                if unit.local:
                    pool = float(imp_cap[h - 1] + exp_cap[h - 1])
                    merged.vars[merged.var_index(f"loc_imp[{unit.name},{h}]")].ub = pool
                    merged.vars[merged.var_index(f"loc_exp[{unit.name},{h}]")].ub = pool
            if unit.has_der:
                merged.vars[merged.var_index(f"pv_cap[{unit.name}]")].ub = agent.pv_limit
                merged.vars[merged.var_index(f"batt_cap[{unit.name}]")].ub = (
                    agent.battery_limit
                )
            peak_idx = merged.var_index(f"peak[{unit.name}]")
            merged.vars[peak_idx].ub = float(np.max(imp_cap + exp_cap))
        for con in hh_model.cons:
            merged.add_con(
                con.name,
                {hh_model.vars[j].name: c for j, c in con.coefs.items()},
                con.sense,
                con.rhs,
                tag=con.tag,
            )
        dual_names = {p.dual for p in kkt.pairs}
        eq_duals = {con.dual for con in hh_model.cons if con.sense == "=="}
        for dual in sorted(eq_duals):
            merged.add_var(dual, lb=-INF)
        for dual in sorted(dual_names):
            merged.add_var(dual, lb=0.0)
        for row in kkt.stationarity:
            coefs = {dual: coef for dual, coef in row.terms.items()}
            for sym, mult in row.tariff.items():
                coefs[sym] = coefs.get(sym, 0.0) + mult
            merged.add_con(
                f"stat[{row.var}]", coefs, "==", -row.const, tag="stationarity"
            )
        all_pairs.extend(kkt.pairs)
        all_rows.extend(kkt.stationarity)

        for unit in layout.units:
            ci, ce = flow_caps[unit.name]
            unit_caps[unit.name] = float(np.max(ci + ce))
            for h in range(1, H + 1):
                bilinear.append((f"imp[{unit.name},{h}]", "vnt"))
                bilinear.append((f"exp[{unit.name},{h}]", "vnt"))
            bilinear.append((f"peak[{unit.name}]", "cnt"))

        # regulator objective: DER investment and net energy cost terms are
        # exactly the tariff-free part of the household objectives
        for j, coef in hh_model.obj.items():
            merged.add_obj(hh_model.vars[j].name, coef)

    # grid-side variables and rows
    total_imp_cap = sum(ci for ci, _ in flow_caps.values())
    total_exp_cap = sum(ce for _, ce in flow_caps.values())
    agc = merged.add_var("agc", lb=0.0, ub=float(np.max(total_imp_cap + total_exp_cap)))
    merged.add_obj(agc, grid.incremental_capacity_cost)
    merged.obj_offset += grid.sunk_costs
    unit_names = list(unit_caps)
    for h in range(1, H + 1):
        cap_i = float(total_imp_cap[h - 1])
        cap_e = float(total_exp_cap[h - 1])
        merged.add_var(f"e_gi[{h}]", lb=0.0, ub=cap_i)
        merged.add_var(f"e_ge[{h}]", lb=0.0, ub=cap_e)
        merged.add_var(f"e_g[{h}]", lb=0.0, ub=cap_i + cap_e)
        net = {}
        for u in unit_names:
            net[f"imp[{u},{h}]"] = 1.0
            net[f"exp[{u},{h}]"] = -1.0
        coefs = dict(net)
        coefs[f"e_gi[{h}]"] = -1.0
        merged.add_con(f"grid_imports[{h}]", coefs, "<=", 0.0, tag="grid.imports")
        coefs = {v: -c for v, c in net.items()}
        coefs[f"e_ge[{h}]"] = -1.0
        merged.add_con(f"grid_exports[{h}]", coefs, "<=", 0.0, tag="grid.exports")
        merged.add_con(
            f"grid_netflow[{h}]",
            {f"e_g[{h}]": 1.0, f"e_gi[{h}]": -1.0, f"e_ge[{h}]": -1.0},
            "==",
            0.0,
            tag="grid.netflow",
        )
        merged.add_con(
            f"grid_capacity[{h}]",
            {f"e_g[{h}]": 1.0, "agc": -1.0},
            "<=",
            grid.existing_capacity,
            tag="grid.capacity",
        )

    return EquilibriumSystem(
        scenario=scenario,
        model=merged,
        pairs=all_pairs,
        stationarity=all_rows,
        households=households,
        bilinear=bilinear,
        unit_caps=unit_caps,
        flow_caps=flow_caps,
        connection_count=scenario.connection_count,
    )


def dump_kkt(system_or_kkt, path: Optional[str] = None) -> str:
    """Human-readable audit listing of stationarity rows and pairs."""
    if isinstance(system_or_kkt, EquilibriumSystem):
        rows, pairs = system_or_kkt.stationarity, system_or_kkt.pairs
        title = system_or_kkt.model.name
    else:
        rows, pairs = system_or_kkt.stationarity, system_or_kkt.pairs
        title = "household"
    lines = [f"# optimality conditions: {title}", "", "## stationarity rows"]
    for row in rows:
        parts = []
        if row.const:
            parts.append(f"{row.const:+.6g}")
        for sym, mult in sorted(row.tariff.items()):
            parts.append(f"{mult:+.6g}*{sym}")
        for dual, coef in row.terms.items():
            parts.append(f"{coef:+.6g}*{dual}")
        lines.append(f"d/d {row.var}: " + " ".join(parts) + " = 0")
    lines.append("")
    lines.append("## complementarity pairs")
    for pair in pairs:
        expr = " ".join(
            f"{coef:+.6g}*{var}" for var, coef in sorted(pair.slack_coefs.items())
        )
        const = f"{pair.slack_const:+.6g} " if pair.slack_const else ""
        lines.append(f"[{pair.family}] 0 <= {const}{expr}  perp  {pair.dual} >= 0")
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
