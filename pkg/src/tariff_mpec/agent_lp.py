"""Household cost-minimization LPs.

One LP per household.  A submetered household expands into two metered
units (house and EV charger) coupled by a behind-the-meter market; a
whole-house household is a single unit.  Simultaneous charge/discharge is
not forbidden by binaries: conversion losses make it unprofitable and the
solved dispatch is audited ex post (``verify_dispatch``).

Every constraint carries a formulation tag (FORMULATION.md) and the name
of its dual multiplier; variable nonnegativity is tracked the same way, so
the optimality conditions can be derived mechanically from the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import Agent, FixedTariff, RateAssignment, ValidationError
from .lp import Model
from .solver.simplex import LPSolution, LPStatus, solve_model


@dataclass(frozen=True)
class UnitLayout:
    """Variable families present in one metered unit."""

    name: str
    has_ev: bool
    has_der: bool
    local: bool  # behind-the-meter flows present (submetered pair)


@dataclass(frozen=True)
class HouseholdLayout:
    agent: Agent
    scaling: float  # W
    units: tuple

    @property
    def unit_names(self) -> tuple:
        return tuple(u.name for u in self.units)


def _vn(family: str, unit: str, h: Optional[int] = None) -> str:
    return f"{family}[{unit}]" if h is None else f"{family}[{unit},{h}]"


def build_household_lp(agent: Agent, scaling: float) -> tuple:
    """(Model, HouseholdLayout) for one household.

    Tariff charges stay symbolic (``vnt``/``cnt``/``fnt`` multipliers on the
    objective); pass numeric values at solve time or map the symbols onto
    tariff columns when assembling the equilibrium.
    """
    H = agent.horizon
    W = scaling
    m = Model(f"household:{agent.id}")

    units = []
    if agent.submetered:
        units.append(UnitLayout(agent.id, has_ev=False, has_der=agent.kind.can_invest, local=True))
        units.append(UnitLayout(f"{agent.id}/ev", has_ev=True, has_der=False, local=True))
    else:
        units.append(
            UnitLayout(
                agent.id, has_ev=agent.kind.has_ev, has_der=agent.kind.can_invest, local=False
            )
        )
    layout = HouseholdLayout(agent=agent, scaling=W, units=tuple(units))

    prices = {units[0].name: agent.rate.house}
    if agent.submetered:
        prices[units[1].name] = agent.rate.ev

    ev = agent.ev
    st = agent.storage

    # variables
    for unit in units:
        u = unit.name
        price = prices[u]
        for h in range(1, H + 1):
            j = m.add_var(
                _vn("imp", u, h), nonneg_dual=f"mu_imp[{u},{h}]", nonneg_tag="nonneg.imp"
            )
            m.add_obj(j, W * price.buy[h - 1], tariff={"vnt": W})
            j = m.add_var(
                _vn("exp", u, h), nonneg_dual=f"mu_exp[{u},{h}]", nonneg_tag="nonneg.exp"
            )
            m.add_obj(j, -W * price.sell[h - 1], tariff={"vnt": -W * _nm_placeholder})
        if unit.local:
            for h in range(1, H + 1):
                m.add_var(
                    _vn("loc_imp", u, h),
                    nonneg_dual=f"mu_loc_imp[{u},{h}]",
                    nonneg_tag="nonneg.loc_imp",
                )
                m.add_var(
                    _vn("loc_exp", u, h),
                    nonneg_dual=f"mu_loc_exp[{u},{h}]",
                    nonneg_tag="nonneg.loc_exp",
                )
        if unit.has_ev:
            for h in range(1, H + 1):
                m.add_var(
                    _vn("ev_ch", u, h),
                    nonneg_dual=f"mu_ev_ch[{u},{h}]",
                    nonneg_tag="nonneg.ev_charge",
                )
                m.add_var(
                    _vn("ev_dis", u, h),
                    nonneg_dual=f"mu_ev_dis[{u},{h}]",
                    nonneg_tag="nonneg.ev_discharge",
                )
                m.add_var(
                    _vn("ev_soc", u, h),
                    nonneg_dual=f"mu_ev_soc[{u},{h}]",
                    nonneg_tag="nonneg.ev_soc",
                )
        if unit.has_der:
            for h in range(1, H + 1):
                m.add_var(
                    _vn("batt_ch", u, h),
                    nonneg_dual=f"mu_batt_ch[{u},{h}]",
                    nonneg_tag="nonneg.batt_charge",
                )
                m.add_var(
                    _vn("batt_dis", u, h),
                    nonneg_dual=f"mu_batt_dis[{u},{h}]",
                    nonneg_tag="nonneg.batt_discharge",
                )
                m.add_var(
                    _vn("batt_soc", u, h),
                    nonneg_dual=f"mu_batt_soc[{u},{h}]",
                    nonneg_tag="nonneg.batt_soc",
                )
            j = m.add_var(
                _vn("pv_cap", u), nonneg_dual=f"mu_pv_cap[{u}]", nonneg_tag="nonneg.pv_cap"
            )
            m.add_obj(j, st.annualized_cost_pv)
            j = m.add_var(
                _vn("batt_cap", u),
                nonneg_dual=f"mu_batt_cap[{u}]",
                nonneg_tag="nonneg.batt_cap",
            )
            m.add_obj(j, st.annualized_cost_battery)
        # measured peak: free variable, pressed onto max(imp+exp) by its rows
        j = m.add_var(_vn("peak", u), lb=-np.inf)
        m.add_obj(j, 0.0, tariff={"cnt": 1.0})
        m.offset_tariff["fnt"] = m.offset_tariff.get("fnt", 0.0) + 1.0

    # constraints
    for unit in units:
        u = unit.name
        load = agent.load if unit.name == agent.id else np.zeros(H)
        gen = agent.solar_availability if unit.has_der else np.zeros(H)
        alpha = 1.0 if unit.local else 0.0
        for h in range(1, H + 1):
            coefs = {_vn("imp", u, h): 1.0, _vn("exp", u, h): -1.0}
            if unit.has_ev:
                coefs[_vn("ev_ch", u, h)] = -1.0
                coefs[_vn("ev_dis", u, h)] = 1.0
            if unit.has_der:
                coefs[_vn("batt_ch", u, h)] = -1.0
                coefs[_vn("batt_dis", u, h)] = 1.0
                if gen[h - 1] != 0.0:
                    coefs[_vn("pv_cap", u)] = gen[h - 1]
            if alpha:
                coefs[_vn("loc_imp", u, h)] = 1.0
                coefs[_vn("loc_exp", u, h)] = -1.0
            m.add_con(
                f"balance[{u},{h}]",
                coefs,
                "==",
                float(load[h - 1]),
                tag="balance",
                dual=f"lam_balance[{u},{h}]",
            )
            m.add_con(
                f"peak[{u},{h}]",
                {_vn("imp", u, h): 1.0, _vn("exp", u, h): 1.0, _vn("peak", u): -1.0},
                "<=",
                0.0,
                tag="peak",
                dual=f"mu_peak[{u},{h}]",
            )
        if unit.has_ev:
            for h in range(1, H + 1):
                coefs = {
                    _vn("ev_soc", u, h): 1.0,
                    _vn("ev_ch", u, h): -(1.0 - ev.converter_loss),
                    _vn("ev_dis", u, h): 1.0 + ev.converter_loss,
                }
                if h == 1:
                    # wrap-around: the pinned terminal state feeds hour 1
                    rhs = ev.soc_initial - ev.driving_need[0]
                    tag = "ev.soc.h1"
                else:
                    coefs[_vn("ev_soc", u, h - 1)] = -(1.0 - ev.self_discharge)
                    rhs = -ev.driving_need[h - 1]
                    tag = "ev.soc"
                m.add_con(
                    f"ev_soc[{u},{h}]", coefs, "==", rhs, tag=tag, dual=f"lam_ev_soc[{u},{h}]"
                )
            m.add_con(
                f"ev_pin[{u}]",
                {_vn("ev_soc", u, H): 1.0},
                "==",
                ev.soc_initial,
                tag="ev.soc.pin",
                dual=f"lam_ev_pin[{u}]",
            )
            for h in range(1, H + 1):
                m.add_con(
                    f"ev_soc_max[{u},{h}]",
                    {_vn("ev_soc", u, h): 1.0},
                    "<=",
                    ev.soc_max,
                    tag="ev.soc.max",
                    dual=f"mu_ev_soc_max[{u},{h}]",
                )
                m.add_con(
                    f"ev_soc_min[{u},{h}]",
                    {_vn("ev_soc", u, h): -1.0},
                    "<=",
                    -ev.soc_min,
                    tag="ev.soc.min",
                    dual=f"mu_ev_soc_min[{u},{h}]",
                )
                m.add_con(
                    f"ev_ch_cap[{u},{h}]",
                    {_vn("ev_ch", u, h): 1.0},
                    "<=",
                    float(ev.charge_power[h - 1]),
                    tag="ev.charge.cap",
                    dual=f"mu_ev_ch_cap[{u},{h}]",
                )
                m.add_con(
                    f"ev_dis_cap[{u},{h}]",
                    {_vn("ev_dis", u, h): 1.0},
                    "<=",
                    float(ev.discharge_power[h - 1]),
                    tag="ev.discharge.cap",
                    dual=f"mu_ev_dis_cap[{u},{h}]",
                )
        if unit.has_der:
            for h in range(1, H + 1):
                prev = H if h == 1 else h - 1
                m.add_con(
                    f"batt_soc[{u},{h}]",
                    {
                        _vn("batt_soc", u, h): 1.0,
                        _vn("batt_soc", u, prev): -(1.0 - st.self_discharge),
                        _vn("batt_ch", u, h): -(1.0 - st.converter_loss),
                        _vn("batt_dis", u, h): 1.0 + st.converter_loss,
                    },
                    "==",
                    0.0,
                    tag="batt.soc.cyclic" if h == 1 else "batt.soc",
                    dual=f"lam_batt_soc[{u},{h}]",
                )
            m.add_con(
                f"batt_cap_max[{u}]",
                {_vn("batt_cap", u): 1.0},
                "<=",
                agent.battery_limit,
                tag="batt.cap.max",
                dual=f"mu_batt_cap_max[{u}]",
            )
            m.add_con(
                f"pv_cap_max[{u}]",
                {_vn("pv_cap", u): 1.0},
                "<=",
                agent.pv_limit,
                tag="pv.cap.max",
                dual=f"mu_pv_cap_max[{u}]",
            )
            for h in range(1, H + 1):
                m.add_con(
                    f"batt_soc_max[{u},{h}]",
                    {_vn("batt_soc", u, h): 1.0, _vn("batt_cap", u): -st.soc_max_frac},
                    "<=",
                    0.0,
                    tag="batt.soc.max",
                    dual=f"mu_batt_soc_max[{u},{h}]",
                )
                m.add_con(
                    f"batt_soc_min[{u},{h}]",
                    {_vn("batt_soc", u, h): -1.0, _vn("batt_cap", u): st.soc_min_frac},
                    "<=",
                    0.0,
                    tag="batt.soc.min",
                    dual=f"mu_batt_soc_min[{u},{h}]",
                )
                m.add_con(
                    f"batt_ch_cap[{u},{h}]",
                    {_vn("batt_ch", u, h): 1.0, _vn("batt_cap", u): -st.charge_ratio},
                    "<=",
                    0.0,
                    tag="batt.charge.cap",
                    dual=f"mu_batt_ch_cap[{u},{h}]",
                )
                m.add_con(
                    f"batt_dis_cap[{u},{h}]",
                    {_vn("batt_dis", u, h): 1.0, _vn("batt_cap", u): -st.discharge_ratio},
                    "<=",
                    0.0,
                    tag="batt.discharge.cap",
                    dual=f"mu_batt_dis_cap[{u},{h}]",
                )

    if agent.submetered:
        house, evu = units[0].name, units[1].name
        gen = agent.solar_availability if units[0].has_der else np.zeros(H)
        for h in range(1, H + 1):
            m.add_con(
                f"local_market[{agent.id},{h}]",
                {
                    _vn("loc_imp", house, h): 1.0,
                    _vn("loc_exp", house, h): -1.0,
                    _vn("loc_imp", evu, h): 1.0,
                    _vn("loc_exp", evu, h): -1.0,
                },
                "==",
                0.0,
                tag="local.market",
                dual=f"lam_local[{agent.id},{h}]",
            )
            # the charger can only draw house battery discharge or solar
            coefs = {_vn("loc_imp", evu, h): 1.0}
            if units[0].has_der:
                coefs[_vn("batt_dis", house, h)] = -1.0
                if gen[h - 1] != 0.0:
                    coefs[_vn("pv_cap", house)] = -gen[h - 1]
            m.add_con(
                f"local_ev_supply[{agent.id},{h}]",
                coefs,
                "<=",
                0.0,
                tag="local.ev.supply",
                dual=f"mu_loc_ev_supply[{agent.id},{h}]",
            )
            # the house can only draw what the vehicle discharges
            m.add_con(
                f"local_house_supply[{agent.id},{h}]",
                {_vn("loc_imp", house, h): 1.0, _vn("ev_dis", evu, h): -1.0},
                "<=",
                0.0,
                tag="local.house.supply",
                dual=f"mu_loc_house_supply[{agent.id},{h}]",
            )

    return m, layout


# Net-metering enters the export objective coefficient as -W * NM * vnt.
# The builder stores the multiplier for NM = 1 and the solve/assembly path
# rescales it by the configured NM; a module-level constant keeps the
# builder free of a tariff argument.
_nm_placeholder = 1.0


def tariff_values(tariff: FixedTariff) -> dict:
    return {
        "vnt": tariff.vnt,
        "cnt": tariff.cnt,
        "fnt": tariff.fnt,
    }


def _rescale_nm(model: Model, layout: HouseholdLayout, net_metering: int):
    """Fix export coefficients for the configured net-metering flag."""
    for unit in layout.units:
        for h in range(1, layout.agent.horizon + 1):
            j = model.var_index(_vn("exp", unit.name, h))
            terms = model.obj_tariff.get(j)
            if terms is not None:
                terms["vnt"] = -layout.scaling * net_metering
                if terms["vnt"] == 0.0:
                    del terms["vnt"]
                    if not terms:
                        del model.obj_tariff[j]


def build_household(agent: Agent, scaling: float, net_metering: int = 0) -> tuple:
    model, layout = build_household_lp(agent, scaling)
    _rescale_nm(model, layout, net_metering)
    return model, layout


def solve_household(
    agent: Agent, tariff: FixedTariff, scaling: float
) -> tuple:
    """(model, layout, LPSolution) at fixed network charges."""
    model, layout = build_household(agent, scaling, tariff.net_metering)
    sol = solve_model(model, tariff=tariff_values(tariff))
    return model, layout, sol


@dataclass
class UnitDispatch:
    grid_import: np.ndarray
    grid_export: np.ndarray
    local_import: Optional[np.ndarray]
    local_export: Optional[np.ndarray]
    ev_charge: Optional[np.ndarray]
    ev_discharge: Optional[np.ndarray]
    ev_soc: Optional[np.ndarray]
    batt_charge: Optional[np.ndarray]
    batt_discharge: Optional[np.ndarray]
    batt_soc: Optional[np.ndarray]
    peak_var: float
    pv_capacity: float
    battery_capacity: float

    @property
    def measured_peak(self) -> float:
        return float(np.max(self.grid_import + self.grid_export))


@dataclass
class DispatchSchedule:
    agent: Agent
    scaling: float
    units: dict  # unit name -> UnitDispatch

    def net_grid_profile(self) -> np.ndarray:
        total = None
        for unit in self.units.values():
            net = unit.grid_import - unit.grid_export
            total = net if total is None else total + net
        return total

    @property
    def coincident_peak(self) -> float:
        return float(np.max(np.abs(self.net_grid_profile())))

    @property
    def pv_capacity(self) -> float:
        return sum(u.pv_capacity for u in self.units.values())

    @property
    def battery_capacity(self) -> float:
        return sum(u.battery_capacity for u in self.units.values())


@dataclass(frozen=True)
class AgentBill:
    der_cost: float
    energy_cost: float
    network_cost: float

    @property
    def total(self) -> float:
        return self.der_cost + self.energy_cost + self.network_cost


def extract_schedule(model: Model, layout: HouseholdLayout, x: np.ndarray) -> DispatchSchedule:
    H = layout.agent.horizon

    def arr(family, unit):
        if not model.has_var(_vn(family, unit, 1)):
            return None
        return np.array([x[model.var_index(_vn(family, unit, h))] for h in range(1, H + 1)])

    def scalar(family, unit):
        name = _vn(family, unit)
        return float(x[model.var_index(name)]) if model.has_var(name) else 0.0

    units = {}
    for unit in layout.units:
        u = unit.name
        units[u] = UnitDispatch(
            grid_import=arr("imp", u),
            grid_export=arr("exp", u),
            local_import=arr("loc_imp", u),
            local_export=arr("loc_exp", u),
            ev_charge=arr("ev_ch", u),
            ev_discharge=arr("ev_dis", u),
            ev_soc=arr("ev_soc", u),
            batt_charge=arr("batt_ch", u),
            batt_discharge=arr("batt_dis", u),
            batt_soc=arr("batt_soc", u),
            peak_var=scalar("peak", u),
            pv_capacity=scalar("pv_cap", u),
            battery_capacity=scalar("batt_cap", u),
        )
    return DispatchSchedule(agent=layout.agent, scaling=layout.scaling, units=units)


def household_bill(
    model: Model,
    layout: HouseholdLayout,
    x: np.ndarray,
    tariff: FixedTariff,
) -> AgentBill:
    """Cost components at the solved dispatch; totals match the LP objective."""
    agent = layout.agent
    W = layout.scaling
    H = agent.horizon
    prices = {layout.units[0].name: agent.rate.house}
    if agent.submetered:
        prices[layout.units[1].name] = agent.rate.ev
    der = 0.0
    energy = 0.0
    network = 0.0
    for unit in layout.units:
        u = unit.name
        price = prices[u]
        imp = np.array([x[model.var_index(_vn("imp", u, h))] for h in range(1, H + 1)])
        exp = np.array([x[model.var_index(_vn("exp", u, h))] for h in range(1, H + 1)])
        energy += W * float(imp @ price.buy - exp @ price.sell)
        network += W * float(imp.sum() - tariff.net_metering * exp.sum()) * tariff.vnt
        network += tariff.fnt
        if tariff.cnt > 0.0:
            network += tariff.cnt * float(np.max(imp + exp))
        if unit.has_der:
            der += agent.storage.annualized_cost_pv * float(x[model.var_index(_vn("pv_cap", u))])
            der += agent.storage.annualized_cost_battery * float(
                x[model.var_index(_vn("batt_cap", u))]
            )
    return AgentBill(der_cost=der, energy_cost=energy, network_cost=network)


@dataclass
class VerificationReport:
    flags: list = field(default_factory=list)
    max_balance_residual: float = 0.0
    max_soc_violation: float = 0.0
    max_simultaneous_product: float = 0.0

    @property
    def clean(self) -> bool:
        return not self.flags


def verify_dispatch(schedule: DispatchSchedule, tol: float = 1e-6) -> VerificationReport:
    """Ex-post realism audit of a solved dispatch.

    Flags any hour where a storage device charges and discharges at once or
    the meter imports and exports at once, and reports balance residuals and
    SOC-bound violations.
    """
    report = VerificationReport()
    agent = schedule.agent
    H = agent.horizon

    def check_product(name, unit_name, a, b):
        if a is None or b is None:
            return
        prod = a * b
        worst = float(np.max(prod)) if len(prod) else 0.0
        report.max_simultaneous_product = max(report.max_simultaneous_product, worst)
        for h in np.nonzero(prod > tol)[0]:
            report.flags.append(f"{name} in hour {h + 1} of {unit_name} (product {prod[h]:.3e})")

    local_net = np.zeros(H)
    for u, d in schedule.units.items():
        check_product("simultaneous import/export", u, d.grid_import, d.grid_export)
        check_product("simultaneous EV charge/discharge", u, d.ev_charge, d.ev_discharge)
        check_product("simultaneous battery charge/discharge", u, d.batt_charge, d.batt_discharge)
        load = agent.load if u == agent.id else np.zeros(H)
        gen = agent.solar_availability * d.pv_capacity if d.batt_soc is not None else np.zeros(H)
        supply = d.grid_import - d.grid_export + gen
        if d.ev_charge is not None:
            supply += d.ev_discharge - d.ev_charge
        if d.batt_charge is not None:
            supply += d.batt_discharge - d.batt_charge
        if d.local_import is not None:
            supply += d.local_import - d.local_export
            local_net += d.local_import - d.local_export
        residual = float(np.max(np.abs(supply - load)))
        report.max_balance_residual = max(report.max_balance_residual, residual)
        if residual > tol:
            report.flags.append(f"energy balance residual {residual:.3e} in {u}")
        if d.ev_soc is not None and agent.ev is not None:
            lo = float(np.min(d.ev_soc - agent.ev.soc_min))
            hi = float(np.min(agent.ev.soc_max - d.ev_soc))
            worst = max(0.0, -min(lo, hi))
            report.max_soc_violation = max(report.max_soc_violation, worst)
            if worst > tol:
                report.flags.append(f"EV SOC bound violated by {worst:.3e} in {u}")
        if d.batt_soc is not None and agent.storage is not None:
            lo = float(np.min(d.batt_soc - agent.storage.soc_min_frac * d.battery_capacity))
            hi = float(np.min(agent.storage.soc_max_frac * d.battery_capacity - d.batt_soc))
            worst = max(0.0, -min(lo, hi))
            report.max_soc_violation = max(report.max_soc_violation, worst)
            if worst > tol:
                report.flags.append(f"battery SOC bound violated by {worst:.3e} in {u}")
    if np.max(np.abs(local_net)) > tol:
        report.flags.append("behind-the-meter flows do not net out")
    return report


@dataclass
class AssessmentRow:
    assignment: RateAssignment
    bill: AgentBill
    schedule: DispatchSchedule
    status: LPStatus

    @property
    def meters(self) -> int:
        return 2 if self.assignment.submetered else 1


def assess_energy_profiles(
    agent: Agent,
    candidates: list,
    network_charges: FixedTariff,
    scaling: float,
) -> list:
    """Solve the household under each rate candidate and rank by total cost.

    Network charges are exogenous here.  Ties break toward fewer meters,
    then the lower measured peak.
    """
    if not candidates:
        raise ValidationError("assessment needs at least one rate candidate")
    rows = []
    for cand in candidates:
        variant = replace(agent, rate=cand, submetered=cand.submetered)
        model, layout, sol = solve_household(variant, network_charges, scaling)
        if not sol.optimal:
            raise ValidationError(
                f"assessment LP for {agent.id} under {cand.describe()} ended {sol.status.value}"
            )
        schedule = extract_schedule(model, layout, sol.x)
        bill = household_bill(model, layout, sol.x, network_charges)
        rows.append(AssessmentRow(cand, bill, schedule, sol.status))
    rows.sort(
        key=lambda r: (round(r.bill.total, 6), r.meters, round(r.schedule.coincident_peak, 6))
    )
    return rows
