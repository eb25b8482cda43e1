"""Batch experiment driver: rate assessment, equilibrium matrix, reports.

Outputs are plain CSV (header row, ``.`` decimal separator, UTF-8) plus a
JSON snapshot per solved equilibrium cell so results can be re-verified
offline with ``tariff-mpec verify``.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import (
    AgentKind,
    FixedTariff,
    GridCostScenario,
    ProfileLabel,
    ScenarioConfig,
    TariffKind,
    ValidationError,
)
from .agent_lp import (
    assess_energy_profiles,
    extract_schedule,
    household_bill,
    verify_dispatch,
)
from .equilibrium import EquilibriumResult, solve_equilibrium, unpack_result
from .linearize import audit_big_m
from .scenario import (
    BASE_TECH,
    BASELINE_NETWORK_RATE,
    V2G_SUBMETERING_TECH,
    baseline_fleet,
    build_price_book,
    build_scenario,
    make_agent,
)
from .solver import MILPLimits, MILPStatus


@dataclass(frozen=True)
class ExperimentCell:
    tariff_kind: TariffKind
    tech: str
    grid: GridCostScenario

    @property
    def name(self) -> str:
        return f"{self.tariff_kind.value}__{self.tech}__{self.grid.value}"


@dataclass
class ExperimentMatrix:
    name: str = "matrix"
    tariff_kinds: tuple = (TariffKind.PURE_VOLUMETRIC, TariffKind.THREE_PART)
    techs: tuple = (BASE_TECH, V2G_SUBMETERING_TECH)
    grids: tuple = (
        GridCostScenario.FULL_SUNK,
        GridCostScenario.HALF,
        GridCostScenario.FULL_PROSPECTIVE,
    )
    horizon: int = 48
    hours_per_slot: float = 1.0
    tariff_bits: int = 10
    recovery_band: float = 0.001
    pv_capex: float = 900.0

    def cells(self) -> list:
        return [
            ExperimentCell(tk, tech, grid)
            for tk in self.tariff_kinds
            for tech in self.techs
            for grid in self.grids
        ]

    def scenario_for(self, cell: ExperimentCell) -> ScenarioConfig:
        return build_scenario(
            name=cell.name,
            tariff_kind=cell.tariff_kind,
            grid=cell.grid,
            tech=cell.tech,
            horizon=self.horizon,
            hours_per_slot=self.hours_per_slot,
            recovery_band=self.recovery_band,
            tariff_bits=self.tariff_bits,
            pv_capex=self.pv_capex,
        )


_MATRIX_TARIFFS = {t.value: t for t in TariffKind}
_MATRIX_GRIDS = {g.value: g for g in GridCostScenario}
_MATRIX_TECHS = (BASE_TECH, V2G_SUBMETERING_TECH)


def load_matrix(path: str) -> ExperimentMatrix:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    hz = raw.get("horizon", {})
    mx = raw.get("matrix", {})
    lz = raw.get("linearization", {})
    tariffs = tuple(
        _MATRIX_TARIFFS[t] for t in mx.get("tariffs", list(_MATRIX_TARIFFS))
    )
    techs = tuple(mx.get("techs", list(_MATRIX_TECHS)))
    for tech in techs:
        if tech not in _MATRIX_TECHS:
            raise ValidationError(f"[matrix].techs entries must be in {_MATRIX_TECHS}")
    grids = tuple(_MATRIX_GRIDS[g] for g in mx.get("grids", list(_MATRIX_GRIDS)))
    return ExperimentMatrix(
        name=raw.get("name", Path(path).stem),
        tariff_kinds=tariffs,
        techs=techs,
        grids=grids,
        horizon=int(hz.get("slots", 48)),
        hours_per_slot=float(hz.get("hours_per_slot", 1.0)),
        tariff_bits=int(lz.get("tariff_bits", 10)),
        recovery_band=float(hz.get("recovery_band", 0.001)),
        pv_capex=float(raw.get("profiles", {}).get("pv_capex", 900.0)),
    )


# ---------------------------------------------------------------------------
# rate assessment (single households, fixed network charges)
# ---------------------------------------------------------------------------

ASSESSMENT_FIELDS = [
    "panel",
    "rate",
    "meters",
    "total_cost",
    "energy_cost",
    "network_cost",
    "der_cost",
    "coincident_peak_kw",
    "pv_kw",
    "battery_kwh",
    "dispatch_flags",
]


def assessment_candidates(book) -> list:
    return [
        book.assignment(ProfileLabel.FLAT),
        book.assignment(ProfileLabel.TOU1),
        book.assignment(ProfileLabel.TOU2),
        book.assignment(ProfileLabel.FLAT, ProfileLabel.TOU1),
        book.assignment(ProfileLabel.FLAT, ProfileLabel.TOU2),
    ]


def run_assessment(
    horizon: int = 48,
    hours_per_slot: float = 1.0,
    network_rate: float = BASELINE_NETWORK_RATE,
    pv_capex: float = 900.0,
    panels: Optional[list] = None,
) -> list:
    """Rate-menu comparison rows for the EV-owning household panels.

    Network charges are fixed to the baseline volumetric rate; each panel
    is one household type solved under every rate candidate.
    """
    book = build_price_book(horizon, hours_per_slot)
    charges = FixedTariff(vnt=network_rate)
    scaling = 8760.0 / (horizon * hours_per_slot)
    candidates = assessment_candidates(book)
    if panels is None:
        panels = [
            ("passive_consumer_ev", AgentKind.CONSUMER_EV, False),
            ("active_consumer_ev_v2g", AgentKind.PROSUMER_EV, True),
            ("active_consumer_ev_no_v2g", AgentKind.PROSUMER_EV, False),
        ]
    rows = []
    for panel, kind, v2g in panels:
        agent = make_agent(
            panel,
            kind,
            candidates[0],
            horizon=horizon,
            hours_per_slot=hours_per_slot,
            v2g=v2g,
            pv_capex=pv_capex,
        )
        ranked = assess_energy_profiles(agent, candidates, charges, scaling)
        for row in ranked:
            flags = verify_dispatch(row.schedule)
            rows.append(
                {
                    "panel": panel,
                    "rate": row.assignment.describe(),
                    "meters": row.meters,
                    "total_cost": round(row.bill.total, 4),
                    "energy_cost": round(row.bill.energy_cost, 4),
                    "network_cost": round(row.bill.network_cost, 4),
                    "der_cost": round(row.bill.der_cost, 4),
                    "coincident_peak_kw": round(
                        row.schedule.coincident_peak / hours_per_slot, 4
                    ),
                    "pv_kw": round(row.schedule.pv_capacity, 4),
                    "battery_kwh": round(row.schedule.battery_capacity, 4),
                    "dispatch_flags": len(flags.flags),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# verification of a solved equilibrium cell
# ---------------------------------------------------------------------------


@dataclass
class CellVerification:
    cell: str
    checks: dict = field(default_factory=dict)  # name -> (passed, detail)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())

    def add(self, name: str, ok: bool, detail: str = ""):
        self.checks[name] = (bool(ok), detail)

    def describe(self) -> str:
        lines = [f"cell {self.cell}: {'PASS' if self.passed else 'FAIL'}"]
        for name, (ok, detail) in self.checks.items():
            lines.append(f"  [{'ok' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
        return "\n".join(lines)


def verify_solution(result: EquilibriumResult, tol: float = 1e-6) -> CellVerification:
    """Full audit of one solved cell: band, dispatch realism, pair products,
    big-M headroom, model feasibility, peak binding and bill additivity."""
    v = CellVerification(result.scenario.name)
    if not result.solved:
        v.add("solved", False, result.report.status.value)
        return v
    x = result.report.x
    model = result.milp.model
    scenario = result.scenario

    band = scenario.recovery_band * result.cost_n
    v.add(
        "cost_recovery_band",
        abs(result.revenue - result.cost_n) <= band + 1e-6,
        f"|{result.revenue:.3f} - {result.cost_n:.3f}| vs {band:.3f}",
    )
    violation = model.max_violation(x)
    v.add("milp_feasibility", violation <= 1e-5, f"max violation {violation:.2e}")

    x_by_name = {var.name: float(x[j]) for j, var in enumerate(model.vars)}
    worst_pair = 0.0
    for lp in result.milp.pairs:
        slack = max(lp.pair.slack_value(x_by_name), 0.0)
        dual = max(x_by_name[lp.pair.dual], 0.0)
        worst_pair = max(worst_pair, slack * dual)
    v.add("complementarity", worst_pair <= tol * 10, f"max slack*dual {worst_pair:.2e}")

    audit = audit_big_m(result.milp, x_by_name)
    v.add("big_m_audit", audit.clean, audit.describe() if not audit.clean else "")

    worst_flags = []
    for agent, hh_model, layout in result.milp.system.households:
        x_hh = np.array([x[model.var_index(var.name)] for var in hh_model.vars])
        schedule = extract_schedule(hh_model, layout, x_hh)
        report = verify_dispatch(schedule, tol)
        worst_flags.extend(report.flags)
    v.add(
        "dispatch_realism",
        not worst_flags,
        "; ".join(worst_flags[:4]) if worst_flags else "",
    )

    if result.tariffs.get("cnt", 0.0) > tol:
        worst = 0.0
        H = scenario.horizon
        for u in result.milp.system.unit_caps:
            p = x_by_name[f"peak[{u}]"]
            measured = max(
                x_by_name[f"imp[{u},{h}]"] + x_by_name[f"exp[{u},{h}]"] for h in range(1, H + 1)
            )
            worst = max(worst, abs(p - measured))
        v.add("peak_binding", worst <= 1e-5, f"max |p - measured| {worst:.2e}")

    resum = abs(result.total_bills - sum(
        h.bill.der_cost + h.bill.energy_cost + h.bill.network_cost for h in result.households
    ))
    v.add("bill_components_readd", resum <= 1e-9, f"residual {resum:.2e}")
    return v


# ---------------------------------------------------------------------------
# equilibrium matrix runner
# ---------------------------------------------------------------------------

MATRIX_FIELDS = [
    "cell",
    "tariff_structure",
    "technology",
    "grid_costs",
    "status",
    "solver",
    "gap",
    "total_network_cost",
    "recovered_revenue",
    "vnt",
    "cnt",
    "fnt",
    "agc_kw",
    "coincident_peak_kw",
    "objective",
    "verification",
]

HOUSEHOLD_FIELDS = [
    "cell",
    "agent",
    "kind",
    "total",
    "der_cost",
    "energy_cost",
    "network_cost",
    "measured_peak_kw",
    "pv_kw",
    "battery_kwh",
    "connections",
]


def run_matrix(
    matrix: ExperimentMatrix,
    backend: str = "internal",
    out_dir: Optional[str] = None,
    cells_filter: Optional[str] = None,
    limits: Optional[MILPLimits] = None,
    strict: bool = False,
) -> dict:
    """Solve every (tariff, technology, grid) cell and emit result tables.

    Returns {"results": {cell name: EquilibriumResult}, "rows": [...],
    "household_rows": [...], "verifications": {...}}.
    """
    limits = limits or MILPLimits()
    results = {}
    verifications = {}
    rows = []
    household_rows = []
    for cell in matrix.cells():
        if cells_filter and cells_filter not in cell.name:
            continue
        scenario = matrix.scenario_for(cell)
        result = solve_equilibrium(scenario, backend=backend, limits=limits)
        results[cell.name] = result
        verification = verify_solution(result)
        verifications[cell.name] = verification
        report = result.report
        rows.append(
            {
                "cell": cell.name,
                "tariff_structure": cell.tariff_kind.value,
                "technology": cell.tech,
                "grid_costs": cell.grid.value,
                "status": report.status.value,
                "solver": backend if backend == "internal" else "external",
                "gap": round(report.gap, 8) if math.isfinite(report.gap) else "",
                "total_network_cost": round(result.cost_n, 4) if result.solved else "",
                "recovered_revenue": round(result.revenue, 4) if result.solved else "",
                "vnt": round(result.tariffs.get("vnt", float("nan")), 8) if result.solved else "",
                "cnt": round(result.tariffs.get("cnt", float("nan")), 6) if result.solved else "",
                "fnt": round(result.tariffs.get("fnt", float("nan")), 4) if result.solved else "",
                "agc_kw": round(result.agc / matrix.hours_per_slot, 4) if result.solved else "",
                "coincident_peak_kw": round(
                    result.coincident_peak / matrix.hours_per_slot, 4
                )
                if result.solved
                else "",
                "objective": round(report.objective, 4) if result.solved else "",
                "verification": "pass" if verification.passed else "fail",
            }
        )
        if result.solved:
            for hh in result.households:
                household_rows.append(
                    {
                        "cell": cell.name,
                        "agent": hh.agent_id,
                        "kind": hh.kind,
                        "total": round(hh.bill.total, 4),
                        "der_cost": round(hh.bill.der_cost, 4),
                        "energy_cost": round(hh.bill.energy_cost, 4),
                        "network_cost": round(hh.bill.network_cost, 4),
                        "measured_peak_kw": round(hh.measured_peak / matrix.hours_per_slot, 4),
                        "pv_kw": round(hh.pv_capacity, 4),
                        "battery_kwh": round(hh.battery_capacity, 4),
                        "connections": hh.units,
                    }
                )
        if out_dir:
            _write_cell_snapshot(Path(out_dir), matrix, cell, result, verification)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "matrix.csv", MATRIX_FIELDS, rows)
        write_csv(out / "households.csv", HOUSEHOLD_FIELDS, household_rows)
        gains = compare_consumer_ev_bills(results)
        if gains:
            write_csv(out / "gains.csv", GAINS_FIELDS, gains)
        verif_rows = [
            {
                "cell": name,
                "check": check,
                "passed": "pass" if ok else "fail",
                "detail": detail,
            }
            for name, v in verifications.items()
            for check, (ok, detail) in v.checks.items()
        ]
        write_csv(out / "verification.csv", ["cell", "check", "passed", "detail"], verif_rows)
    if strict and any(not v.passed for v in verifications.values()):
        raise VerificationFailure(
            "; ".join(n for n, v in verifications.items() if not v.passed)
        )
    return {
        "results": results,
        "rows": rows,
        "household_rows": household_rows,
        "verifications": verifications,
    }


class VerificationFailure(RuntimeError):
    pass


GAINS_FIELDS = [
    "tariff_structure",
    "grid_costs",
    "base_total",
    "submetering_total",
    "delta",
    "delta_pct",
    "direction",
]


def compare_consumer_ev_bills(results: dict) -> list:
    """EV-owning consumer bill change from adopting submetering (and the
    fleet's V2G technology), per tariff structure and grid cost split."""
    rows = []
    for tk in TariffKind:
        for grid in GridCostScenario:
            base_name = ExperimentCell(tk, BASE_TECH, grid).name
            sub_name = ExperimentCell(tk, V2G_SUBMETERING_TECH, grid).name
            base = results.get(base_name)
            sub = results.get(sub_name)
            if base is None or sub is None or not base.solved or not sub.solved:
                continue
            base_total = next(
                (h.bill.total for h in base.households if h.kind == "consumer_ev"), None
            )
            sub_total = next(
                (h.bill.total for h in sub.households if h.kind == "consumer_ev"), None
            )
            if base_total is None or sub_total is None:
                continue
            delta = sub_total - base_total
            rows.append(
                {
                    "tariff_structure": tk.value,
                    "grid_costs": grid.value,
                    "base_total": round(base_total, 4),
                    "submetering_total": round(sub_total, 4),
                    "delta": round(delta, 4),
                    "delta_pct": round(100.0 * delta / base_total, 4),
                    "direction": "falls" if delta < 0 else "rises",
                }
            )
    return rows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_csv(path, fields: list, rows: list):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_cell_snapshot(
    out: Path, matrix: ExperimentMatrix, cell: ExperimentCell, result, verification
):
    out.mkdir(parents=True, exist_ok=True)
    cells = out / "cells"
    cells.mkdir(exist_ok=True)
    snap = {
        "cell": cell.name,
        "matrix": {
            "tariff_kind": cell.tariff_kind.value,
            "tech": cell.tech,
            "grid": cell.grid.value,
            "horizon": matrix.horizon,
            "hours_per_slot": matrix.hours_per_slot,
            "tariff_bits": matrix.tariff_bits,
            "recovery_band": matrix.recovery_band,
            "pv_capex": matrix.pv_capex,
        },
        "status": result.report.status.value,
        "objective": result.report.objective if result.solved else None,
        "tariffs": result.tariffs,
        "cost_n": result.cost_n if result.solved else None,
        "revenue": result.revenue if result.solved else None,
        "verification_passed": verification.passed,
        "x": result.report.primal if result.solved else {},
    }
    with open(cells / f"{cell.name}.json", "w", encoding="utf-8") as fh:
        json.dump(snap, fh, indent=1)


def reverify_directory(out_dir: str) -> list:
    """Rebuild each snapshotted cell and re-run the verification suite on
    the stored solution point."""
    from .kkt import assemble_equilibrium
    from .linearize import build_milp
    from .solver.branch_bound import SolveReport

    cells_dir = Path(out_dir) / "cells"
    if not cells_dir.is_dir():
        raise ValidationError(f"{out_dir!r} holds no cells/ snapshots")
    verifications = []
    for snap_path in sorted(cells_dir.glob("*.json")):
        with open(snap_path, "r", encoding="utf-8") as fh:
            snap = json.load(fh)
        if not snap.get("x"):
            v = CellVerification(snap["cell"])
            v.add("solved", False, snap.get("status", "missing"))
            verifications.append(v)
            continue
        meta = snap["matrix"]
        matrix = ExperimentMatrix(
            horizon=meta["horizon"],
            hours_per_slot=meta["hours_per_slot"],
            tariff_bits=meta["tariff_bits"],
            recovery_band=meta["recovery_band"],
            pv_capex=meta.get("pv_capex", 900.0),
        )
        cell = ExperimentCell(
            TariffKind(meta["tariff_kind"]), meta["tech"], GridCostScenario(meta["grid"])
        )
        scenario = matrix.scenario_for(cell)
        system = assemble_equilibrium(scenario)
        milp = build_milp(system, scenario.linearization)
        x = np.zeros(milp.model.num_vars)
        stored = snap["x"]
        for j, var in enumerate(milp.model.vars):
            x[j] = stored.get(var.name, 0.0)
        report = SolveReport(
            status=MILPStatus(snap["status"]),
            objective=milp.model.objective_value(x),
            x=x,
            primal=stored,
        )
        result = unpack_result(milp, report)
        verifications.append(verify_solution(result))
    return verifications
