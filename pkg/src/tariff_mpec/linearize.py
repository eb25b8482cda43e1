"""MILP construction: big-M complementarity gating and tariff discretization.

Each complementarity pair ``slack perp dual`` becomes

    slack <= M_primal * (1 - r)        dual <= M_dual * r

with a fresh binary ``r``.  The tariff-times-quantity products in the
cost-recovery band are handled by binary expansion of the tariff on a
dyadic grid: ``vnt = vnt_max * sum_k b_k 2^-k`` over ``tariff_bits`` bits
(grid step ``vnt_max * 2^-bits``; the largest representable level is one
step below ``vnt_max``).  Products with the billed aggregate quantity are
then exact at integer points via the standard product-with-binary rows.

Big-M constants come from a policy: uniform, per family, or calibrated
from corner-tariff household solves (twice the largest observed slack and
dual per constraint family, floored at 10 and capped at 1e6).  A solved
model should always be audited (``audit_big_m``): any slack or dual within
1% of its constant invalidates the reformulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    BigMPolicy,
    ComplementarityMode,
    FixedTariff,
    LinearizationConfig,
    ValidationError,
)
from .kkt import ComplementarityPair, EquilibriumSystem
from .lp import Model
from .agent_lp import tariff_values
from .solver.simplex import solve_model

BIG_M_FLOOR = 10.0
BIG_M_CAP = 1e6


@dataclass(frozen=True)
class FamilyBigM:
    family: str
    m_primal: float
    m_dual: float
    max_slack_seen: float = 0.0
    max_dual_seen: float = 0.0
    capped: bool = False


@dataclass(frozen=True)
class LinearizedPair:
    pair: ComplementarityPair
    binary: str
    m_primal: float
    m_dual: float


@dataclass
class MILPModel:
    """Completed mixed-integer model plus the metadata needed to audit it."""

    system: EquilibriumSystem
    model: Model
    pairs: list  # LinearizedPair
    bit_vars: dict  # tariff symbol -> list of bit variable names
    grid_steps: dict  # tariff symbol -> grid step
    big_m_table: dict  # family -> FamilyBigM
    mode: ComplementarityMode

    @property
    def binary_count(self) -> int:
        return len(self.model.binaries())

    def pair_values(self, x_by_name: dict) -> list:
        """(pair, slack, dual, binary) values at a solution point."""
        out = []
        for lp in self.pairs:
            slack = lp.pair.slack_value(x_by_name)
            dual = x_by_name[lp.pair.dual]
            r = x_by_name[lp.binary]
            out.append((lp, slack, dual, r))
        return out


def _probe_tariffs(system: EquilibriumSystem) -> list:
    t = system.scenario.tariff
    vnts = sorted({0.0, t.volumetric_max})
    cnts = sorted({0.0, t.capacity_max}) if t.capacity_allowed else [0.0]
    return [
        FixedTariff(vnt=v, cnt=c, fnt=0.0, net_metering=t.net_metering)
        for v in vnts
        for c in cnts
    ]


def calibrate_big_m(system: EquilibriumSystem) -> dict:
    """Per-family constants from household solves at tariff corner points."""
    max_slack: dict[str, float] = {}
    max_dual: dict[str, float] = {}
    from .kkt import derive_kkt  # local import to avoid a cycle at module load

    for tariff in _probe_tariffs(system):
        values = tariff_values(tariff)
        for agent, hh_model, layout in system.households:
            sol = solve_model(hh_model, tariff=values)
            if not sol.optimal:
                raise ValidationError(
                    f"big-M probe solve failed for {agent.id} at vnt={tariff.vnt}, "
                    f"cnt={tariff.cnt}: {sol.status.value} {sol.message}"
                )
            duals = sol.dual_by_name(hh_model)
            x_by_name = sol.x_by_name(hh_model)
            for pair in derive_kkt(hh_model).pairs:
                slack = pair.slack_value(x_by_name)
                dual = duals.get(pair.dual, 0.0)
                max_slack[pair.family] = max(max_slack.get(pair.family, 0.0), slack)
                max_dual[pair.family] = max(max_dual.get(pair.family, 0.0), dual)
    table = {}
    for family in sorted(set(max_slack) | set(max_dual)):
        mp = max(BIG_M_FLOOR, 2.0 * max_slack.get(family, 0.0))
        md = max(BIG_M_FLOOR, 2.0 * max_dual.get(family, 0.0))
        capped = mp > BIG_M_CAP or md > BIG_M_CAP
        table[family] = FamilyBigM(
            family=family,
            m_primal=min(mp, BIG_M_CAP),
            m_dual=min(md, BIG_M_CAP),
            max_slack_seen=max_slack.get(family, 0.0),
            max_dual_seen=max_dual.get(family, 0.0),
            capped=capped,
        )
    return table


def _big_m_table(system: EquilibriumSystem, policy: BigMPolicy) -> dict:
    families = sorted({p.family for p in system.pairs})
    if policy.mode == "uniform":
        return {
            f: FamilyBigM(f, policy.uniform_value, policy.uniform_value) for f in families
        }
    if policy.mode == "per_family":
        table = {}
        for f in families:
            entry = policy.per_family.get(f)
            if entry is None:
                table[f] = FamilyBigM(f, policy.uniform_value, policy.uniform_value)
            elif isinstance(entry, (int, float)):
                table[f] = FamilyBigM(f, float(entry), float(entry))
            else:
                table[f] = FamilyBigM(f, float(entry[0]), float(entry[1]))
        return table
    return calibrate_big_m(system)


def linearize_complementarities(
    model: Model, pairs: list, table: dict
) -> list:
    """Add gating binaries and both big-M rows for every pair."""
    out = []
    for pair in pairs:
        fam = table[pair.family]
        r = model.add_var(f"r[{pair.name}]", lb=0.0, ub=1.0, binary=True)
        # slack <= M_primal * (1 - r)
        coefs = {v: c for v, c in pair.slack_coefs.items()}
        coefs[f"r[{pair.name}]"] = fam.m_primal
        model.add_con(
            f"fa_primal[{pair.name}]",
            coefs,
            "<=",
            fam.m_primal - pair.slack_const,
            tag="linearization.primal",
        )
        # dual <= M_dual * r
        model.add_con(
            f"fa_dual[{pair.name}]",
            {pair.dual: 1.0, f"r[{pair.name}]": -fam.m_dual},
            "<=",
            0.0,
            tag="linearization.dual",
        )
        out.append(
            LinearizedPair(pair=pair, binary=f"r[{pair.name}]", m_primal=fam.m_primal, m_dual=fam.m_dual)
        )
    return out


def _add_product(model: Model, z: str, q: str, b: str, q_lo: float, q_hi: float):
    """Rows forcing z = q * b at binary points of b (q in [q_lo, q_hi])."""
    model.add_var(z, lb=min(q_lo, 0.0), ub=max(q_hi, 0.0))
    model.add_con(f"prod_hi1[{z}]", {z: 1.0, b: -q_hi}, "<=", 0.0, tag="tariff.product")
    model.add_con(f"prod_lo1[{z}]", {z: -1.0, b: q_lo}, "<=", 0.0, tag="tariff.product")
    model.add_con(
        f"prod_hi2[{z}]", {z: 1.0, q: -1.0, b: -q_lo}, "<=", -q_lo, tag="tariff.product"
    )
    model.add_con(
        f"prod_lo2[{z}]", {z: -1.0, q: 1.0, b: q_hi}, "<=", q_hi, tag="tariff.product"
    )


def expand_bilinear(system: EquilibriumSystem, model: Model, bits: int) -> tuple:
    """Discretize tariffs and linearize the recovery-band products.

    The billed quantities enter through aggregates: the yearly net volume
    ``qv`` and the peak sum ``qp``.  The band rows then couple recovered
    revenue to the grid cost.
    """
    scenario = system.scenario
    tariff = scenario.tariff
    W = scenario.scaling_factor
    H = scenario.horizon
    qb = system.quantity_bounds()
    bounds = system.tariff_bounds

    bit_vars: dict[str, list] = {}
    grid_steps: dict[str, float] = {}
    revenue: dict[str, float] = {"fnt": float(system.connection_count)}

    # yearly billed volume
    qv_lo, qv_hi = qb["qv"]
    model.add_var("qv", lb=qv_lo, ub=qv_hi)
    coefs = {"qv": 1.0}
    for u in system.unit_caps:
        for h in range(1, H + 1):
            coefs[f"imp[{u},{h}]"] = -W
            if tariff.net_metering != 0:
                coefs[f"exp[{u},{h}]"] = W * tariff.net_metering
    model.add_con("qv_def", coefs, "==", 0.0, tag="tariff.quantity")

    if bounds["vnt"] > 0:
        names = []
        expansion = {"vnt": 1.0}
        for k in range(1, bits + 1):
            b = model.add_var(f"bit[vnt,{k}]", lb=0.0, ub=1.0, binary=True)
            names.append(f"bit[vnt,{k}]")
            weight = bounds["vnt"] * 2.0 ** (-k)
            expansion[f"bit[vnt,{k}]"] = -weight
            z = f"zv[{k}]"
            _add_product(model, z, "qv", f"bit[vnt,{k}]", qv_lo, qv_hi)
            revenue[z] = weight
        model.add_con("vnt_expansion", expansion, "==", 0.0, tag="tariff.expansion")
        bit_vars["vnt"] = names
        grid_steps["vnt"] = bounds["vnt"] * 2.0 ** (-bits)

    if bounds["cnt"] > 0:
        qp_lo, qp_hi = qb["qp"]
        model.add_var("qp", lb=qp_lo, ub=qp_hi)
        coefs = {"qp": 1.0}
        for u in system.unit_caps:
            coefs[f"peak[{u}]"] = -1.0
        model.add_con("qp_def", coefs, "==", 0.0, tag="tariff.quantity")
        names = []
        expansion = {"cnt": 1.0}
        for k in range(1, bits + 1):
            b = model.add_var(f"bit[cnt,{k}]", lb=0.0, ub=1.0, binary=True)
            names.append(f"bit[cnt,{k}]")
            weight = bounds["cnt"] * 2.0 ** (-k)
            expansion[f"bit[cnt,{k}]"] = -weight
            z = f"zc[{k}]"
            _add_product(model, z, "qp", f"bit[cnt,{k}]", qp_lo, qp_hi)
            revenue[z] = weight
        model.add_con("cnt_expansion", expansion, "==", 0.0, tag="tariff.expansion")
        bit_vars["cnt"] = names
        grid_steps["cnt"] = bounds["cnt"] * 2.0 ** (-bits)

    # cost-recovery band around Cost_N = sunk + incremental * agc
    grid = scenario.grid_costs
    delta = scenario.recovery_band
    upper = dict(revenue)
    upper["agc"] = upper.get("agc", 0.0) - (1.0 + delta) * grid.incremental_capacity_cost
    model.add_con(
        "recovery_upper", upper, "<=", (1.0 + delta) * grid.sunk_costs, tag="recovery.upper"
    )
    lower = {v: -c for v, c in revenue.items()}
    lower["agc"] = lower.get("agc", 0.0) + (1.0 - delta) * grid.incremental_capacity_cost
    model.add_con(
        "recovery_lower", lower, "<=", -(1.0 - delta) * grid.sunk_costs, tag="recovery.lower"
    )
    return bit_vars, grid_steps


def build_milp(
    system: EquilibriumSystem, config: Optional[LinearizationConfig] = None
) -> MILPModel:
    """Full MILP for an equilibrium system under a linearization config."""
    if config is None:
        config = system.scenario.linearization
    if config.complementarity_mode is ComplementarityMode.SOS1:
        raise ValidationError(
            "SOS1 pair encoding is an external-backend contract; the internal "
            "pipeline supports 'bigm' and 'enum'"
        )
    if (
        config.complementarity_mode is ComplementarityMode.ENUMERATE
        and len(system.pairs) > config.enumerate_cap
    ):
        raise ValidationError(
            f"enumerate mode allows at most {config.enumerate_cap} pairs, "
            f"got {len(system.pairs)}"
        )
    table = _big_m_table(system, config.big_m)
    model = system.model.copy()
    model.name = f"milp:{system.scenario.name}"
    pairs = linearize_complementarities(model, system.pairs, table)
    bit_vars, grid_steps = expand_bilinear(system, model, config.tariff_bits)
    return MILPModel(
        system=system,
        model=model,
        pairs=pairs,
        bit_vars=bit_vars,
        grid_steps=grid_steps,
        big_m_table=table,
        mode=config.complementarity_mode,
    )


@dataclass
class BigMAuditEntry:
    pair: str
    family: str
    kind: str  # "slack" or "dual"
    value: float
    limit: float

    @property
    def fraction(self) -> float:
        return self.value / self.limit if self.limit else 0.0


@dataclass
class BigMAuditReport:
    entries: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.entries

    def describe(self) -> str:
        if self.clean:
            return "big-M audit clean"
        lines = [f"{len(self.entries)} big-M values near their constants:"]
        for e in self.entries:
            lines.append(
                f"  {e.pair} [{e.family}] {e.kind}={e.value:.6g} vs M={e.limit:.6g}"
            )
        return "\n".join(lines)


def audit_big_m(milp: MILPModel, x_by_name: dict, threshold: float = 0.99) -> BigMAuditReport:
    """Flag slacks or duals within 1% of their big-M, which would mean the
    constants bind and the reformulation may have cut the true optimum."""
    report = BigMAuditReport()
    for lp, slack, dual, r in milp.pair_values(x_by_name):
        if slack >= threshold * lp.m_primal:
            report.entries.append(
                BigMAuditEntry(lp.pair.name, lp.pair.family, "slack", slack, lp.m_primal)
            )
        if dual >= threshold * lp.m_dual:
            report.entries.append(
                BigMAuditEntry(lp.pair.name, lp.pair.family, "dual", dual, lp.m_dual)
            )
    return report
