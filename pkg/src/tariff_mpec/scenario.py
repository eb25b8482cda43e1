"""Case-study calibration and scenario-file ingestion.

The shipped calibration models four household archetypes over a 48 h
horizon (one sunny and one cloudy day).  Scenario files are TOML with
sections ``[horizon]``, ``[tariff]``, ``[grid]``, ``[linearization]``,
``[profiles]`` and one ``[agents.<key>]`` table per household; every key
has a calibrated default so minimal files stay small.  See the README for
the full schema.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import (
    Agent,
    AgentKind,
    BigMPolicy,
    ComplementarityMode,
    EnergyPriceProfile,
    EVParams,
    GridCostScenario,
    GridCostStructure,
    LinearizationConfig,
    ProfileLabel,
    RateAssignment,
    ScenarioConfig,
    StorageParams,
    TariffKind,
    TariffStructure,
    ValidationError,
    annualize,
    ev_daily_energy_need,
)
from .profiles import (
    calibrate_tou,
    flat_profile,
    synthesize_load_profile,
    synthesize_solar_profile,
    tou_shape,
)

# Retail bill calibration (flat counterfactual).
RETAIL_PRICE = 0.163  # $/kWh all-in
BILL_SHARES = {"energy": 0.45, "network": 0.33, "other": 0.22}
FLAT_ENERGY_PRICE = 0.073035  # $/kWh
BASELINE_NETWORK_RATE = 0.053559  # $/kWh
OTHER_CHARGES_RATE = 0.035706  # $/kWh

# Household demand anchors.
CONSUMER_ANNUAL_KWH = 5500.0
PROSUMER_ANNUAL_KWH = 10000.0
CONSUMER_PEAK_KW = 3.2
PROSUMER_PEAK_KW = 4.8

# EV fleet assumptions.
EV_ANNUAL_KWH = 3500.0
EV_DAYS_PER_YEAR = 360.0
EV_BATTERY_KWH = 60.0
EV_SOC_MIN_KWH = 6.0
EV_SOC_MAX_KWH = 54.0
EV_CHARGER_KW = 7.0
EV_CONVERTER_LOSS = 0.05
EV_SELF_DISCHARGE = 0.0
EV_DEPARTURE_HOUR = 7
EV_RETURN_HOUR = 17
EV_SOC_INITIAL_FRACTION = 0.5  # never published; exposed in config

# DER technology assumptions.
DISCOUNT_RATE = 0.05
PV_CAPEX = 900.0  # $/kWp
PV_CAPEX_CONSERVATIVE = 1500.0
PV_LIFETIME_YEARS = 20
BATTERY_CAPEX = 150.0  # $/kWh
BATTERY_LIFETIME_YEARS = 10
BATTERY_CONVERTER_LOSS = 0.05
BATTERY_SELF_DISCHARGE_PER_HOUR = 0.001
BATTERY_SOC_MIN_FRAC = 0.10
BATTERY_SOC_MAX_FRAC = 0.90
BATTERY_POWER_RATIO = 0.5  # kW per kWh installed, both directions
PV_LIMIT_KWP = 10.0
BATTERY_LIMIT_KWH = 20.0

# Grid cost structure.
SUNK_COSTS = 2040.0  # $/yr for the four-household fleet
AVERAGE_SUNK_PER_AGENT = 510.0
AVERAGE_COINCIDENT_PEAK_KW = 4.0
IDSO_HALF = 0.5 * AVERAGE_SUNK_PER_AGENT / AVERAGE_COINCIDENT_PEAK_KW  # 63.75 $/kW
IDSO_FULL = AVERAGE_SUNK_PER_AGENT / AVERAGE_COINCIDENT_PEAK_KW  # 127.5 $/kW


@dataclass(frozen=True)
class PriceBook:
    """Calibrated retail rates available on one horizon grid."""

    horizon: int
    hours_per_slot: float
    profiles: dict  # ProfileLabel -> EnergyPriceProfile

    def get(self, label: ProfileLabel) -> EnergyPriceProfile:
        return self.profiles[label]

    def assignment(
        self, house: ProfileLabel, ev: Optional[ProfileLabel] = None
    ) -> RateAssignment:
        return RateAssignment(
            house=self.get(house), ev=self.get(ev) if ev is not None else None
        )


def build_price_book(
    horizon: int = 48,
    hours_per_slot: float = 1.0,
    flat_price: float = FLAT_ENERGY_PRICE,
    reference_load: Optional[np.ndarray] = None,
) -> PriceBook:
    """Flat plus both TOU rates, calibrated on the prosumer reference load.

    Calibrating on the larger prosumer profile keeps the energy bill of the
    reference household identical across rates while leaving a small
    positive residual for the peakier consumer profile, mirroring how the
    assessed rate menus behave.
    """
    if reference_load is None:
        reference_load = synthesize_load_profile(
            PROSUMER_ANNUAL_KWH, PROSUMER_PEAK_KW, horizon, hours_per_slot
        )
    flat = flat_profile(flat_price, horizon)
    profiles = {ProfileLabel.FLAT: flat}
    for label in (ProfileLabel.TOU1, ProfileLabel.TOU2):
        shape = tou_shape(label, horizon, hours_per_slot)
        profiles[label] = calibrate_tou(flat, shape, reference_load, label)
    return PriceBook(horizon=horizon, hours_per_slot=hours_per_slot, profiles=profiles)


def make_ev_params(
    horizon: int,
    hours_per_slot: float = 1.0,
    v2g: bool = False,
    charger_kw: float = EV_CHARGER_KW,
    soc_initial: Optional[float] = None,
    departure_hour: int = EV_DEPARTURE_HOUR,
    return_hour: int = EV_RETURN_HOUR,
) -> EVParams:
    """EV data on the horizon grid: away window, per-day driving withdrawal."""
    # charger availability per slot = hours at home within the slot
    fine_n = int(round(horizon * hours_per_slot))
    hod_fine = np.arange(fine_n) % 24.0
    home_fine = ~((hod_fine >= departure_hour) & (hod_fine < return_hour))
    home_hours = np.array([block.sum() for block in np.array_split(home_fine, horizon)])
    charge = charger_kw * home_hours.astype(float)
    discharge = charge.copy() if v2g else np.zeros(horizon)
    daily_need = ev_daily_energy_need(EV_ANNUAL_KWH, EV_DAYS_PER_YEAR)
    driving = np.zeros(horizon)
    days = int(round(horizon * hours_per_slot / 24.0))
    starts = np.arange(horizon) * hours_per_slot
    for day in range(max(days, 1)):
        target = day * 24.0 + departure_hour
        idx = int(np.searchsorted(starts, target, side="right") - 1)
        driving[idx] += daily_need
    if soc_initial is None:
        soc_initial = EV_SOC_INITIAL_FRACTION * EV_BATTERY_KWH
    return EVParams(
        battery_capacity=EV_BATTERY_KWH,
        soc_min=EV_SOC_MIN_KWH,
        soc_max=EV_SOC_MAX_KWH,
        soc_initial=soc_initial,
        charge_power=charge,
        discharge_power=discharge,
        driving_need=driving,
        converter_loss=EV_CONVERTER_LOSS,
        self_discharge=EV_SELF_DISCHARGE,
        departure_hour=departure_hour,
        return_hour=return_hour,
    )


def make_storage_params(
    hours_per_slot: float = 1.0, pv_capex: float = PV_CAPEX
) -> StorageParams:
    self_discharge = 1.0 - (1.0 - BATTERY_SELF_DISCHARGE_PER_HOUR) ** hours_per_slot
    return StorageParams(
        annualized_cost_pv=annualize(pv_capex, DISCOUNT_RATE, PV_LIFETIME_YEARS),
        annualized_cost_battery=annualize(
            BATTERY_CAPEX, DISCOUNT_RATE, BATTERY_LIFETIME_YEARS
        ),
        soc_min_frac=BATTERY_SOC_MIN_FRAC,
        soc_max_frac=BATTERY_SOC_MAX_FRAC,
        charge_ratio=BATTERY_POWER_RATIO * hours_per_slot,
        discharge_ratio=BATTERY_POWER_RATIO * hours_per_slot,
        converter_loss=BATTERY_CONVERTER_LOSS,
        self_discharge=self_discharge,
    )


def make_agent(
    agent_id: str,
    kind: AgentKind,
    rate: RateAssignment,
    horizon: int = 48,
    hours_per_slot: float = 1.0,
    v2g: bool = False,
    annual_kwh: Optional[float] = None,
    peak_kw: Optional[float] = None,
    pv_capex: float = PV_CAPEX,
    pv_limit: Optional[float] = None,
    battery_limit: Optional[float] = None,
    soc_initial: Optional[float] = None,
) -> Agent:
    """One calibrated household of the requested kind."""
    if annual_kwh is None:
        annual_kwh = PROSUMER_ANNUAL_KWH if kind.can_invest else CONSUMER_ANNUAL_KWH
    if peak_kw is None:
        peak_kw = PROSUMER_PEAK_KW if kind.can_invest else CONSUMER_PEAK_KW
    load = synthesize_load_profile(annual_kwh, peak_kw, horizon, hours_per_slot)
    solar = synthesize_solar_profile(horizon, hours_per_slot)
    ev = (
        make_ev_params(horizon, hours_per_slot, v2g=v2g, soc_initial=soc_initial)
        if kind.has_ev
        else None
    )
    storage = make_storage_params(hours_per_slot, pv_capex) if kind.can_invest else None
    return Agent(
        id=agent_id,
        kind=kind,
        load=load,
        solar_availability=solar,
        rate=rate,
        ev=ev,
        storage=storage,
        pv_limit=(PV_LIMIT_KWP if pv_limit is None else pv_limit) if kind.can_invest else 0.0,
        battery_limit=(BATTERY_LIMIT_KWH if battery_limit is None else battery_limit)
        if kind.can_invest
        else 0.0,
        submetered=rate.submetered,
        v2g_allowed=v2g,
    )


def grid_cost_structure(
    scenario: GridCostScenario,
    sunk_costs: float = SUNK_COSTS,
    idso_half: float = IDSO_HALF,
    idso_full: float = IDSO_FULL,
    existing_capacity: float = 0.0,
) -> GridCostStructure:
    if scenario is GridCostScenario.FULL_SUNK:
        return GridCostStructure(scenario, sunk_costs, 0.0, existing_capacity)
    if scenario is GridCostScenario.HALF:
        return GridCostStructure(scenario, 0.5 * sunk_costs, idso_half, existing_capacity)
    return GridCostStructure(scenario, 0.0, idso_full, existing_capacity)


# Rate policy per technology scenario, following the cost-efficient choices
# of the single-household assessment: with V2G and submetering available,
# EV-owning consumers split their meter (flat house, TOU1 charger) and
# EV-owning prosumers stay whole-house TOU1 with V2G.
BASE_TECH = "base"
V2G_SUBMETERING_TECH = "v2g_submetering"


def rate_policy(tech: str, book: PriceBook, kind: AgentKind) -> tuple:
    """(RateAssignment, v2g) for one agent kind under a technology scenario."""
    if tech not in (BASE_TECH, V2G_SUBMETERING_TECH):
        raise ValidationError(f"unknown technology scenario {tech!r}")
    advanced = tech == V2G_SUBMETERING_TECH
    if kind is AgentKind.CONSUMER:
        return book.assignment(ProfileLabel.FLAT), False
    if kind is AgentKind.PROSUMER:
        return book.assignment(ProfileLabel.TOU1), False
    if kind is AgentKind.CONSUMER_EV:
        if advanced:
            return book.assignment(ProfileLabel.FLAT, ProfileLabel.TOU1), False
        return book.assignment(ProfileLabel.FLAT), False
    if advanced:
        return book.assignment(ProfileLabel.TOU1), True
    return book.assignment(ProfileLabel.TOU1), False


def baseline_fleet(
    tech: str = BASE_TECH,
    horizon: int = 48,
    hours_per_slot: float = 1.0,
    book: Optional[PriceBook] = None,
    pv_capex: float = PV_CAPEX,
) -> tuple:
    """The four-household fleet under one technology scenario."""
    if book is None:
        book = build_price_book(horizon, hours_per_slot)
    agents = []
    for agent_id, kind in (
        ("consumer", AgentKind.CONSUMER),
        ("consumer_ev", AgentKind.CONSUMER_EV),
        ("prosumer", AgentKind.PROSUMER),
        ("prosumer_ev", AgentKind.PROSUMER_EV),
    ):
        rate, v2g = rate_policy(tech, book, kind)
        agents.append(
            make_agent(
                agent_id,
                kind,
                rate,
                horizon=horizon,
                hours_per_slot=hours_per_slot,
                v2g=v2g,
                pv_capex=pv_capex,
            )
        )
    return tuple(agents)


def build_scenario(
    name: str = "baseline",
    tariff_kind: TariffKind = TariffKind.PURE_VOLUMETRIC,
    grid: GridCostScenario = GridCostScenario.FULL_SUNK,
    tech: str = BASE_TECH,
    horizon: int = 48,
    hours_per_slot: float = 1.0,
    recovery_band: float = 0.001,
    tariff_bits: int = 10,
    pv_capex: float = PV_CAPEX,
    agents: Optional[tuple] = None,
    existing_capacity: float = 0.0,
    tariff: Optional[TariffStructure] = None,
    grid_costs: Optional[GridCostStructure] = None,
    linearization: Optional[LinearizationConfig] = None,
) -> ScenarioConfig:
    if agents is None:
        agents = baseline_fleet(tech, horizon, hours_per_slot, pv_capex=pv_capex)
    if tariff is None:
        tariff = TariffStructure(kind=tariff_kind)
    if grid_costs is None:
        grid_costs = grid_cost_structure(grid, existing_capacity=existing_capacity)
    if linearization is None:
        linearization = LinearizationConfig(tariff_bits=tariff_bits)
    return ScenarioConfig(
        name=name,
        agents=agents,
        tariff=tariff,
        grid_costs=grid_costs,
        horizon=horizon,
        hours_per_slot=hours_per_slot,
        recovery_band=recovery_band,
        linearization=linearization,
    )


def _require(table: dict, section: str, key: str, kinds, default=None):
    if key not in table:
        if default is not None:
            return default
        raise ValidationError(f"[{section}] missing required key {key!r}")
    value = table[key]
    if not isinstance(value, kinds):
        raise ValidationError(
            f"[{section}].{key}: expected {kinds}, got {type(value).__name__}"
        )
    return value


_KIND_BY_NAME = {k.value: k for k in AgentKind}
_LABEL_BY_NAME = {p.value: p for p in ProfileLabel}
_GRID_BY_NAME = {g.value: g for g in GridCostScenario}
_TARIFF_BY_NAME = {t.value: t for t in TariffKind}
_COMP_BY_NAME = {m.value: m for m in ComplementarityMode}


def load_scenario(path: str) -> ScenarioConfig:
    """Parse and validate a scenario file; defaults fill every omitted key."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"scenario file does not parse: {exc}") from exc
    return scenario_from_dict(raw)


def scenario_from_dict(raw: dict) -> ScenarioConfig:
    name = raw.get("name", "scenario")

    hz = raw.get("horizon", {})
    horizon = int(_require(hz, "horizon", "slots", (int,), default=48))
    hours_per_slot = float(_require(hz, "horizon", "hours_per_slot", (int, float), default=1.0))
    band = float(_require(hz, "horizon", "recovery_band", (int, float), default=0.001))
    if band <= 0:
        raise ValidationError("[horizon].recovery_band must be positive")

    tf = raw.get("tariff", {})
    kind_name = _require(tf, "tariff", "kind", (str,), default="pure_volumetric")
    if kind_name not in _TARIFF_BY_NAME:
        raise ValidationError(
            f"[tariff].kind must be one of {sorted(_TARIFF_BY_NAME)}, got {kind_name!r}"
        )
    tariff = TariffStructure(
        kind=_TARIFF_BY_NAME[kind_name],
        net_metering=int(_require(tf, "tariff", "net_metering", (int,), default=0)),
        volumetric_max=float(_require(tf, "tariff", "volumetric_max", (int, float), default=0.2)),
        capacity_max=float(_require(tf, "tariff", "capacity_max", (int, float), default=300.0)),
        fixed_max=float(_require(tf, "tariff", "fixed_max", (int, float), default=200.0)),
    )

    gr = raw.get("grid", {})
    grid_name = _require(gr, "grid", "scenario", (str,), default="full_sunk")
    if grid_name not in _GRID_BY_NAME:
        raise ValidationError(
            f"[grid].scenario must be one of {sorted(_GRID_BY_NAME)}, got {grid_name!r}"
        )
    grid_scenario = _GRID_BY_NAME[grid_name]
    grid_costs = grid_cost_structure(
        grid_scenario,
        sunk_costs=float(_require(gr, "grid", "sunk_costs", (int, float), default=SUNK_COSTS)),
        idso_half=float(_require(gr, "grid", "idso_half", (int, float), default=IDSO_HALF)),
        idso_full=float(_require(gr, "grid", "idso_full", (int, float), default=IDSO_FULL)),
        existing_capacity=float(
            _require(gr, "grid", "existing_capacity", (int, float), default=0.0)
        ),
    )

    lz = raw.get("linearization", {})
    big_m_raw = lz.get("big_m", "calibrated")
    if isinstance(big_m_raw, str):
        if big_m_raw != "calibrated":
            raise ValidationError("[linearization].big_m must be 'calibrated' or a number")
        policy = BigMPolicy(mode="calibrated")
    elif isinstance(big_m_raw, (int, float)):
        policy = BigMPolicy(mode="uniform", uniform_value=float(big_m_raw))
    else:
        raise ValidationError("[linearization].big_m must be 'calibrated' or a number")
    comp_name = _require(lz, "linearization", "complementarity_mode", (str,), default="bigm")
    if comp_name not in _COMP_BY_NAME:
        raise ValidationError(
            f"[linearization].complementarity_mode must be one of {sorted(_COMP_BY_NAME)}"
        )
    linearization = LinearizationConfig(
        big_m=policy,
        tariff_bits=int(_require(lz, "linearization", "tariff_bits", (int,), default=10)),
        complementarity_mode=_COMP_BY_NAME[comp_name],
        enumerate_cap=int(_require(lz, "linearization", "enumerate_cap", (int,), default=24)),
    )

    pr = raw.get("profiles", {})
    flat_price = float(
        _require(pr, "profiles", "flat_price", (int, float), default=FLAT_ENERGY_PRICE)
    )
    pv_capex = float(_require(pr, "profiles", "pv_capex", (int, float), default=PV_CAPEX))
    book = build_price_book(horizon, hours_per_slot, flat_price=flat_price)

    agents_raw = raw.get("agents", {})
    if not isinstance(agents_raw, dict) or not agents_raw:
        raise ValidationError("scenario needs at least one [agents.<key>] table")

    def sort_key(item):
        key = item[0]
        return (0, int(key)) if key.isdigit() else (1, key)

    agents = []
    for key, table in sorted(agents_raw.items(), key=sort_key):
        section = f"agents.{key}"
        if not isinstance(table, dict):
            raise ValidationError(f"[{section}] must be a table")
        kind_name = _require(table, section, "kind", (str,))
        if kind_name not in _KIND_BY_NAME:
            raise ValidationError(
                f"[{section}].kind must be one of {sorted(_KIND_BY_NAME)}, got {kind_name!r}"
            )
        kind = _KIND_BY_NAME[kind_name]
        agent_id = _require(table, section, "id", (str,), default=key)
        house_name = _require(table, section, "rate", (str,), default="flat")
        if house_name not in _LABEL_BY_NAME:
            raise ValidationError(f"[{section}].rate must be one of {sorted(_LABEL_BY_NAME)}")
        ev_rate_name = table.get("ev_rate")
        submetered = bool(table.get("submetered", ev_rate_name is not None))
        if submetered and ev_rate_name is None:
            raise ValidationError(f"[{section}]: submetered=true requires ev_rate")
        if submetered and not kind.has_ev:
            raise ValidationError(
                f"[{section}]: submetered=true but kind {kind.value!r} has no EV"
            )
        if ev_rate_name is not None and ev_rate_name not in _LABEL_BY_NAME:
            raise ValidationError(f"[{section}].ev_rate must be one of {sorted(_LABEL_BY_NAME)}")
        rate = book.assignment(
            _LABEL_BY_NAME[house_name],
            _LABEL_BY_NAME[ev_rate_name] if submetered else None,
        )
        agents.append(
            make_agent(
                agent_id,
                kind,
                rate,
                horizon=horizon,
                hours_per_slot=hours_per_slot,
                v2g=bool(table.get("v2g", False)),
                annual_kwh=table.get("annual_kwh"),
                peak_kw=table.get("peak_kw"),
                pv_capex=float(table.get("pv_capex", pv_capex)),
                pv_limit=table.get("pv_limit"),
                battery_limit=table.get("battery_limit"),
                soc_initial=table.get("ev_soc_initial"),
            )
        )
    ids = [a.id for a in agents]
    if len(set(ids)) != len(ids):
        raise ValidationError("agent ids must be unique")

    return ScenarioConfig(
        name=name,
        agents=tuple(agents),
        tariff=tariff,
        grid_costs=grid_costs,
        horizon=horizon,
        hours_per_slot=hours_per_slot,
        recovery_band=band,
        linearization=linearization,
    )
