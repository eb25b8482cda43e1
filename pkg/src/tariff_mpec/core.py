"""Domain types for the tariff-design toolkit.

Conventions used throughout the package:

- Hours are 1-based, ``h in [1, H]``; the cyclic predecessor of hour 1 is
  hour ``H`` (battery dynamics wrap around the horizon).
- Flows are kWh per slot, state of charge in kWh, capacities in kW / kWp /
  kWh, prices in $/kWh, charges in $/kWh, $/kW and $/customer.
- ``W`` scales one horizon to a year: with a native 48 h horizon,
  ``W = 8760 / H``.  Reduced horizons (single day, 2 h blocks) carry an
  ``hours_per_slot`` factor so that ``W * H * hours_per_slot = 8760``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

HOURS_PER_YEAR = 8760.0


class AgentKind(Enum):
    CONSUMER = "consumer"
    CONSUMER_EV = "consumer_ev"
    PROSUMER = "prosumer"
    PROSUMER_EV = "prosumer_ev"

    @property
    def has_ev(self) -> bool:
        return self in (AgentKind.CONSUMER_EV, AgentKind.PROSUMER_EV)

    @property
    def can_invest(self) -> bool:
        return self in (AgentKind.PROSUMER, AgentKind.PROSUMER_EV)


class ProfileLabel(Enum):
    FLAT = "flat"
    TOU1 = "tou1"
    TOU2 = "tou2"


class GridCostScenario(Enum):
    FULL_SUNK = "full_sunk"
    HALF = "half"
    FULL_PROSPECTIVE = "full_prospective"


class TariffKind(Enum):
    PURE_VOLUMETRIC = "pure_volumetric"
    THREE_PART = "three_part"


class ValidationError(ValueError):
    """A named model invariant was violated while building a scenario."""


# Export compensation: injections are paid this fraction of the buy price.
SELL_PRICE_FRACTION = 0.10


@dataclass(frozen=True)
class EnergyPriceProfile:
    """Per-hour buy/sell prices for one retail rate."""

    label: ProfileLabel
    buy: np.ndarray  # $/kWh, shape (H,)
    sell: np.ndarray  # $/kWh, shape (H,)

    def __post_init__(self):
        buy = np.asarray(self.buy, dtype=float)
        sell = np.asarray(self.sell, dtype=float)
        object.__setattr__(self, "buy", buy)
        object.__setattr__(self, "sell", sell)
        if buy.shape != sell.shape:
            raise ValidationError("price profile buy/sell length mismatch")
        if np.any(buy <= 0):
            raise ValidationError("buy prices must be strictly positive")
        if not np.allclose(sell, SELL_PRICE_FRACTION * buy, rtol=0, atol=1e-12):
            raise ValidationError(
                "sell prices must equal %.0f%% of buy prices" % (100 * SELL_PRICE_FRACTION)
            )

    @classmethod
    def from_buy(cls, label: ProfileLabel, buy) -> "EnergyPriceProfile":
        buy = np.asarray(buy, dtype=float)
        return cls(label=label, buy=buy, sell=SELL_PRICE_FRACTION * buy)

    @property
    def horizon(self) -> int:
        return len(self.buy)


@dataclass(frozen=True)
class RateAssignment:
    """Which retail rate(s) a household is billed on.

    One-meter households carry only ``house``; submetered households add a
    dedicated ``ev`` rate measured at the charger.
    """

    house: EnergyPriceProfile
    ev: Optional[EnergyPriceProfile] = None

    @property
    def submetered(self) -> bool:
        return self.ev is not None

    def describe(self) -> str:
        if self.ev is None:
            return self.house.label.value
        return f"{self.house.label.value}/{self.ev.label.value}"


@dataclass(frozen=True)
class EVParams:
    """Electric vehicle battery, charger and mobility parameters."""

    battery_capacity: float  # kWh
    soc_min: float  # kWh
    soc_max: float  # kWh
    soc_initial: float  # kWh, also the pinned terminal state
    charge_power: np.ndarray  # kWh per slot, 0 when away
    discharge_power: np.ndarray  # kWh per slot, 0 when away or without V2G
    driving_need: np.ndarray  # kWh withdrawn per slot
    converter_loss: float  # fraction lost per conversion
    self_discharge: float  # fraction per slot
    departure_hour: int  # hour of day the vehicle leaves home
    return_hour: int  # hour of day the vehicle plugs back in

    def __post_init__(self):
        for name in ("charge_power", "discharge_power", "driving_need"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (0 <= self.soc_min < self.soc_max <= self.battery_capacity):
            raise ValidationError("EV SOC bounds must satisfy 0 <= min < max <= capacity")
        if not (self.soc_min <= self.soc_initial <= self.soc_max):
            raise ValidationError("EV initial SOC outside its allowed band")
        if np.any(self.charge_power < 0) or np.any(self.discharge_power < 0):
            raise ValidationError("EV power limits must be nonnegative")
        if np.any(self.driving_need < 0):
            raise ValidationError("EV driving need must be nonnegative")


@dataclass(frozen=True)
class StorageParams:
    """Stationary battery technology assumptions (per kWh installed)."""

    annualized_cost_pv: float  # $/kWp/yr
    annualized_cost_battery: float  # $/kWh/yr
    soc_min_frac: float
    soc_max_frac: float
    charge_ratio: float  # kW per kWh installed
    discharge_ratio: float  # kW per kWh installed
    converter_loss: float
    self_discharge: float  # fraction per slot

    def __post_init__(self):
        if not (0 <= self.soc_min_frac < self.soc_max_frac <= 1):
            raise ValidationError("battery SOC fractions must satisfy 0 <= min < max <= 1")
        if self.charge_ratio <= 0 or self.discharge_ratio <= 0:
            raise ValidationError("battery power ratios must be positive")
        if not (0 <= self.converter_loss < 1) or not (0 <= self.self_discharge < 1):
            raise ValidationError("loss fractions must lie in [0, 1)")


@dataclass(frozen=True)
class Agent:
    """One household archetype with its profiles and technology options."""

    id: str
    kind: AgentKind
    load: np.ndarray  # kWh per slot
    solar_availability: np.ndarray  # kW output per kWp installed, in [0, 1]
    rate: RateAssignment
    ev: Optional[EVParams] = None
    storage: Optional[StorageParams] = None
    pv_limit: float = 0.0  # kWp
    battery_limit: float = 0.0  # kWh
    submetered: bool = False
    v2g_allowed: bool = False
    connection_limit: float = 0.0  # kW cap used for big-M envelopes, 0 = derive

    def __post_init__(self):
        object.__setattr__(self, "load", np.asarray(self.load, dtype=float))
        object.__setattr__(
            self, "solar_availability", np.asarray(self.solar_availability, dtype=float)
        )
        if np.any(self.load < 0):
            raise ValidationError(f"agent {self.id}: load must be nonnegative")
        if np.any((self.solar_availability < 0) | (self.solar_availability > 1)):
            raise ValidationError(f"agent {self.id}: solar availability must lie in [0, 1]")
        if self.kind.has_ev and self.ev is None:
            raise ValidationError(f"agent {self.id}: kind {self.kind.value} requires EV data")
        if not self.kind.has_ev and self.ev is not None:
            raise ValidationError(f"agent {self.id}: kind {self.kind.value} cannot own an EV")
        if self.submetered and not self.kind.has_ev:
            raise ValidationError(f"agent {self.id}: submetering requires an EV")
        if self.submetered and self.rate.ev is None:
            raise ValidationError(f"agent {self.id}: submetered household needs an EV rate")
        if not self.submetered and self.rate.ev is not None:
            raise ValidationError(f"agent {self.id}: one-meter household carries a single rate")
        if not self.kind.can_invest and (self.pv_limit > 0 or self.battery_limit > 0):
            raise ValidationError(f"agent {self.id}: consumers cannot carry DER limits")
        if self.kind.can_invest and self.storage is None:
            raise ValidationError(f"agent {self.id}: prosumer needs storage cost data")
        if self.v2g_allowed and self.ev is not None and np.all(self.ev.discharge_power == 0):
            raise ValidationError(f"agent {self.id}: V2G allowed but discharge power is zero")
        if not self.v2g_allowed and self.ev is not None and np.any(self.ev.discharge_power > 0):
            raise ValidationError(f"agent {self.id}: discharge power must be zero without V2G")

    @property
    def horizon(self) -> int:
        return len(self.load)

    def max_connection(self) -> float:
        """Physical bound on simultaneous metered flow, used for envelopes."""
        if self.connection_limit > 0:
            return self.connection_limit
        cap = float(np.max(self.load))
        if self.ev is not None:
            cap += float(np.max(self.ev.charge_power) + np.max(self.ev.discharge_power))
        if self.kind.can_invest and self.storage is not None:
            cap += self.battery_limit * max(
                self.storage.charge_ratio, self.storage.discharge_ratio
            )
            cap += self.pv_limit
        return max(cap, 1.0)


@dataclass(frozen=True)
class GridCostStructure:
    """Split of network costs between sunk and peak-driven components."""

    scenario: GridCostScenario
    sunk_costs: float  # $/yr
    incremental_capacity_cost: float  # $/kW/yr
    existing_capacity: float = 0.0  # kW

    def __post_init__(self):
        if self.scenario is GridCostScenario.FULL_SUNK and self.incremental_capacity_cost != 0:
            raise ValidationError("full-sunk grid costs cannot carry a capacity cost")
        if self.scenario is GridCostScenario.FULL_PROSPECTIVE and self.sunk_costs != 0:
            raise ValidationError("full-prospective grid costs cannot carry sunk costs")
        if self.sunk_costs < 0 or self.incremental_capacity_cost < 0:
            raise ValidationError("grid costs must be nonnegative")


@dataclass(frozen=True)
class TariffStructure:
    """Network charge design space available to the regulator."""

    kind: TariffKind
    net_metering: int = 0  # 1 net, 0 imports only, -1 imports plus exports
    volumetric_max: float = 0.2  # $/kWh
    capacity_max: float = 300.0  # $/kW
    fixed_max: float = 200.0  # $/customer

    def __post_init__(self):
        if self.net_metering not in (1, 0, -1):
            raise ValidationError("net metering flag must be one of {1, 0, -1}")
        if min(self.volumetric_max, self.capacity_max, self.fixed_max) < 0:
            raise ValidationError("tariff bounds must be nonnegative")

    @property
    def capacity_allowed(self) -> bool:
        return self.kind is TariffKind.THREE_PART

    @property
    def fixed_allowed(self) -> bool:
        return self.kind is TariffKind.THREE_PART


@dataclass(frozen=True)
class FixedTariff:
    """Exogenously fixed network charges used by single-household runs."""

    vnt: float = 0.0  # $/kWh
    cnt: float = 0.0  # $/kW
    fnt: float = 0.0  # $/customer
    net_metering: int = 0


class ComplementarityMode(Enum):
    BIG_M = "bigm"
    SOS1 = "sos1"
    ENUMERATE = "enum"


@dataclass(frozen=True)
class BigMPolicy:
    """How big-M constants are chosen for the complementarity linearization."""

    mode: str = "calibrated"  # "uniform" | "per_family" | "calibrated"
    uniform_value: float = 1e4
    per_family: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("uniform", "per_family", "calibrated"):
            raise ValidationError(f"unknown big-M policy {self.mode!r}")
        if self.uniform_value <= 0:
            raise ValidationError("big-M values must be positive")


@dataclass(frozen=True)
class LinearizationConfig:
    big_m: BigMPolicy = field(default_factory=BigMPolicy)
    tariff_bits: int = 10
    complementarity_mode: ComplementarityMode = ComplementarityMode.BIG_M
    enumerate_cap: int = 24

    def __post_init__(self):
        if self.tariff_bits < 1:
            raise ValidationError("binary expansion needs at least one bit")


@dataclass(frozen=True)
class ScenarioConfig:
    """A fully specified experiment: fleet, tariff space and grid costs."""

    name: str
    agents: tuple
    tariff: TariffStructure
    grid_costs: GridCostStructure
    horizon: int
    hours_per_slot: float = 1.0
    recovery_band: float = 0.001
    linearization: LinearizationConfig = field(default_factory=LinearizationConfig)

    def __post_init__(self):
        if self.recovery_band <= 0:
            raise ValidationError("cost-recovery band must be positive")
        if self.horizon < 1:
            raise ValidationError("horizon must be at least one slot")
        if abs(self.scaling_factor * self.horizon * self.hours_per_slot - HOURS_PER_YEAR) > 1e-9:
            raise ValidationError("W * H must cover one year")  # pragma: no cover
        for agent in self.agents:
            if agent.horizon != self.horizon:
                raise ValidationError(f"agent {agent.id}: profile length != horizon")
            if agent.rate.house.horizon != self.horizon:
                raise ValidationError(f"agent {agent.id}: rate length != horizon")

    @property
    def scaling_factor(self) -> float:
        """Horizon repetitions per year (the weight W on per-slot costs)."""
        return HOURS_PER_YEAR / (self.horizon * self.hours_per_slot)

    @property
    def connection_count(self) -> int:
        """Number of billed connection points; a submetered EV adds one."""
        return sum(2 if a.submetered else 1 for a in self.agents)


def annualize(capex: float, discount_rate: float, lifetime_years: int) -> float:
    """Annualized cost of an upfront investment via the annuity factor."""
    if lifetime_years < 1:
        raise ValidationError("lifetime must be at least one year")
    if discount_rate <= 0:
        raise ValidationError("discount rate must be positive")
    r = discount_rate
    return capex * r / (1.0 - (1.0 + r) ** (-lifetime_years))


@dataclass(frozen=True)
class BillBreakdown:
    """Counterfactual flat-rate bill split into its regulatory components."""

    energy: float
    network: float
    other: float

    @property
    def total(self) -> float:
        return self.energy + self.network + self.other


def build_baseline_bill(
    flat_price: float, shares: dict, consumptions: dict
) -> dict:
    """Split flat-rate bills into energy / network / other components.

    ``shares`` maps component name to its fraction of the retail price;
    fractions must sum to one.  ``consumptions`` maps a key (e.g. agent kind)
    to annual kWh.  Returns ``{key: BillBreakdown}``.
    """
    if flat_price <= 0:
        raise ValidationError("flat price must be positive")
    expected = {"energy", "network", "other"}
    if set(shares) != expected:
        raise ValidationError(f"shares must have keys {sorted(expected)}")
    total_share = sum(shares.values())
    if abs(total_share - 1.0) > 1e-9:
        raise ValidationError(f"shares must sum to 1, got {total_share!r}")
    out = {}
    for key, kwh in consumptions.items():
        if kwh < 0:
            raise ValidationError(f"consumption for {key!r} must be nonnegative")
        bill = kwh * flat_price
        out[key] = BillBreakdown(
            energy=bill * shares["energy"],
            network=bill * shares["network"],
            other=bill * shares["other"],
        )
    return out


def hour_of_day(h: int, hours_per_slot: float = 1.0, first_hour: float = 0.0) -> float:
    """Clock hour at the START of 1-based slot ``h``."""
    return (first_hour + (h - 1) * hours_per_slot) % 24.0


def ev_daily_energy_need(annual_kwh: float = 3500.0, days_per_year: float = 360.0) -> float:
    """Daily charging requirement implied by annual EV consumption."""
    return annual_kwh / days_per_year


def ev_daily_distance(
    annual_kwh: float = 3500.0,
    wh_per_km: float = 194.0,
    days_per_year: float = 360.0,
) -> float:
    """Average daily distance implied by annual consumption and efficiency."""
    return annual_kwh * 1000.0 / (wh_per_km * days_per_year)


def yearly_scaling(horizon: int, hours_per_slot: float = 1.0) -> float:
    return HOURS_PER_YEAR / (horizon * hours_per_slot)


def check_finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite")
    return value
