"""Bi-level electricity network tariff design toolkit.

Households minimize their bills (EV charging, solar and battery sizing)
against the network charges a regulator sets; the regulator anticipates
those responses.  The package builds the household LPs, derives their
optimality conditions mechanically, assembles the resulting single-level
equilibrium system, linearizes it to a MILP, and solves or exports it.
"""

__version__ = "0.1.0"

from .core import (
    Agent,
    AgentKind,
    BillBreakdown,
    ComplementarityMode,
    EnergyPriceProfile,
    EVParams,
    FixedTariff,
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
    build_baseline_bill,
)
from .scenario import build_scenario, load_scenario

__all__ = [
    "Agent",
    "AgentKind",
    "BillBreakdown",
    "ComplementarityMode",
    "EnergyPriceProfile",
    "EVParams",
    "FixedTariff",
    "GridCostScenario",
    "GridCostStructure",
    "LinearizationConfig",
    "ProfileLabel",
    "RateAssignment",
    "ScenarioConfig",
    "StorageParams",
    "TariffKind",
    "TariffStructure",
    "ValidationError",
    "annualize",
    "build_baseline_bill",
    "build_scenario",
    "load_scenario",
    "__version__",
]
