from .simplex import LPStatus, LPSolution, solve_model
from .branch_bound import (
    BinaryProgram,
    EnumerationResult,
    MILPLimits,
    MILPStatus,
    SolveReport,
    enumerate_patterns,
    solve_milp,
)

__all__ = [
    "LPStatus",
    "LPSolution",
    "solve_model",
    "BinaryProgram",
    "EnumerationResult",
    "MILPLimits",
    "MILPStatus",
    "SolveReport",
    "enumerate_patterns",
    "solve_milp",
]
