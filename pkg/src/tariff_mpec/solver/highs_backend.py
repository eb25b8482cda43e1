"""Reference external backend: solve an MPS file with SciPy's HiGHS MILP.

Installed as the ``tariff-mpec-highs`` console script so the pipeline's
external-solver bridge can be exercised end to end as a real subprocess:

    tariff-mpec-highs model.mps model.sol [--gap 1e-6] [--time 600]

The solution file holds one ``name value`` line per column plus status and
objective markers, matching the bridge's documented format.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from ..lp import INF
from .mps import parse_mps


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="tariff-mpec-highs", description=__doc__)
    ap.add_argument("input", help="MPS file to solve")
    ap.add_argument("output", help="solution file to write")
    ap.add_argument("--gap", type=float, default=1e-6, help="relative MIP gap")
    ap.add_argument("--time", type=float, default=900.0, help="time limit in seconds")
    args = ap.parse_args(argv)

    try:
        from scipy.optimize import LinearConstraint, milp
        from scipy.sparse import lil_matrix
    except ImportError:  # pragma: no cover
        print("scipy is required for the reference backend", file=sys.stderr)
        return 3

    with open(args.input, "r", encoding="utf-8") as fh:
        model = parse_mps(fh.read())

    n = model.num_vars
    c = model.objective_vector()
    integrality = np.zeros(n)
    lb = np.full(n, 0.0)
    ub = np.full(n, np.inf)
    for j, var in enumerate(model.vars):
        lb[j] = -np.inf if var.lb == -INF else var.lb
        ub[j] = np.inf if var.ub == INF else var.ub
        if var.binary:
            integrality[j] = 1
    from scipy.optimize import Bounds

    constraints = []
    if model.num_cons:
        A = lil_matrix((model.num_cons, n))
        lo = np.full(model.num_cons, -np.inf)
        hi = np.zeros(model.num_cons)
        for i, con in enumerate(model.cons):
            for j, coef in con.coefs.items():
                A[i, j] = coef
            hi[i] = con.rhs
            if con.sense == "==":
                lo[i] = con.rhs
        constraints.append(LinearConstraint(A.tocsr(), lo, hi))

    res = milp(
        c,
        constraints=constraints,
        integrality=integrality,
        bounds=Bounds(lb, ub),
        options={"mip_rel_gap": args.gap, "time_limit": args.time, "disp": False},
    )

    lines = []
    if res.status == 0:
        lines.append("Optimal")
    elif res.status == 2:
        lines.append("Infeasible")
    elif res.status == 3:
        lines.append("Unbounded")
    elif res.x is not None:
        lines.append("Feasible")
    else:
        lines.append("Infeasible" if "infeasible" in (res.message or "").lower() else "Unknown")
    if res.x is not None:
        lines.append(f"Objective {float(res.fun + model.obj_offset)!r}")
        for j, var in enumerate(model.vars):
            lines.append(f"{var.name} {float(res.x[j])!r}")
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
