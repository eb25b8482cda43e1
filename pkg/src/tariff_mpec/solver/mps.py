"""MPS emission, parsing and the external-solver bridge.

The writer produces aligned-column MPS (whitespace-delimited, so any
free-format reader accepts it) with shortest-exact float formatting, which
makes ``emit -> parse -> emit`` byte-identical and coefficient-exact.
Names longer than eight characters are replaced by a stable hash-derived
token; a collision aborts with a remap suggestion.

The external bridge writes the model, runs a configured command with
``{input}``/``{output}`` placeholders, parses the solution file (plain
``name value`` pairs, or the sectioned format common to open solvers) and
verifies the returned point against the model before reporting it.
"""

from __future__ import annotations

import hashlib
import math
import shlex
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..lp import INF, Model
from .branch_bound import MILPStatus, SolveReport, _solve_with_bounds

_ALPHABET = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"


class MPSError(ValueError):
    pass


def _short_name(name: str, taken: dict, prefix: str) -> str:
    """<= 8 char token; stable across runs (hash of the long name)."""
    if len(name) <= 8 and name.isascii() and " " not in name and "\t" not in name:
        token = name
    else:
        digest = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "big")
        chars = []
        for _ in range(7):
            digest, rem = divmod(digest, 36)
            chars.append(_ALPHABET[rem])
        token = prefix + "".join(chars)
    if token in taken and taken[token] != name:
        raise MPSError(
            f"short-name collision: {name!r} and {taken[token]!r} both map to {token!r}; "
            f"rename one of them"
        )
    taken[token] = name
    return token


def _fmt(value: float) -> str:
    """Shortest representation that parses back to the same double."""
    value = float(value)
    if value == math.floor(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def emit_mps(model: Model, path: Optional[str] = None, name: str = "TARIFF") -> tuple:
    """(text, column name map, row name map); writes ``path`` when given.

    Requires a tariff-free model (materialize symbolic terms first).
    """
    if model.obj_tariff or model.offset_tariff:
        raise MPSError("model has symbolic tariff terms; materialize before emission")
    taken: dict = {}
    row_names = {}
    col_names = {}
    for i, con in enumerate(model.cons):
        row_names[i] = _short_name(con.name, taken, "R")
    for j, var in enumerate(model.vars):
        col_names[j] = _short_name(var.name, taken, "X")

    lines = [f"NAME          {name}", "ROWS", " N  COST"]
    for i, con in enumerate(model.cons):
        sense = "E" if con.sense == "==" else "L"
        lines.append(f" {sense}  {row_names[i]}")

    # column-major coefficients
    by_col: dict[int, list] = {j: [] for j in range(model.num_vars)}
    for i, con in enumerate(model.cons):
        for j, coef in con.coefs.items():
            by_col[j].append((i, coef))
    lines.append("COLUMNS")
    in_int = False
    marker_count = 0

    def marker(kind: str):
        nonlocal marker_count
        marker_count += 1
        lines.append(f"    MARKER{marker_count:02d}  'MARKER'                 '{kind}'")

    for j in range(model.num_vars):
        var = model.vars[j]
        if var.binary and not in_int:
            marker("INTORG")
            in_int = True
        if not var.binary and in_int:
            marker("INTEND")
            in_int = False
        entries = []
        if j in model.obj and model.obj[j] != 0.0:
            entries.append(("COST", model.obj[j]))
        for i, coef in sorted(by_col[j]):
            entries.append((row_names[i], coef))
        if not entries:
            entries.append(("COST", 0.0))
        for rname, coef in entries:
            lines.append(f"    {col_names[j]:<8}  {rname:<8}  {_fmt(coef)}")
    if in_int:
        marker("INTEND")

    lines.append("RHS")
    if model.obj_offset:
        lines.append(f"    RHS       COST      {_fmt(-model.obj_offset)}")
    for i, con in enumerate(model.cons):
        if con.rhs != 0.0:
            lines.append(f"    RHS       {row_names[i]:<8}  {_fmt(con.rhs)}")

    lines.append("BOUNDS")
    for j, var in enumerate(model.vars):
        cname = col_names[j]
        if var.binary:
            lines.append(f" BV BND       {cname}")
            continue
        lb, ub = var.lb, var.ub
        if lb == 0.0 and ub == INF:
            continue
        if lb == ub:
            lines.append(f" FX BND       {cname:<8}  {_fmt(lb)}")
            continue
        if lb == -INF and ub == INF:
            lines.append(f" FR BND       {cname}")
            continue
        if lb == -INF:
            lines.append(f" MI BND       {cname}")
        elif lb != 0.0:
            lines.append(f" LO BND       {cname:<8}  {_fmt(lb)}")
        if ub != INF:
            lines.append(f" UP BND       {cname:<8}  {_fmt(ub)}")
    lines.append("ENDATA")
    text = "\n".join(lines) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    col_map = {col_names[j]: model.vars[j].name for j in range(model.num_vars)}
    row_map = {row_names[i]: model.cons[i].name for i in range(model.num_cons)}
    return text, col_map, row_map


def parse_mps(text: str) -> Model:
    """Rebuild a model from MPS text (subset: N/L/E rows, no RANGES)."""
    model = Model("parsed")
    section = None
    row_sense: dict[str, str] = {}
    row_order: list[str] = []
    col_entries: dict[str, list] = {}
    col_order: list[str] = []
    integer_cols: set = set()
    rhs: dict[str, float] = {}
    bounds: dict[str, list] = {}
    obj_row = None
    in_int = False

    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("*"):
            continue
        is_header = not raw[0].isspace()
        tokens = raw.split()
        if is_header:
            section = tokens[0].upper()
            if section == "NAME":
                model.name = tokens[1] if len(tokens) > 1 else "parsed"
            if section == "RANGES":
                raise MPSError(f"line {lineno}: RANGES section is not supported")
            if section == "ENDATA":
                break
            continue
        if section == "ROWS":
            sense, rname = tokens[0].upper(), tokens[1]
            if sense == "N":
                if obj_row is None:
                    obj_row = rname
                continue
            if sense == "G":
                raise MPSError(f"line {lineno}: G rows unsupported; emit <= rows")
            if sense not in ("L", "E"):
                raise MPSError(f"line {lineno}: unknown row sense {sense!r}")
            row_sense[rname] = "<=" if sense == "L" else "=="
            row_order.append(rname)
        elif section == "COLUMNS":
            if len(tokens) >= 3 and tokens[1].startswith("'MARKER'"):
                in_int = tokens[2].strip("'").upper() == "INTORG"
                continue
            cname = tokens[0]
            if cname not in col_entries:
                col_entries[cname] = []
                col_order.append(cname)
                if in_int:
                    integer_cols.add(cname)
            pairs = tokens[1:]
            if len(pairs) % 2:
                raise MPSError(f"line {lineno}: odd COLUMNS record")
            for k in range(0, len(pairs), 2):
                col_entries[cname].append((pairs[k], float(pairs[k + 1])))
        elif section == "RHS":
            pairs = tokens[1:]
            for k in range(0, len(pairs), 2):
                rhs[pairs[k]] = float(pairs[k + 1])
        elif section == "BOUNDS":
            btype = tokens[0].upper()
            cname = tokens[2]
            value = float(tokens[3]) if len(tokens) > 3 else None
            bounds.setdefault(cname, []).append((btype, value))
        else:
            raise MPSError(f"line {lineno}: record outside a known section")

    for cname in col_order:
        lb, ub, binary = 0.0, INF, cname in integer_cols
        for btype, value in bounds.get(cname, []):
            if btype == "BV":
                binary, lb, ub = True, 0.0, 1.0
            elif btype == "UP":
                ub = value
            elif btype == "LO":
                lb = value
            elif btype == "FX":
                lb = ub = value
            elif btype == "FR":
                lb, ub = -INF, INF
            elif btype == "MI":
                lb = -INF
            elif btype == "PL":
                ub = INF
            else:
                raise MPSError(f"unsupported bound type {btype!r} on {cname}")
        model.add_var(cname, lb=lb, ub=ub, binary=binary)

    row_coefs: dict[str, dict] = {rname: {} for rname in row_order}
    for cname in col_order:
        j = model.var_index(cname)
        for rname, coef in col_entries[cname]:
            if rname == obj_row:
                if coef != 0.0:
                    model.add_obj(j, coef)
            elif rname in row_coefs:
                row_coefs[rname][j] = row_coefs[rname].get(j, 0.0) + coef
            else:
                raise MPSError(f"coefficient for unknown row {rname!r}")
    for rname in row_order:
        model.add_con(rname, row_coefs[rname], row_sense[rname], rhs.get(rname, 0.0))
    if obj_row is not None and obj_row in rhs:
        model.obj_offset = -rhs[obj_row]
    return model


def parse_solution_file(text: str, known_names: set) -> tuple:
    """(assignments, objective, status_word) from a solution file.

    Accepts plain ``name value`` pairs and the sectioned format written by
    common open-source solvers (status word on its own line, ``Objective``
    markers, ``# Columns`` blocks).
    """
    values: dict[str, float] = {}
    objective = None
    status_word = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        lowered = line.lower()
        if lowered in ("optimal", "infeasible", "unbounded", "feasible", "time limit reached"):
            if status_word is None or lowered != "feasible":
                status_word = lowered
            continue
        if line.startswith("#") or line.startswith("*"):
            continue
        tokens = line.split()
        if tokens[0].lower() in ("objective", "=obj=") and len(tokens) >= 2:
            try:
                objective = float(tokens[-1])
            except ValueError:
                pass
            continue
        if len(tokens) == 2 and tokens[0] in known_names:
            try:
                values[tokens[0]] = float(tokens[1])
            except ValueError:
                continue
    return values, objective, status_word


@dataclass
class ExternalSolverError(Exception):
    message: str
    stdout: str = ""
    stderr: str = ""

    def __str__(self):
        return self.message


def run_external_solver(
    model: Model,
    command_template: str,
    timeout: float = 900.0,
    keep_files: Optional[str] = None,
    feasibility_tol: float = 1e-5,
) -> SolveReport:
    """Solve via an external process; verify the returned point.

    ``command_template`` must contain ``{input}`` and ``{output}``
    placeholders.  The returned primal point is checked against the model;
    a violation beyond ``feasibility_tol`` rejects the result, naming the
    worst row.  Duals are recovered by re-solving the fixed-binary LP.
    """
    if "{input}" not in command_template or "{output}" not in command_template:
        raise ExternalSolverError("solver command needs {input} and {output} placeholders")
    workdir = Path(keep_files) if keep_files else Path(tempfile.mkdtemp(prefix="tariff_mpec_"))
    workdir.mkdir(parents=True, exist_ok=True)
    mps_path = workdir / "model.mps"
    sol_path = workdir / "model.sol"
    _, col_map, _ = emit_mps(model, str(mps_path))
    cmd = command_template.format(input=str(mps_path), output=str(sol_path))
    t0 = time.monotonic()
    try:
        proc = subprocess.run(
            shlex.split(cmd), capture_output=True, text=True, timeout=timeout
        )
    except subprocess.TimeoutExpired as exc:
        raise ExternalSolverError(f"external solver timed out after {timeout}s: {cmd}") from exc
    wall = time.monotonic() - t0
    if proc.returncode != 0:
        raise ExternalSolverError(
            f"external solver exited {proc.returncode}: {cmd}",
            stdout=proc.stdout[-2000:],
            stderr=proc.stderr[-2000:],
        )
    if not sol_path.exists():
        raise ExternalSolverError(
            f"external solver wrote no solution file: {cmd}",
            stdout=proc.stdout[-2000:],
            stderr=proc.stderr[-2000:],
        )
    values, objective, status_word = parse_solution_file(
        sol_path.read_text(encoding="utf-8"), set(col_map)
    )
    if status_word == "infeasible":
        return SolveReport(MILPStatus.INFEASIBLE, wall_seconds=wall)
    if status_word == "unbounded":
        return SolveReport(MILPStatus.UNBOUNDED, wall_seconds=wall)
    if not values:
        raise ExternalSolverError("solution file contained no recognizable assignments")

    x = np.zeros(model.num_vars)
    for short, value in values.items():
        x[model.var_index(col_map[short])] = value
    for j in model.binaries():
        x[j] = round(x[j])
    worst, worst_row = 0.0, ""
    for con in model.cons:
        act = model.row_activity(con, x)
        v = abs(act - con.rhs) if con.sense == "==" else max(0.0, act - con.rhs)
        if v > worst:
            worst, worst_row = v, con.name
    if worst > feasibility_tol:
        raise ExternalSolverError(
            f"external point violates {worst_row!r} by {worst:.3e} (tolerance {feasibility_tol})"
        )
    # recover duals from the fixed-binary LP
    fixes = {j: (x[j], x[j]) for j in model.binaries()}
    leaf = _solve_with_bounds(model, fixes)
    dual = leaf.dual_by_name(model) if leaf.optimal and leaf.dual is not None else {}
    recomputed = model.objective_value(x)
    status = MILPStatus.OPTIMAL if status_word in (None, "optimal") else MILPStatus.GAP_LIMIT
    return SolveReport(
        status=status,
        objective=recomputed,
        best_bound=objective if objective is not None else recomputed,
        nodes=0,
        wall_seconds=wall,
        x=x,
        primal={v.name: float(x[j]) for j, v in enumerate(model.vars)},
        dual=dual,
        message=f"external: {cmd}",
    )
