"""Sparse tagged linear/mixed-integer model representation.

One ``Model`` class serves both the household LPs and the assembled
equilibrium MILP.  Every constraint carries a formulation tag (see
FORMULATION.md) and, for household LPs, the name of its dual multiplier so
the optimality-condition derivation stays mechanical.

Objective coefficients may carry symbolic tariff multipliers: a household
import column costs ``W * price + W * vnt``, stored as a constant part plus
``{"vnt": W}``.  Solving against fixed charges materializes the symbols;
the equilibrium assembly maps them onto tariff columns instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

INF = float("inf")


@dataclass
class Variable:
    name: str
    lb: float = 0.0
    ub: float = INF
    binary: bool = False
    nonneg_dual: Optional[str] = None  # dual name when lb = 0 acts as a tagged constraint
    nonneg_tag: Optional[str] = None


@dataclass
class Constraint:
    name: str
    sense: str  # "<=" or "=="
    coefs: dict  # var index -> coefficient
    rhs: float
    tag: str = ""
    dual: Optional[str] = None


class ModelError(ValueError):
    pass


class Model:
    def __init__(self, name: str = "model"):
        self.name = name
        self.vars: list[Variable] = []
        self._var_index: dict[str, int] = {}
        self.cons: list[Constraint] = []
        self._con_index: dict[str, int] = {}
        self.obj: dict[int, float] = {}
        self.obj_tariff: dict[int, dict[str, float]] = {}
        self.obj_offset: float = 0.0
        self.offset_tariff: dict[str, float] = {}  # e.g. fixed charge per connection

    # -- variables ---------------------------------------------------------

    def add_var(
        self,
        name: str,
        lb: float = 0.0,
        ub: float = INF,
        binary: bool = False,
        nonneg_dual: Optional[str] = None,
        nonneg_tag: Optional[str] = None,
    ) -> int:
        if name in self._var_index:
            raise ModelError(f"duplicate variable {name!r}")
        if lb > ub:
            raise ModelError(f"variable {name!r} has empty domain [{lb}, {ub}]")
        idx = len(self.vars)
        self.vars.append(
            Variable(name, lb, ub, binary, nonneg_dual=nonneg_dual, nonneg_tag=nonneg_tag)
        )
        self._var_index[name] = idx
        return idx

    def var_index(self, name: str) -> int:
        return self._var_index[name]

    def has_var(self, name: str) -> bool:
        return name in self._var_index

    @property
    def num_vars(self) -> int:
        return len(self.vars)

    @property
    def num_cons(self) -> int:
        return len(self.cons)

    def binaries(self) -> list[int]:
        return [j for j, v in enumerate(self.vars) if v.binary]

    # -- objective ---------------------------------------------------------

    def _resolve(self, var: Union[int, str]) -> int:
        if isinstance(var, str):
            return self._var_index[var]
        return var

    def add_obj(self, var: Union[int, str], coef: float, tariff: Optional[dict] = None):
        j = self._resolve(var)
        self.obj[j] = self.obj.get(j, 0.0) + float(coef)
        if tariff:
            slot = self.obj_tariff.setdefault(j, {})
            for sym, mult in tariff.items():
                slot[sym] = slot.get(sym, 0.0) + mult

    # -- constraints -------------------------------------------------------

    def add_con(
        self,
        name: str,
        coefs: dict,
        sense: str,
        rhs: float,
        tag: str = "",
        dual: Optional[str] = None,
    ) -> int:
        if sense not in ("<=", "=="):
            raise ModelError(f"constraint {name!r}: sense must be '<=' or '==' (normalize >=)")
        if name in self._con_index:
            raise ModelError(f"duplicate constraint {name!r}")
        resolved = {}
        for var, coef in coefs.items():
            j = self._resolve(var)
            if coef != 0.0:
                resolved[j] = resolved.get(j, 0.0) + float(coef)
        idx = len(self.cons)
        self.cons.append(Constraint(name, sense, resolved, float(rhs), tag, dual))
        self._con_index[name] = idx
        return idx

    def con_index(self, name: str) -> int:
        return self._con_index[name]

    # -- evaluation helpers --------------------------------------------------

    def objective_vector(self, tariff: Optional[dict] = None) -> np.ndarray:
        c = np.zeros(self.num_vars)
        for j, coef in self.obj.items():
            c[j] = coef
        if self.obj_tariff:
            if tariff is None:
                raise ModelError(
                    f"model {self.name!r} has symbolic tariff terms; pass tariff values"
                )
            for j, terms in self.obj_tariff.items():
                for sym, mult in terms.items():
                    c[j] += mult * tariff[sym]
        return c

    def objective_value(self, x: np.ndarray, tariff: Optional[dict] = None) -> float:
        return float(self.objective_vector(tariff) @ x) + self.offset_value(tariff)

    def offset_value(self, tariff: Optional[dict] = None) -> float:
        off = self.obj_offset
        if self.offset_tariff:
            if tariff is None:
                raise ModelError(
                    f"model {self.name!r} has a symbolic offset; pass tariff values"
                )
            off += sum(mult * tariff[sym] for sym, mult in self.offset_tariff.items())
        return off

    def row_activity(self, con: Constraint, x: np.ndarray) -> float:
        return float(sum(coef * x[j] for j, coef in con.coefs.items()))

    def max_violation(self, x: np.ndarray) -> float:
        """Largest constraint or bound violation at the point ``x``."""
        worst = 0.0
        for con in self.cons:
            act = self.row_activity(con, x)
            if con.sense == "==":
                worst = max(worst, abs(act - con.rhs))
            else:
                worst = max(worst, act - con.rhs)
        for j, v in enumerate(self.vars):
            if v.lb != -INF:
                worst = max(worst, v.lb - x[j])
            if v.ub != INF:
                worst = max(worst, x[j] - v.ub)
        return worst

    def dense_rows(self) -> tuple:
        """(A, senses, b) with A dense; for the simplex backend."""
        m, n = self.num_cons, self.num_vars
        A = np.zeros((m, n))
        b = np.zeros(m)
        senses = []
        for i, con in enumerate(self.cons):
            for j, coef in con.coefs.items():
                A[i, j] = coef
            b[i] = con.rhs
            senses.append(con.sense)
        return A, senses, b

    def bounds_arrays(self) -> tuple:
        lb = np.array([v.lb for v in self.vars])
        ub = np.array([v.ub for v in self.vars])
        return lb, ub

    def copy(self) -> "Model":
        clone = Model(self.name)
        for v in self.vars:
            clone.add_var(v.name, v.lb, v.ub, v.binary, v.nonneg_dual, v.nonneg_tag)
        for c in self.cons:
            clone.add_con(c.name, dict(c.coefs), c.sense, c.rhs, c.tag, c.dual)
        clone.obj = dict(self.obj)
        clone.obj_tariff = {j: dict(t) for j, t in self.obj_tariff.items()}
        clone.obj_offset = self.obj_offset
        clone.offset_tariff = dict(self.offset_tariff)
        return clone
