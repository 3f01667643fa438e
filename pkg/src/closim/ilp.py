"""Small exact integer-program solver.

The placement stage only ever builds programs over small-range integer
variables (mostly binaries over leaves and spines), so an LP relaxation
is unnecessary: depth-first branch and bound with interval propagation
and cardinality-aware objective bounding is exact and fast at the sizes
we solve.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field


class Infeasible(Exception):
    pass


class IlpTimeout(Exception):
    pass


@dataclass
class Constraint:
    coeffs: dict[str, float]
    sense: str  # "<=", ">=", "=="
    rhs: float


@dataclass
class IntegerProgram:
    """Minimize a linear objective over bounded integer variables."""
    bounds: dict[str, tuple[int, int]] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    objective: dict[str, float] = field(default_factory=dict)

    def add_var(self, name: str, lo: int = 0, hi: int = 1):
        if name in self.bounds:
            raise ValueError("duplicate variable %r" % name)
        if lo > hi:
            raise ValueError("empty domain for %r" % name)
        self.bounds[name] = (lo, hi)

    def add_constraint(self, coeffs: dict[str, float], sense: str, rhs: float):
        if sense not in ("<=", ">=", "=="):
            raise ValueError("bad sense %r" % sense)
        for v in coeffs:
            if v not in self.bounds:
                raise ValueError("unknown variable %r" % v)
        self.constraints.append(Constraint(dict(coeffs), sense, rhs))

    def set_objective(self, coeffs: dict[str, float]):
        for v in coeffs:
            if v not in self.bounds:
                raise ValueError("unknown variable %r" % v)
        self.objective = dict(coeffs)

    def dump(self) -> str:
        """LP-style text form, suitable for cross-checking with an
        external solver."""
        lines = ["minimize"]
        lines.append("  " + " + ".join(
            "%g %s" % (c, v) for v, c in sorted(self.objective.items())) or "  0")
        lines.append("subject to")
        for con in self.constraints:
            expr = " + ".join("%g %s" % (c, v) for v, c in sorted(con.coeffs.items()))
            lines.append("  %s %s %g" % (expr or "0", con.sense, con.rhs))
        lines.append("bounds")
        for v, (lo, hi) in sorted(self.bounds.items()):
            lines.append("  %d <= %s <= %d" % (lo, v, hi))
        lines.append("integer")
        lines.append("  " + " ".join(sorted(self.bounds)))
        return "\n".join(lines)


@dataclass
class Solution:
    values: dict[str, int]
    objective: float


def _propagate(cons: list[Constraint], lo: dict, hi: dict) -> bool:
    """Tighten variable bounds to a fixpoint.  Returns False on a proven
    empty feasible region."""
    changed = True
    while changed:
        changed = False
        for con in cons:
            lo_act = hi_act = 0.0
            for v, c in con.coeffs.items():
                if c >= 0:
                    lo_act += c * lo[v]
                    hi_act += c * hi[v]
                else:
                    lo_act += c * hi[v]
                    hi_act += c * lo[v]
            if con.sense in ("<=", "==") and lo_act > con.rhs + 1e-9:
                return False
            if con.sense in (">=", "==") and hi_act < con.rhs - 1e-9:
                return False
            for v, c in con.coeffs.items():
                if c == 0:
                    continue
                # slack available to v beyond the other terms' extremes
                if con.sense in ("<=", "=="):
                    rest = lo_act - (c * lo[v] if c > 0 else c * hi[v])
                    room = con.rhs - rest
                    if c > 0:
                        new_hi = math.floor(room / c + 1e-9)
                        if new_hi < hi[v]:
                            hi[v] = new_hi
                            changed = True
                    else:
                        new_lo = math.ceil(room / c - 1e-9)
                        if new_lo > lo[v]:
                            lo[v] = new_lo
                            changed = True
                if con.sense in (">=", "=="):
                    rest = hi_act - (c * hi[v] if c > 0 else c * lo[v])
                    need = con.rhs - rest
                    if c > 0:
                        new_lo = math.ceil(need / c - 1e-9)
                        if new_lo > lo[v]:
                            lo[v] = new_lo
                            changed = True
                    else:
                        new_hi = math.floor(need / c + 1e-9)
                        if new_hi < hi[v]:
                            hi[v] = new_hi
                            changed = True
                if lo[v] > hi[v]:
                    return False
    return True


def _cardinality_groups(p: IntegerProgram) -> list[tuple[list[str], int]]:
    """Equality constraints of the form sum(vars) == k (unit coefficients,
    disjoint supports); used for a tighter objective lower bound."""
    groups = []
    used: set[str] = set()
    for con in p.constraints:
        if con.sense != "==":
            continue
        names = list(con.coeffs)
        if any(c != 1 for c in con.coeffs.values()):
            continue
        if any(v in used for v in names):
            continue
        if con.rhs != int(con.rhs):
            continue
        groups.append((names, int(con.rhs)))
        used.update(names)
    return groups


def ilp_solve(p: IntegerProgram, time_budget: float = 10.0) -> Solution:
    """Exact branch and bound.  Raises Infeasible or IlpTimeout."""
    deadline = time.monotonic() + time_budget
    names = list(p.bounds)
    lo = {v: p.bounds[v][0] for v in names}
    hi = {v: p.bounds[v][1] for v in names}
    if not _propagate(p.constraints, lo, hi):
        raise Infeasible
    obj = p.objective
    groups = _cardinality_groups(p)
    grouped = {v for g, _k in groups for v in g}

    # branch on high-|objective| variables first, names as tie-break
    order = sorted(names, key=lambda v: (-abs(obj.get(v, 0.0)), v))

    best_val: float | None = None
    best: dict[str, int] | None = None

    def lower_bound(lo, hi) -> float:
        base = 0.0
        for v, c in obj.items():
            if v in grouped:
                continue
            base += c * (lo[v] if c >= 0 else hi[v])
        for g, k in groups:
            # mandatory part, plus the remaining units filled greedily by
            # cheapest (valid since all coefficients are 1)
            base += sum(obj.get(v, 0.0) * lo[v] for v in g)
            need = k - sum(lo[v] for v in g)
            if need > 0:
                slots = sorted((obj.get(v, 0.0), hi[v] - lo[v]) for v in g)
                for cost, room in slots:
                    if need <= 0:
                        break
                    take = min(room, need)
                    base += cost * take
                    need -= take
        return base

    def dfs(lo, hi):
        nonlocal best_val, best
        if time.monotonic() > deadline:
            raise IlpTimeout
        if not _propagate(p.constraints, lo, hi):
            return
        lb = lower_bound(lo, hi)
        if best_val is not None and lb >= best_val - 1e-9:
            return
        pick = None
        for v in order:
            if lo[v] < hi[v]:
                pick = v
                break
        if pick is None:
            val = sum(obj.get(v, 0.0) * lo[v] for v in names)
            if best_val is None or val < best_val - 1e-9:
                best_val = val
                best = dict(lo)
            return
        c = obj.get(pick, 0.0)
        values = range(lo[pick], hi[pick] + 1)
        if c < 0:
            values = reversed(list(values))
        for val in values:
            nlo, nhi = dict(lo), dict(hi)
            nlo[pick] = nhi[pick] = val
            dfs(nlo, nhi)

    dfs(lo, hi)
    if best is None:
        raise Infeasible
    return Solution(values=best, objective=best_val)
