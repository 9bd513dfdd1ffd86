"""Embedded deterministic solvers for the emitted formulations.

NLP: multistart projected quasi-Newton (L-BFGS-B) over the box, with exact
forward-mode gradients from the expression DAG and an exterior quadratic
penalty (escalated tenfold per round) for inequality constraints. MILP:
depth-first branch-and-bound on the binaries with LP-relaxation bounding.
Superstructures solve by enumerating the choose-exactly-one branches.

Local NLP solutions are not certified global; desk-scale problems rely on
the seeded multistart for coverage.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from .data import sobol_unit
from .errors import ParameterError, SolveError
from .expr import Tape, affine_coeffs
from .formul import Formulation, _DefineStep

_PENALTY_ROUNDS = 8
_PENALTY_MU0 = 1.0


@dataclass(frozen=True)
class SolveConfig:
    multistarts: int = 16
    seed: int = 0
    max_iters: int = 500
    tol_obj: float = 1e-8
    tol_con: float = 1e-6
    time_budget: float = 60.0

    def __post_init__(self):
        if self.multistarts < 1:
            raise ParameterError("multistarts must be >= 1")
        if self.tol_obj <= 0.0 or self.tol_con <= 0.0:
            raise ParameterError("tolerances must be positive")


@dataclass
class Solution:
    x: dict[str, float]
    objective: float
    status: str  # optimal_local | optimal_exact | infeasible | budget_exhausted
    starts_log: list = field(default_factory=list)
    inputs: np.ndarray | None = None
    outputs: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "objective": self.objective,
            "status": self.status,
            "starts_log": self.starts_log,
            "inputs": None if self.inputs is None else list(map(float, self.inputs)),
            "outputs": self.outputs,
        }


class _CompiledNlp:
    """One flat tape for the defining chain, objective, and residuals."""

    def __init__(self, f: Formulation):
        if f.binaries:
            raise ParameterError("solve_nlp cannot handle binary variables")
        if f.objective is None:
            raise ParameterError("formulation has no objective")
        self.form = f
        self.pinned = {
            v: v.lb
            for v in f.variables
            if not v.is_binary and v.lb == v.ub and math.isfinite(v.lb)
        }
        steps = []
        defined = set()
        for step in f.program:
            if not isinstance(step, _DefineStep):
                raise SolveError("unexpected binary rule in an NLP formulation")
            if step.var in self.pinned:
                continue
            steps.append((step.var, step.expr))
            defined.add(step.var)
        self.free = [
            v for v in f.variables if v not in defined and v not in self.pinned
        ]
        for v in self.free:
            if not (math.isfinite(v.lb) and math.isfinite(v.ub)):
                raise ParameterError(
                    f"free variable {v.name} must be box-bounded for the solver"
                )
        self.lo = np.array([v.lb for v in self.free])
        self.hi = np.array([v.ub for v in self.free])
        self.obj_sign = 1.0 if f.objective.sense == "min" else -1.0
        self.kinds = []  # residual kinds: "ineq" (expr <= 0) or "eq"
        residual_exprs = []
        for c in f.constraints:
            if c.defines is not None:
                continue
            if c.sense == "<=":
                residual_exprs.append(c.lhs - c.rhs)
                self.kinds.append("ineq")
            elif c.sense == ">=":
                residual_exprs.append(c.rhs - c.lhs)
                self.kinds.append("ineq")
            else:
                residual_exprs.append(c.lhs - c.rhs)
                self.kinds.append("eq")
        self.tape = Tape(
            steps, [f.objective.expr] + residual_exprs, self.free, self.pinned
        )

    @property
    def dim(self) -> int:
        return len(self.free)

    @property
    def residuals(self):
        return self.kinds

    def penalized(self, x, mu: float):
        vals, grads = self.tape.run(x)
        total = self.obj_sign * vals[0]
        grad = self.obj_sign * np.array(grads[0])
        for i, kind in enumerate(self.kinds):
            g = vals[1 + i]
            if kind == "ineq" and g <= 0.0:
                continue
            total += mu * g * g
            grad += (2.0 * mu * g) * np.array(grads[1 + i])
        return total, grad

    def violation(self, x) -> float:
        vals = self.tape.output_values(x)
        worst = 0.0
        for i, kind in enumerate(self.kinds):
            g = vals[1 + i]
            worst = max(worst, g if kind == "ineq" else abs(g))
        return worst

    def objective_at(self, x) -> float:
        return self.tape.output_values(x)[0]

    def assignment(self, x) -> dict[str, float]:
        out = {v.name: float(xv) for v, xv in zip(self.free, x)}
        out.update(
            {v.name: float(val) for v, val in self.tape.var_values(x).items()}
        )
        out.update({v.name: float(val) for v, val in self.pinned.items()})
        return out


def solve_nlp(f: Formulation, cfg: SolveConfig = SolveConfig()) -> Solution:
    """Multistart penalty solve; returns the best feasible local solution.

    Start points come from a seeded Sobol design over the free box. Each
    start runs bounded L-BFGS-B with exact DAG gradients; inequality
    residuals are driven below ``tol_con`` by tenfold penalty escalation.
    """
    comp = _CompiledNlp(f)
    d = comp.dim
    if d == 0:
        x = np.zeros(0)
        feasible = comp.violation(x) <= cfg.tol_con
        obj = comp.objective_at(x)
        return Solution(
            x=comp.assignment(x), objective=obj,
            status="optimal_local" if feasible else "infeasible",
            starts_log=[], inputs=np.array([
                comp.pinned.get(v, np.nan) for v in f.io_inputs
            ]),
            outputs=_solution_outputs(f, comp, x),
        )
    starts = comp.lo + sobol_unit(cfg.multistarts, d) * (comp.hi - comp.lo)
    t0 = time.monotonic()
    log = []
    best = None  # (objective_internal, index, x)
    exhausted = False
    for si, x0 in enumerate(starts):
        if time.monotonic() - t0 > cfg.time_budget and si > 0:
            exhausted = True
            break
        x = x0.copy()
        mu = _PENALTY_MU0
        rounds = 0
        viol = math.inf
        for _ in range(_PENALTY_ROUNDS):
            rounds += 1
            res = minimize(
                comp.penalized,
                x,
                args=(mu,),
                jac=True,
                method="L-BFGS-B",
                bounds=list(zip(comp.lo, comp.hi)),
                options={"maxiter": cfg.max_iters, "ftol": cfg.tol_obj,
                         "gtol": 1e-10},
            )
            x = np.clip(res.x, comp.lo, comp.hi)
            viol = comp.violation(x)
            if viol <= cfg.tol_con or not comp.residuals:
                break
            mu *= 10.0
        obj = comp.objective_at(x)
        feasible = viol <= cfg.tol_con
        log.append(
            {
                "start": si,
                "x0": [float(v) for v in x0],
                "x": [float(v) for v in x],
                "objective": float(obj),
                "violation": float(viol),
                "feasible": bool(feasible),
                "penalty_rounds": rounds,
            }
        )
        if feasible:
            internal = comp.obj_sign * obj
            if best is None or internal < best[0] - 1e-15:
                best = (internal, si, x.copy())
    if best is None:
        least = min(log, key=lambda r: r["violation"]) if log else None
        x = np.array(least["x"]) if least else comp.lo.copy()
        return Solution(
            x=comp.assignment(x), objective=comp.objective_at(x),
            status="infeasible", starts_log=log,
            inputs=_input_values(f, comp, x),
            outputs=_solution_outputs(f, comp, x),
        )
    _, _, xbest = best
    status = "budget_exhausted" if exhausted else "optimal_local"
    return Solution(
        x=comp.assignment(xbest),
        objective=comp.objective_at(xbest),
        status=status,
        starts_log=log,
        inputs=_input_values(f, comp, xbest),
        outputs=_solution_outputs(f, comp, xbest),
    )


def _input_values(f: Formulation, comp: _CompiledNlp, x) -> np.ndarray:
    free_vals = dict(zip(comp.free, x))
    defined = comp.tape.var_values(x)
    vals = []
    for v in f.io_inputs:
        if v in free_vals:
            vals.append(float(free_vals[v]))
        elif v in defined:
            vals.append(float(defined[v]))
        else:
            vals.append(comp.pinned.get(v, math.nan))
    return np.array(vals)


def _solution_outputs(f: Formulation, comp: _CompiledNlp, x) -> dict[str, float]:
    free_vals = dict(zip(comp.free, x))
    defined = comp.tape.var_values(x)
    out = {}
    for role, var in f.io_outputs.items():
        if var in defined:
            out[role] = float(defined[var])
        elif var in free_vals:
            out[role] = float(free_vals[var])
        elif var in comp.pinned:
            out[role] = float(comp.pinned[var])
    return out


# ---------------------------------------------------------------------------
# MILP


class _CompiledMilp:
    def __init__(self, f: Formulation):
        if f.objective is None:
            raise ParameterError("formulation has no objective")
        self.form = f
        self.vars = list(f.variables)
        self.index = {v: i for i, v in enumerate(self.vars)}
        self.binary_idx = [i for i, v in enumerate(self.vars) if v.is_binary]
        n = len(self.vars)

        def row_of(expr):
            aff = affine_coeffs(expr)
            if aff is None:
                raise ParameterError(
                    "nonlinearity outside the binary big-M structure"
                )
            coeffs, const = aff
            row = np.zeros(n)
            for v, c in coeffs.items():
                row[self.index[v]] += c
            return row, const

        A_ub, b_ub, A_eq, b_eq = [], [], [], []
        for c in f.constraints:
            lrow, lconst = row_of(c.lhs)
            rrow, rconst = row_of(c.rhs)
            row = lrow - rrow
            rhs = rconst - lconst
            if c.sense == "==":
                A_eq.append(row)
                b_eq.append(rhs)
            elif c.sense == "<=":
                A_ub.append(row)
                b_ub.append(rhs)
            else:
                A_ub.append(-row)
                b_ub.append(-rhs)
        self.A_ub = np.array(A_ub) if A_ub else None
        self.b_ub = np.array(b_ub) if b_ub else None
        self.A_eq = np.array(A_eq) if A_eq else None
        self.b_eq = np.array(b_eq) if b_eq else None
        orow, oconst = row_of(f.objective.expr)
        self.obj_sign = 1.0 if f.objective.sense == "min" else -1.0
        self.c = self.obj_sign * orow
        self.c_const = self.obj_sign * oconst
        self.base_bounds = [(v.lb, v.ub) for v in self.vars]

    def lp(self, fixed: dict[int, int]):
        bounds = list(self.base_bounds)
        for i, val in fixed.items():
            bounds[i] = (float(val), float(val))
        return linprog(
            self.c,
            A_ub=self.A_ub,
            b_ub=self.b_ub,
            A_eq=self.A_eq,
            b_eq=self.b_eq,
            bounds=bounds,
            method="highs",
        )


def solve_milp(f: Formulation, cfg: SolveConfig = SolveConfig(),
               exhaustive: bool = False) -> Solution:
    """Exact mixed-integer solve over the activation/selection binaries.

    Depth-first branch-and-bound with LP-relaxation bounding; ``exhaustive``
    instead enumerates every binary pattern (feasible up to ~20 binaries).
    """
    comp = _CompiledMilp(f)
    nb = len(comp.binary_idx)
    incumbent = None  # (internal_obj, x_vector, fixed_pattern)

    def consider(res, fixed):
        nonlocal incumbent
        val = float(res.fun) + comp.c_const
        if incumbent is None or val < incumbent[0] - 1e-12:
            incumbent = (val, np.array(res.x), dict(fixed))

    if exhaustive:
        if nb > 20:
            raise ParameterError("exhaustive enumeration capped at 20 binaries")
        for pattern in range(2**nb):
            fixed = {
                comp.binary_idx[j]: (pattern >> j) & 1 for j in range(nb)
            }
            res = comp.lp(fixed)
            if res.status == 0:
                consider(res, fixed)
    else:
        stack = [dict()]
        while stack:
            fixed = stack.pop()
            res = comp.lp(fixed)
            if res.status != 0:
                continue
            bound = float(res.fun) + comp.c_const
            if incumbent is not None and bound >= incumbent[0] - 1e-9:
                continue
            xb = res.x[comp.binary_idx] if nb else np.zeros(0)
            frac = np.abs(xb - np.round(xb))
            free_frac = [
                (float(frac[j]), j)
                for j in range(nb)
                if comp.binary_idx[j] not in fixed
            ]
            if not free_frac or max(v for v, _ in free_frac) <= 1e-7:
                full = dict(fixed)
                for j in range(nb):
                    if comp.binary_idx[j] not in full:
                        full[comp.binary_idx[j]] = int(round(xb[j]))
                res2 = comp.lp(full)
                if res2.status == 0:
                    consider(res2, full)
                continue
            _, j = max(free_frac)  # most fractional; ties to highest j is
            # avoided by scanning in order below
            best_v = max(v for v, _ in free_frac)
            j = next(jj for v, jj in free_frac if v == best_v)
            idx = comp.binary_idx[j]
            stack.append({**fixed, idx: 0})
            stack.append({**fixed, idx: 1})

    if incumbent is None:
        return Solution(x={}, objective=math.nan, status="infeasible")
    val, xvec, fixed = incumbent
    assignment = {}
    for i, v in enumerate(comp.vars):
        if v.is_binary:
            assignment[v.name] = float(fixed.get(i, round(xvec[i])))
        else:
            assignment[v.name] = float(xvec[i])
    inputs = np.array([assignment[v.name] for v in f.io_inputs]) if f.io_inputs \
        else None
    outputs = {
        role: assignment[var.name]
        for role, var in f.io_outputs.items()
        if var.name in assignment
    }
    return Solution(
        x=assignment,
        objective=comp.obj_sign * val,
        status="optimal_exact",
        inputs=inputs,
        outputs=outputs,
    )


# ---------------------------------------------------------------------------
# superstructure enumeration


@dataclass
class SuperstructureSolution:
    solution: Solution
    chosen: str
    chosen_index: int
    branches: list = field(default_factory=list)

    @property
    def status(self) -> str:
        return self.solution.status


def solve_superstructure(branches, cfg: SolveConfig = SolveConfig()
                         ) -> SuperstructureSolution:
    """Enumerate choose-exactly-one branches, solving each induced NLP.

    ``branches`` is a list of (label, Formulation); every formulation must
    carry the same objective sense. Infeasible branches are recorded; ties
    between equal objectives go to the lowest branch index.
    """
    if not branches:
        raise ParameterError("no branches to enumerate")
    logs = []
    best = None  # (internal_obj, index, label, Solution)
    sense = None
    for k, (label, form) in enumerate(branches):
        if form.objective is None:
            raise ParameterError(f"branch {label!r} has no objective")
        if sense is None:
            sense = form.objective.sense
        elif form.objective.sense != sense:
            raise ParameterError("branches mix objective senses")
        sol = solve_nlp(form, cfg)
        logs.append(
            {
                "branch": k,
                "label": label,
                "status": sol.status,
                "objective": float(sol.objective)
                if math.isfinite(sol.objective) else None,
                "inputs": None if sol.inputs is None else [
                    float(v) for v in sol.inputs
                ],
            }
        )
        if sol.status in ("optimal_local", "budget_exhausted"):
            internal = (1.0 if sense == "min" else -1.0) * sol.objective
            if best is None or internal < best[0] - 1e-15:
                best = (internal, k, label, sol)
    if best is None:
        empty = Solution(x={}, objective=math.nan, status="infeasible")
        return SuperstructureSolution(empty, chosen="", chosen_index=-1,
                                      branches=logs)
    _, k, label, sol = best
    sol.x = dict(sol.x)
    for j, (blabel, _) in enumerate(branches):
        sol.x[f"gamma.{blabel}"] = 1.0 if j == k else 0.0
    return SuperstructureSolution(sol, chosen=label, chosen_index=k,
                                  branches=logs)
