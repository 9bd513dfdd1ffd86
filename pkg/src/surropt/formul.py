"""Compile trained surrogates into solver-agnostic algebraic formulations.

Each block is a :class:`Formulation`: declared variables, equality/inequality
constraints over an expression DAG, optional objective, and an io map naming
the input variables and the output roles. Piecewise-linear activations are
encoded with big-M inequalities over binary indicator variables whose M
values come from interval propagation of the input box through the trained
weights; everything else is written as closed-form algebra.

``eval_formulation`` fixes the inputs, resolves binaries by their forced
values, propagates defining equalities in emission order, and re-checks every
constraint, so any block can be validated directly against its native model.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn as nn_mod
from .data import SearchSpace
from .errors import (
    BoundsRequiredError,
    EvaluationError,
    ParameterError,
    ShapeError,
)
from .expr import (
    Add,
    Const,
    Exp,
    Expr,
    Log,
    Mul,
    Neg,
    Pow,
    Var,
    as_expr,
    eval_expr,
    is_nonlinear,
    ssum,
    substitute,
    variables_of,
)
from .gp import GpcModel, GprModel

_block_counter = itertools.count()


@dataclass
class Constraint:
    lhs: Expr
    sense: str  # "==", "<=", ">="
    rhs: Expr
    defines: Var | None = None
    label: str = ""

    def __post_init__(self):
        if self.sense not in ("==", "<=", ">="):
            raise ParameterError(f"bad constraint sense {self.sense!r}")
        self.lhs = as_expr(self.lhs)
        self.rhs = as_expr(self.rhs)


@dataclass
class Objective:
    expr: Expr
    sense: str  # "min" or "max"

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise ParameterError(f"bad objective sense {self.sense!r}")
        self.expr = as_expr(self.expr)


@dataclass
class _DefineStep:
    var: Var
    expr: Expr


@dataclass
class _BinaryStep:
    """Forced binary value: 1 when the driving expression clears the threshold."""

    var: Var
    expr: Expr
    threshold: float
    strict: bool = False  # True: 1 iff expr > threshold; else expr >= threshold


class Formulation:
    """Algebraic program emitted by the surrogate compiler."""

    def __init__(self, name: str | None = None):
        self.name = name if name is not None else f"b{next(_block_counter)}"
        self.variables: list[Var] = []
        self.constraints: list[Constraint] = []
        self.objective: Objective | None = None
        self.io_inputs: list[Var] = []
        self.io_outputs: dict[str, Var] = {}
        self.program: list = []

    # -- construction -------------------------------------------------------
    def new_var(self, suffix: str, lb=-math.inf, ub=math.inf, binary=False) -> Var:
        v = Var(f"{self.name}.{suffix}", lb, ub, binary)
        self.variables.append(v)
        return v

    def adopt_var(self, v: Var):
        if v not in self.variables:
            self.variables.append(v)
        return v

    def add_constraint(self, lhs, sense, rhs, label=""):
        self.constraints.append(Constraint(as_expr(lhs), sense, as_expr(rhs),
                                           label=label))

    def define(self, var: Var, expr, label=""):
        """Defining equality var == expr; also drives the evaluator."""
        expr = as_expr(expr)
        self.constraints.append(Constraint(var, "==", expr, defines=var,
                                           label=label))
        self.program.append(_DefineStep(var, expr))

    def force_binary(self, var: Var, expr, threshold: float, strict=False):
        self.program.append(_BinaryStep(var, as_expr(expr), threshold, strict))

    def set_objective(self, expr, sense: str):
        self.objective = Objective(as_expr(expr), sense)

    # -- classification -----------------------------------------------------
    @property
    def binaries(self) -> list[Var]:
        return [v for v in self.variables if v.is_binary]

    def scan_class(self) -> str:
        has_binary = bool(self.binaries)
        exprs = [c.lhs for c in self.constraints] + [c.rhs for c in self.constraints]
        if self.objective is not None:
            exprs.append(self.objective.expr)
        nonlinear = any(is_nonlinear(e) for e in exprs)
        if has_binary and nonlinear:
            return "MINLP"
        if has_binary:
            return "MILP"
        if nonlinear:
            return "NLP"
        return "LP"

    @property
    def class_tag(self) -> str:
        return self.scan_class()

    # -- composition ----------------------------------------------------
    def absorb(self, other: "Formulation"):
        """Merge another block in; its output roles get prefixed by its name."""
        for v in other.variables:
            if v not in self.variables:
                self.variables.append(v)
        self.constraints.extend(other.constraints)
        self.program.extend(other.program)
        for v in other.io_inputs:
            if v not in self.io_inputs:
                self.io_inputs.append(v)
        for role, var in other.io_outputs.items():
            self.io_outputs[f"{other.name}.{role}"] = var
        return self

    def dump(self) -> str:
        """Human-readable listing with stable ordering."""
        lines = [f"formulation {self.name} [{self.class_tag}]", "variables:"]
        for v in self.variables:
            kind = "binary" if v.is_binary else "continuous"
            lines.append(f"  {v.name}: {kind} in [{v.lb:g}, {v.ub:g}]")
        lines.append("constraints:")
        for c in self.constraints:
            tag = f"  # {c.label}" if c.label else ""
            lines.append(f"  {c.lhs!r} {c.sense} {c.rhs!r}{tag}")
        if self.objective is not None:
            lines.append(f"objective: {self.objective.sense} {self.objective.expr!r}")
        return "\n".join(lines)


def bind_inputs(f: Formulation, new_inputs: list[Var]) -> Formulation:
    """Rebuild a block over replacement input variables (for plug-in use)."""
    if len(new_inputs) != len(f.io_inputs):
        raise ShapeError("replacement input count does not match the block")
    mapping = dict(zip(f.io_inputs, new_inputs))
    out = Formulation(name=f.name)
    out.variables = [v for v in f.variables if v not in mapping] + [
        v for v in new_inputs if v not in f.variables
    ]
    for c in f.constraints:
        out.constraints.append(
            Constraint(
                substitute(c.lhs, mapping), c.sense, substitute(c.rhs, mapping),
                defines=c.defines, label=c.label,
            )
        )
    for step in f.program:
        if isinstance(step, _DefineStep):
            out.program.append(_DefineStep(step.var, substitute(step.expr, mapping)))
        else:
            out.program.append(
                _BinaryStep(step.var, substitute(step.expr, mapping),
                            step.threshold, step.strict)
            )
    out.io_inputs = list(new_inputs)
    out.io_outputs = dict(f.io_outputs)
    out.objective = f.objective
    return out


# ---------------------------------------------------------------------------
# interval propagation helpers


def _affine_interval(W, b, lo, hi):
    pos = np.maximum(W, 0.0)
    neg = np.minimum(W, 0.0)
    return pos @ lo + neg @ hi + b, pos @ hi + neg @ lo + b


def _resolve_input_bounds(params, input_bounds, inputs):
    m = params.shape.n_inputs
    if inputs is not None:
        lo = np.array([v.lb for v in inputs])
        hi = np.array([v.ub for v in inputs])
        return lo, hi
    if input_bounds is None:
        return np.full(m, -np.inf), np.full(m, np.inf)
    if isinstance(input_bounds, SearchSpace):
        return input_bounds.lower, input_bounds.upper
    arr = np.asarray(input_bounds, dtype=float)
    if arr.shape != (m, 2):
        raise ShapeError(f"input_bounds must have shape ({m}, 2)")
    return arr[:, 0], arr[:, 1]


# ---------------------------------------------------------------------------
# neural network block


def nn_block(
    params: nn_mod.NetworkParams,
    input_bounds=None,
    inputs: list[Var] | None = None,
    name: str | None = None,
) -> Formulation:
    """Exact algebraic encoding of a trained feedforward network.

    Linear activation gives an LP; tanh, sigmoid and softplus give NLPs with
    one exponential per hidden node; relu and hardsigmoid give MILPs with one
    and two indicator binaries per hidden node respectively. Piecewise kinds
    need finite input bounds for the per-node big-M values.
    """
    shape = params.shape
    kind = shape.activation
    f = Formulation(name)
    lo, hi = _resolve_input_bounds(params, input_bounds, inputs)
    if kind in ("relu", "hardsigmoid") and not (
        np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))
    ):
        raise BoundsRequiredError(
            f"{kind} encoding needs finite input bounds for big-M values"
        )
    if inputs is None:
        inputs = [f.new_var(f"x{j}", lo[j], hi[j]) for j in range(shape.n_inputs)]
    else:
        if len(inputs) != shape.n_inputs:
            raise ShapeError("input variable count does not match the network")
        for v in inputs:
            f.adopt_var(v)
    f.io_inputs = list(inputs)

    a_vars: list = list(inputs)
    a_lo, a_hi = lo.copy(), hi.copy()
    n_maps = len(params.weights)
    for layer in range(n_maps - 1):
        W, b = params.weights[layer], params.biases[layer]
        z_lo, z_hi = _affine_interval(W, b, a_lo, a_hi)
        z_vars, new_a = [], []
        for i in range(W.shape[0]):
            z = f.new_var(f"z{layer + 1}_{i}", z_lo[i], z_hi[i])
            f.define(
                z,
                ssum([Const(W[i, j]) * a_vars[j] for j in range(W.shape[1])])
                + Const(b[i]),
                label=f"layer {layer + 1} affine map, node {i}",
            )
            z_vars.append(z)
        act_lo = nn_mod.activation_eval(kind, z_lo)
        act_hi = nn_mod.activation_eval(kind, z_hi)
        for i, z in enumerate(z_vars):
            a = f.new_var(f"a{layer + 1}_{i}", act_lo[i], act_hi[i])
            if kind == "linear":
                f.define(a, z)
            elif kind == "tanh":
                f.define(a, Const(1.0) - Const(2.0) / (Exp(Const(2.0) * z) + Const(1.0)))
            elif kind == "sigmoid":
                f.define(a, Const(1.0) / (Const(1.0) + Exp(Neg(z))))
            elif kind == "softplus":
                f.define(a, Log(Const(1.0) + Exp(z)))
            elif kind == "relu":
                M = max(abs(z_lo[i]), abs(z_hi[i])) + 1.0
                p = f.new_var(f"p{layer + 1}_{i}", binary=True)
                f.add_constraint(a, ">=", 0.0)
                f.add_constraint(a, ">=", z)
                f.add_constraint(a, "<=", Const(M) * p)
                f.add_constraint(a, "<=", z + Const(M) * (Const(1.0) - p))
                f.force_binary(p, z, 0.0)
                f.program.append(_DefineStep(a, Mul(p, z)))
            else:  # hardsigmoid
                # M covers both the z-side shifts (+-3) and the output gap
                M = max(abs(z_lo[i]), abs(z_hi[i])) + 4.0
                p = f.new_var(f"p{layer + 1}_{i}", binary=True)
                q = f.new_var(f"q{layer + 1}_{i}", binary=True)
                mid = z / Const(6.0) + Const(0.5)
                relax = Const(M) * (Const(1.0) - p + q)
                f.add_constraint(z, "<=", Const(M) * p - Const(3.0))
                f.add_constraint(z, ">=", Const(M) * (p - Const(1.0)) - Const(3.0))
                f.add_constraint(z, "<=", Const(M) * q + Const(3.0))
                f.add_constraint(z, ">=", Const(M) * (q - Const(1.0)) + Const(3.0))
                f.add_constraint(a, "<=", p)
                f.add_constraint(a, ">=", mid - relax)
                f.add_constraint(a, "<=", mid + relax)
                f.add_constraint(a, ">=", q)
                f.force_binary(p, z, -3.0)
                f.force_binary(q, z, 3.0, strict=True)
                f.program.append(
                    _DefineStep(a, Mul(Mul(p, Const(1.0) - q), mid) + q)
                )
            new_a.append(a)
        a_vars = new_a
        a_lo, a_hi = act_lo, act_hi

    W, b = params.weights[-1], params.biases[-1]
    y_lo, y_hi = _affine_interval(W, b, a_lo, a_hi)
    for i in range(W.shape[0]):
        y = f.new_var(f"y{i}", y_lo[i], y_hi[i])
        f.define(
            y,
            ssum([Const(W[i, j]) * a_vars[j] for j in range(W.shape[1])])
            + Const(b[i]),
            label=f"output node {i}",
        )
        f.io_outputs[f"y{i}"] = y
    if shape.is_classifier and shape.n_outputs == 1:
        f.io_outputs["latent"] = f.io_outputs["y0"]
    return f


# ---------------------------------------------------------------------------
# Gaussian-process blocks


def _shared_geometry(model, xvars, cache):
    """Per-training-row sum of squared distances and dot products.

    A caller-owned cache lets several blocks over the same training inputs
    (one model per output column) share these subexpressions, which keeps the
    compiled solver tape small.
    """
    if cache is None:
        cache = {}
    key = "geometry"
    if key in cache:
        x_prev, xv_prev, sumsq, dot = cache[key]
        if xv_prev is not tuple(xvars) and list(xv_prev) != list(xvars):
            raise ParameterError("kernel cache reused with different inputs")
        if not np.array_equal(x_prev, model.x_train):
            raise ParameterError("kernel cache reused with different data")
        return sumsq, dot
    n, m = model.x_train.shape
    sumsq, dot = [], []
    for i in range(n):
        sumsq.append(
            ssum([Pow(xvars[j] - Const(model.x_train[i, j]), 2.0)
                  for j in range(m)])
        )
        dot.append(
            ssum([Const(model.x_train[i, j]) * xvars[j] for j in range(m)])
        )
    cache[key] = (model.x_train.copy(), tuple(xvars), sumsq, dot)
    return sumsq, dot


def _kernel_exprs(model, xvars, cache=None) -> list[Expr]:
    """One covariance expression per training point, shared across consumers."""
    sumsq, dot = _shared_geometry(model, xvars, cache)
    exprs = []
    if isinstance(model, GprModel) and model.spec.kind == "poly":
        sf2 = Const(model.sigma_f2)
        for i in range(model.n):
            exprs.append(Mul(sf2, Pow(Const(model.sigma_02) + dot[i],
                                      float(model.spec.order))))
        return exprs
    inv_2l2 = Const(1.0 / (2.0 * model.length_scale**2))
    sf2 = Const(model.sigma_f2)
    for i in range(model.x_train.shape[0]):
        exprs.append(Mul(sf2, Exp(Neg(Mul(inv_2l2, sumsq[i])))))
    return exprs


def _gp_inputs(f: Formulation, model, inputs, bounds):
    if inputs is not None:
        for v in inputs:
            f.adopt_var(v)
        return list(inputs)
    m = model.x_train.shape[1]
    if bounds is None:
        lo = np.full(m, -np.inf)
        hi = np.full(m, np.inf)
    elif isinstance(bounds, SearchSpace):
        lo, hi = bounds.lower, bounds.upper
    else:
        arr = np.asarray(bounds, dtype=float)
        lo, hi = arr[:, 0], arr[:, 1]
    return [f.new_var(f"x{j}", lo[j], hi[j]) for j in range(m)]


def gpr_mean_block(
    model: GprModel,
    inputs: list[Var] | None = None,
    bounds=None,
    name: str | None = None,
    cache: dict | None = None,
) -> Formulation:
    """Predictive-mean summation: mean = sum_i alpha_i k(X_i, x)."""
    f = Formulation(name)
    xvars = _gp_inputs(f, model, inputs, bounds)
    f.io_inputs = list(xvars)
    ks = _kernel_exprs(model, xvars, cache)
    mean = f.new_var("mean")
    f.define(
        mean,
        ssum([Const(model.alpha[i]) * ks[i] for i in range(model.n)]),
        label="predictive mean",
    )
    f.io_outputs["mean"] = mean
    return f


def _uncertainty_expr(model: GprModel, ks) -> Expr:
    inner = []
    for i in range(model.n):
        row = ssum(
            [Const(model.inv_K[i, j]) * ks[j] for j in range(model.n)]
        )
        inner.append(Mul(ks[i], row))
    return ssum(inner)


def gpr_uncertainty_block(
    model: GprModel,
    inputs: list[Var] | None = None,
    bounds=None,
    name: str | None = None,
    cache: dict | None = None,
) -> Formulation:
    """Uncertainty proxy uproxy = k' K^-1 k.

    The predictive variance is sigma_f2 - uproxy (clamped at zero), the
    standard deviation its square root, and mean +- 1.96 std the 95 percent
    interval; minimising the proxy maximises the variance.
    """
    f = Formulation(name)
    xvars = _gp_inputs(f, model, inputs, bounds)
    f.io_inputs = list(xvars)
    ks = _kernel_exprs(model, xvars, cache)
    proxy = f.new_var("uproxy")
    f.define(proxy, _uncertainty_expr(model, ks), label="uncertainty proxy")
    f.io_outputs["uproxy"] = proxy
    return f


def gpr_joint_block(
    model: GprModel,
    inputs: list[Var] | None = None,
    bounds=None,
    name: str | None = None,
    cache: dict | None = None,
) -> Formulation:
    """Mean and uncertainty proxy sharing one set of kernel expressions."""
    f = Formulation(name)
    xvars = _gp_inputs(f, model, inputs, bounds)
    f.io_inputs = list(xvars)
    ks = _kernel_exprs(model, xvars, cache)
    mean = f.new_var("mean")
    f.define(mean, ssum([Const(model.alpha[i]) * ks[i] for i in range(model.n)]),
             label="predictive mean")
    proxy = f.new_var("uproxy")
    f.define(proxy, _uncertainty_expr(model, ks), label="uncertainty proxy")
    f.io_outputs["mean"] = mean
    f.io_outputs["uproxy"] = proxy
    return f


def gpc_block(
    model: GpcModel,
    inputs: list[Var] | None = None,
    bounds=None,
    name: str | None = None,
    cache: dict | None = None,
) -> Formulation:
    """Probit-squashed classifier probability plus its pre-sigmoid latent.

    The latent output changes sign exactly where the probability crosses 0.5,
    so feasibility can be enforced as ``latent >= 0``.
    """
    f = Formulation(name)
    xvars = _gp_inputs(f, model, inputs, bounds)
    f.io_inputs = list(xvars)
    ks = _kernel_exprs(model, xvars, cache)
    n = model.n
    raw = ssum([Const(model.delta[i]) * ks[i] for i in range(n)])
    quad = ssum(
        [
            Mul(ks[i], ssum([Const(model.inv_P[i, j]) * ks[j] for j in range(n)]))
            for i in range(n)
        ]
    )
    scale = Pow(
        Const(1.0) + Const(math.pi / 8.0) * (Const(model.sigma_f2) - quad),
        -0.5,
    )
    latent = f.new_var("latent")
    f.define(latent, Mul(raw, scale), label="probit-scaled latent")
    prob = f.new_var("prob", 0.0, 1.0)
    f.define(prob, Const(1.0) / (Const(1.0) + Exp(Neg(latent))),
             label="class-1 probability")
    f.io_outputs["latent"] = latent
    f.io_outputs["prob"] = prob
    return f


# ---------------------------------------------------------------------------
# interpreter


def eval_formulation(f: Formulation, x, tol: float = 1e-6,
                     check_constraints: bool = True) -> dict[str, float]:
    """Evaluate a block at fixed inputs and verify every constraint.

    Binaries are set to their forced values (an unforced binary raises);
    defining equalities run in emission order. Returns the io outputs by role.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(x) != len(f.io_inputs):
        raise ShapeError(
            f"expected {len(f.io_inputs)} inputs, got {len(x)}"
        )
    env: dict[Var, float] = {}
    for v, xv in zip(f.io_inputs, x):
        if xv < v.lb - 1e-9 or xv > v.ub + 1e-9:
            raise EvaluationError(
                f"input {v.name}={xv:g} outside its bounds [{v.lb:g}, {v.ub:g}]"
            )
        env[v] = float(xv)
    for step in f.program:
        if isinstance(step, _DefineStep):
            env[step.var] = eval_expr(step.expr, env)
        else:
            val = eval_expr(step.expr, env)
            if step.strict:
                env[step.var] = 1.0 if val > step.threshold else 0.0
            else:
                env[step.var] = 1.0 if val >= step.threshold else 0.0
    unresolved = [
        v.name
        for c in f.constraints
        for v in variables_of(c.lhs) + variables_of(c.rhs)
        if v not in env
    ]
    if unresolved:
        raise EvaluationError(
            f"variables not forced at the fixed input: {sorted(set(unresolved))}"
        )
    if check_constraints:
        for c in f.constraints:
            lv = eval_expr(c.lhs, env)
            rv = eval_expr(c.rhs, env)
            scale = 1.0 + max(abs(lv), abs(rv))
            if c.sense == "==" and abs(lv - rv) > tol * scale:
                raise EvaluationError(
                    f"equality violated: {c.label or c.lhs!r} ({lv:g} != {rv:g})"
                )
            if c.sense == "<=" and lv - rv > tol * scale:
                raise EvaluationError(
                    f"constraint violated: {c.label or c.lhs!r} ({lv:g} > {rv:g})"
                )
            if c.sense == ">=" and rv - lv > tol * scale:
                raise EvaluationError(
                    f"constraint violated: {c.label or c.lhs!r} ({lv:g} < {rv:g})"
                )
    return {role: env[var] for role, var in f.io_outputs.items()}
