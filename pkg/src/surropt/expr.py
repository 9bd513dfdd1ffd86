"""Algebraic expression DAG shared by formulation blocks and solvers.

Nodes cover constants, variable references, arithmetic, powers, exp/log and
n-ary summation. Evaluation is iterative (no recursion limits), memoised per
call so shared subtrees cost once, and comes in two flavours: plain values
and forward-mode value/gradient pairs used by the NLP solver.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import EvaluationError, ParameterError

_EXP_CLIP = 700.0  # keeps exp() finite on wild intermediate iterates


class Expr:
    __slots__ = ()
    children: tuple = ()

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return Add((self, as_expr(other)))

    def __radd__(self, other):
        return Add((as_expr(other), self))

    def __sub__(self, other):
        return Add((self, Neg(as_expr(other))))

    def __rsub__(self, other):
        return Add((as_expr(other), Neg(self)))

    def __mul__(self, other):
        return Mul(self, as_expr(other))

    def __rmul__(self, other):
        return Mul(as_expr(other), self)

    def __truediv__(self, other):
        return Div(self, as_expr(other))

    def __rtruediv__(self, other):
        return Div(as_expr(other), self)

    def __pow__(self, p):
        return Pow(self, float(p))

    def __neg__(self):
        return Neg(self)


def as_expr(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, np.floating, np.integer)):
        return Const(float(v))
    raise ParameterError(f"cannot convert {type(v).__name__} to an expression")


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)

    def __repr__(self):
        return _fmt_num(self.value)


class Var(Expr):
    """Decision-variable reference; identity (not name) is the key."""

    __slots__ = ("name", "lb", "ub", "is_binary")

    def __init__(self, name: str, lb: float = -math.inf, ub: float = math.inf,
                 is_binary: bool = False):
        self.name = name
        self.lb = float(lb)
        self.ub = float(ub)
        self.is_binary = bool(is_binary)
        if is_binary:
            self.lb, self.ub = 0.0, 1.0

    def __repr__(self):
        return self.name


class Add(Expr):
    __slots__ = ("children",)

    def __init__(self, terms):
        flat = []
        for t in terms:
            if isinstance(t, Add):
                flat.extend(t.children)
            else:
                flat.append(t)
        self.children = tuple(flat)

    def __repr__(self):
        parts = []
        for c in self.children:
            s = repr(c)
            if isinstance(c, Neg):
                parts.append(f"- {repr(c.children[0])}")
            elif parts:
                parts.append(f"+ {s}")
            else:
                parts.append(s)
        return "(" + " ".join(parts) + ")"


class Neg(Expr):
    __slots__ = ("children",)

    def __init__(self, a):
        self.children = (a,)

    def __repr__(self):
        return f"-{repr(self.children[0])}"


class Mul(Expr):
    __slots__ = ("children",)

    def __init__(self, a, b):
        self.children = (a, b)

    def __repr__(self):
        return f"({repr(self.children[0])} * {repr(self.children[1])})"


class Div(Expr):
    __slots__ = ("children",)

    def __init__(self, a, b):
        self.children = (a, b)

    def __repr__(self):
        return f"({repr(self.children[0])} / {repr(self.children[1])})"


class Pow(Expr):
    __slots__ = ("children", "exponent")

    def __init__(self, base, exponent: float):
        self.children = (base,)
        self.exponent = float(exponent)

    def __repr__(self):
        return f"({repr(self.children[0])} ** {_fmt_num(self.exponent)})"


class Exp(Expr):
    __slots__ = ("children",)

    def __init__(self, a):
        self.children = (a,)

    def __repr__(self):
        return f"exp({repr(self.children[0])})"


class Log(Expr):
    __slots__ = ("children",)

    def __init__(self, a):
        self.children = (a,)

    def __repr__(self):
        return f"log({repr(self.children[0])})"


def ssum(terms) -> Expr:
    """Summation node over an iterable of expressions."""
    terms = tuple(terms)
    if not terms:
        return Const(0.0)
    if len(terms) == 1:
        return as_expr(terms[0])
    return Add(tuple(as_expr(t) for t in terms))


def _fmt_num(v: float) -> str:
    return format(v, "g")


# ---------------------------------------------------------------------------
# traversal and evaluation


def _postorder(root: Expr):
    """Iterative post-order over the DAG, each node yielded once."""
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded or not node.children:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for c in node.children:
                if id(c) not in seen:
                    stack.append((c, False))
    return order


def _safe_exp(v: float) -> float:
    return math.exp(v) if v < _EXP_CLIP else math.exp(_EXP_CLIP)


def eval_expr(root: Expr, env: dict) -> float:
    """Evaluate the DAG; ``env`` maps Var (by identity) to float."""
    vals: dict[int, float] = {}
    for node in _postorder(root):
        if isinstance(node, Const):
            v = node.value
        elif isinstance(node, Var):
            try:
                v = env[node]
            except KeyError:
                raise EvaluationError(f"unresolved variable {node.name!r}") from None
        elif isinstance(node, Add):
            v = math.fsum(vals[id(c)] for c in node.children) if len(
                node.children) > 8 else sum(vals[id(c)] for c in node.children)
        elif isinstance(node, Neg):
            v = -vals[id(node.children[0])]
        elif isinstance(node, Mul):
            v = vals[id(node.children[0])] * vals[id(node.children[1])]
        elif isinstance(node, Div):
            denom = vals[id(node.children[1])]
            if denom == 0.0:
                raise EvaluationError("division by zero during evaluation")
            v = vals[id(node.children[0])] / denom
        elif isinstance(node, Pow):
            v = math.pow(vals[id(node.children[0])], node.exponent)
        elif isinstance(node, Exp):
            v = _safe_exp(vals[id(node.children[0])])
        elif isinstance(node, Log):
            arg = vals[id(node.children[0])]
            if arg <= 0.0:
                raise EvaluationError("log of a non-positive value")
            v = math.log(arg)
        else:
            raise EvaluationError(f"unknown node type {type(node).__name__}")
        vals[id(node)] = v
    return vals[id(root)]


def eval_dual(root: Expr, env: dict, grad_env: dict) -> tuple[float, np.ndarray]:
    """Forward-mode evaluation: value plus gradient over seed directions.

    ``grad_env`` maps Var identities to seed gradient rows (all the same
    length d); variables missing from it are treated as constants.
    """
    d = len(next(iter(grad_env.values()))) if grad_env else 0
    zero = np.zeros(d)
    vals: dict[int, float] = {}
    grads: dict[int, np.ndarray] = {}
    for node in _postorder(root):
        if isinstance(node, Const):
            v, g = node.value, zero
        elif isinstance(node, Var):
            try:
                v = env[node]
            except KeyError:
                raise EvaluationError(f"unresolved variable {node.name!r}") from None
            g = grad_env.get(node, zero)
        elif isinstance(node, Add):
            v = sum(vals[id(c)] for c in node.children)
            g = zero
            for c in node.children:
                g = g + grads[id(c)]
        elif isinstance(node, Neg):
            v = -vals[id(node.children[0])]
            g = -grads[id(node.children[0])]
        elif isinstance(node, Mul):
            a, b = node.children
            va, vb = vals[id(a)], vals[id(b)]
            v = va * vb
            g = grads[id(a)] * vb + grads[id(b)] * va
        elif isinstance(node, Div):
            a, b = node.children
            va, vb = vals[id(a)], vals[id(b)]
            if vb == 0.0:
                raise EvaluationError("division by zero during evaluation")
            v = va / vb
            g = (grads[id(a)] - v * grads[id(b)]) / vb
        elif isinstance(node, Pow):
            a = node.children[0]
            va, p = vals[id(a)], node.exponent
            v = math.pow(va, p)
            if va == 0.0:
                dv = 0.0 if p > 1.0 else (p if p == 1.0 else math.inf)
                dv = 0.0 if not math.isfinite(dv) else dv
            else:
                dv = p * math.pow(va, p - 1.0)
            g = dv * grads[id(a)]
        elif isinstance(node, Exp):
            a = node.children[0]
            v = _safe_exp(vals[id(a)])
            g = v * grads[id(a)]
        elif isinstance(node, Log):
            a = node.children[0]
            va = vals[id(a)]
            if va <= 0.0:
                raise EvaluationError("log of a non-positive value")
            v = math.log(va)
            g = grads[id(a)] / va
        else:
            raise EvaluationError(f"unknown node type {type(node).__name__}")
        vals[id(node)] = v
        grads[id(node)] = g
    return vals[id(root)], grads[id(root)]


def substitute(root: Expr, mapping: dict) -> Expr:
    """Rebuild the DAG with Var nodes replaced per ``mapping`` (Var -> Expr)."""
    out: dict[int, Expr] = {}
    for node in _postorder(root):
        if isinstance(node, Var):
            out[id(node)] = mapping.get(node, node)
        elif isinstance(node, Const):
            out[id(node)] = node
        elif isinstance(node, Add):
            out[id(node)] = Add(tuple(out[id(c)] for c in node.children))
        elif isinstance(node, Neg):
            out[id(node)] = Neg(out[id(node.children[0])])
        elif isinstance(node, Mul):
            out[id(node)] = Mul(out[id(node.children[0])], out[id(node.children[1])])
        elif isinstance(node, Div):
            out[id(node)] = Div(out[id(node.children[0])], out[id(node.children[1])])
        elif isinstance(node, Pow):
            out[id(node)] = Pow(out[id(node.children[0])], node.exponent)
        elif isinstance(node, Exp):
            out[id(node)] = Exp(out[id(node.children[0])])
        elif isinstance(node, Log):
            out[id(node)] = Log(out[id(node.children[0])])
    return out[id(root)]


def variables_of(root: Expr) -> list[Var]:
    """Distinct Var nodes reachable from ``root``, in first-seen order."""
    seen = []
    ids = set()
    for node in _postorder(root):
        if isinstance(node, Var) and id(node) not in ids:
            ids.add(id(node))
            seen.append(node)
    return seen


# ---------------------------------------------------------------------------
# compiled tape

_OP_CONST, _OP_FREE, _OP_ADD, _OP_NEG, _OP_MUL, _OP_DIV, _OP_POW, _OP_EXP, \
    _OP_LOG = range(9)


class Tape:
    """One flat program for a defining chain plus output expressions.

    Shared subexpressions across all steps and outputs are evaluated once per
    point. Gradients are forward-mode over the free variables, with ``None``
    standing in for identically-zero gradients so constant-heavy regions of
    the DAG cost nothing.
    """

    def __init__(self, steps, outputs, free_vars, pinned=None):
        pinned = pinned or {}
        self._free_index = {v: k for k, v in enumerate(free_vars)}
        self._pinned = pinned
        self._slot_of: dict[int, int] = {}
        self._var_slot: dict[Var, int] = {}
        self.ins: list[tuple] = []

        for var, expr in steps:
            self._var_slot[var] = self._emit(expr)
        self.out_slots = [self._emit(e) for e in outputs]
        self.var_slots = dict(self._var_slot)

    def _new(self, instr) -> int:
        self.ins.append(instr)
        return len(self.ins) - 1

    def _emit(self, root: Expr) -> int:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            nid = id(node)
            if nid in self._slot_of:
                continue
            if isinstance(node, Var):
                if node in self._var_slot:
                    self._slot_of[nid] = self._var_slot[node]
                elif node in self._pinned:
                    self._slot_of[nid] = self._new(
                        (_OP_CONST, float(self._pinned[node]))
                    )
                elif node in self._free_index:
                    self._slot_of[nid] = self._new(
                        (_OP_FREE, self._free_index[node])
                    )
                else:
                    raise EvaluationError(f"unresolved variable {node.name!r}")
                continue
            if isinstance(node, Const):
                self._slot_of[nid] = self._new((_OP_CONST, node.value))
                continue
            if not expanded:
                stack.append((node, True))
                for c in node.children:
                    if id(c) not in self._slot_of:
                        stack.append((c, False))
                continue
            slots = tuple(self._slot_of[id(c)] for c in node.children)
            if isinstance(node, Add):
                instr = (_OP_ADD, slots)
            elif isinstance(node, Neg):
                instr = (_OP_NEG, slots[0])
            elif isinstance(node, Mul):
                instr = (_OP_MUL, slots[0], slots[1])
            elif isinstance(node, Div):
                instr = (_OP_DIV, slots[0], slots[1])
            elif isinstance(node, Pow):
                instr = (_OP_POW, slots[0], node.exponent)
            elif isinstance(node, Exp):
                instr = (_OP_EXP, slots[0])
            elif isinstance(node, Log):
                instr = (_OP_LOG, slots[0])
            else:
                raise EvaluationError(f"unknown node type {type(node).__name__}")
            self._slot_of[nid] = self._new(instr)
        return self._slot_of[id(root)]

    def run(self, x, need_grad: bool = True):
        """Values (and forward-mode gradients) at all output slots.

        Returns (values, grads); each gradient is a length-d tuple or None
        when identically zero.
        """
        d = len(x)
        n = len(self.ins)
        vals = [0.0] * n
        grads = [None] * n
        seeds = [tuple(1.0 if k == j else 0.0 for k in range(d))
                 for j in range(d)]
        for i, instr in enumerate(self.ins):
            op = instr[0]
            if op == _OP_MUL:
                a, b = instr[1], instr[2]
                va, vb = vals[a], vals[b]
                vals[i] = va * vb
                if need_grad:
                    ga, gb = grads[a], grads[b]
                    if ga is None and gb is None:
                        pass
                    elif gb is None:
                        grads[i] = tuple(gj * vb for gj in ga)
                    elif ga is None:
                        grads[i] = tuple(gj * va for gj in gb)
                    else:
                        grads[i] = tuple(
                            ga[k] * vb + gb[k] * va for k in range(d)
                        )
            elif op == _OP_ADD:
                slots = instr[1]
                vals[i] = math.fsum(vals[s] for s in slots) if len(slots) > 8 \
                    else sum(vals[s] for s in slots)
                if need_grad:
                    parts = [grads[s] for s in slots if grads[s] is not None]
                    if len(parts) == 1:
                        grads[i] = parts[0]
                    elif parts:
                        grads[i] = tuple(
                            sum(p[k] for p in parts) for k in range(d)
                        )
            elif op == _OP_CONST:
                vals[i] = instr[1]
            elif op == _OP_FREE:
                vals[i] = float(x[instr[1]])
                if need_grad:
                    grads[i] = seeds[instr[1]]
            elif op == _OP_EXP:
                a = instr[1]
                v = _safe_exp(vals[a])
                vals[i] = v
                if need_grad and grads[a] is not None:
                    grads[i] = tuple(v * gj for gj in grads[a])
            elif op == _OP_POW:
                a, p = instr[1], instr[2]
                va = vals[a]
                vals[i] = math.pow(va, p)
                if need_grad and grads[a] is not None:
                    if va == 0.0:
                        dv = 1.0 if p == 1.0 else 0.0
                    else:
                        dv = p * math.pow(va, p - 1.0)
                    grads[i] = tuple(dv * gj for gj in grads[a])
            elif op == _OP_NEG:
                a = instr[1]
                vals[i] = -vals[a]
                if need_grad and grads[a] is not None:
                    grads[i] = tuple(-gj for gj in grads[a])
            elif op == _OP_DIV:
                a, b = instr[1], instr[2]
                vb = vals[b]
                if vb == 0.0:
                    raise EvaluationError("division by zero during evaluation")
                v = vals[a] / vb
                vals[i] = v
                if need_grad:
                    ga, gb = grads[a], grads[b]
                    if ga is None and gb is None:
                        pass
                    elif gb is None:
                        grads[i] = tuple(gj / vb for gj in ga)
                    elif ga is None:
                        grads[i] = tuple(-v * gj / vb for gj in gb)
                    else:
                        grads[i] = tuple(
                            (ga[k] - v * gb[k]) / vb for k in range(d)
                        )
            else:  # _OP_LOG
                a = instr[1]
                va = vals[a]
                if va <= 0.0:
                    raise EvaluationError("log of a non-positive value")
                vals[i] = math.log(va)
                if need_grad and grads[a] is not None:
                    grads[i] = tuple(gj / va for gj in grads[a])
        zero = tuple(0.0 for _ in range(d))
        out_vals = [vals[s] for s in self.out_slots]
        out_grads = [
            (grads[s] if grads[s] is not None else zero) if need_grad else None
            for s in self.out_slots
        ]
        return out_vals, out_grads

    def var_values(self, x) -> dict:
        """Values of all defined variables at ``x`` (no gradients)."""
        vals = self._values_only(x)
        return {v: vals[s] for v, s in self.var_slots.items()}

    def output_values(self, x) -> list[float]:
        vals = self._values_only(x)
        return [vals[s] for s in self.out_slots]

    def _values_only(self, x):
        n = len(self.ins)
        vals = [0.0] * n
        for i, instr in enumerate(self.ins):
            op = instr[0]
            if op == _OP_CONST:
                vals[i] = instr[1]
            elif op == _OP_FREE:
                vals[i] = float(x[instr[1]])
            elif op == _OP_ADD:
                slots = instr[1]
                vals[i] = math.fsum(vals[s] for s in slots) if len(slots) > 8 \
                    else sum(vals[s] for s in slots)
            elif op == _OP_NEG:
                vals[i] = -vals[instr[1]]
            elif op == _OP_MUL:
                vals[i] = vals[instr[1]] * vals[instr[2]]
            elif op == _OP_DIV:
                vals[i] = vals[instr[1]] / vals[instr[2]]
            elif op == _OP_POW:
                vals[i] = math.pow(vals[instr[1]], instr[2])
            elif op == _OP_EXP:
                vals[i] = _safe_exp(vals[instr[1]])
            else:
                vals[i] = math.log(vals[instr[1]])
        return vals


def is_nonlinear(root: Expr) -> bool:
    """True when the expression is not affine in its variables."""
    return affine_coeffs(root) is None


def affine_coeffs(root: Expr):
    """Extract (coeffs: dict[Var, float], constant) or None if non-affine."""
    out: dict[int, tuple | None] = {}
    for node in _postorder(root):
        if isinstance(node, Const):
            out[id(node)] = ({}, node.value)
        elif isinstance(node, Var):
            out[id(node)] = ({node: 1.0}, 0.0)
        elif isinstance(node, Add):
            parts = [out[id(c)] for c in node.children]
            if any(p is None for p in parts):
                out[id(node)] = None
                continue
            coeffs: dict = {}
            const = 0.0
            for cmap, c0 in parts:
                const += c0
                for var, coef in cmap.items():
                    coeffs[var] = coeffs.get(var, 0.0) + coef
            out[id(node)] = (coeffs, const)
        elif isinstance(node, Neg):
            part = out[id(node.children[0])]
            out[id(node)] = None if part is None else (
                {v: -c for v, c in part[0].items()}, -part[1]
            )
        elif isinstance(node, Mul):
            pa, pb = out[id(node.children[0])], out[id(node.children[1])]
            if pa is None or pb is None:
                out[id(node)] = None
            elif not pa[0]:
                out[id(node)] = ({v: pa[1] * c for v, c in pb[0].items()},
                                 pa[1] * pb[1])
            elif not pb[0]:
                out[id(node)] = ({v: pb[1] * c for v, c in pa[0].items()},
                                 pa[1] * pb[1])
            else:
                out[id(node)] = None
        elif isinstance(node, Div):
            pa, pb = out[id(node.children[0])], out[id(node.children[1])]
            if pa is None or pb is None or pb[0] or pb[1] == 0.0:
                out[id(node)] = None
            else:
                out[id(node)] = ({v: c / pb[1] for v, c in pa[0].items()},
                                 pa[1] / pb[1])
        elif isinstance(node, Pow):
            pa = out[id(node.children[0])]
            if pa is None:
                out[id(node)] = None
            elif not pa[0]:
                out[id(node)] = ({}, math.pow(pa[1], node.exponent))
            elif node.exponent == 1.0:
                out[id(node)] = pa
            else:
                out[id(node)] = None
        elif isinstance(node, (Exp, Log)):
            pa = out[id(node.children[0])]
            if pa is not None and not pa[0]:
                fn = math.exp if isinstance(node, Exp) else math.log
                out[id(node)] = ({}, fn(pa[1]))
            else:
                out[id(node)] = None
        else:
            out[id(node)] = None
    return out[id(root)]
