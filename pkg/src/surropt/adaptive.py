"""Acquisition functions and adaptive-sampling problem builders.

Point-wise acquisition scoring (expected improvement and friends) plus
constructors for the solvable sampling problems: maximise model uncertainty,
maximise the modified expected improvement, and the Delaunay region
heuristics that place the next sample at a simplex centroid. Classifier
blocks can be plugged into any of them as feasibility constraints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SearchSpace
from .errors import EmptyEligibleError, InternalError, ParameterError
from .expr import Const, Exp, Mul, Neg, Pow, Var, ssum
from .formul import Formulation, bind_inputs, eval_formulation, gpr_joint_block, \
    gpr_uncertainty_block
from .geom import Triangulation, triangulate
from .gp import GprModel, gpr_predict

ACQUISITION_KINDS = (
    "ei", "modified_ei", "pi", "ucb", "max_std", "explore_triangle",
    "exploit_triangle",
)

# scale of the smooth clamp keeping the modified-EI variance term positive
# where round-off drives (sigma_f2 - uproxy) slightly negative at data points
_VAR_SMOOTH = 1e-9


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = "modified_ei"
    xi: float = 0.01
    sense: str = "max"  # direction of the underlying objective

    def __post_init__(self):
        if self.kind not in ACQUISITION_KINDS:
            raise ParameterError(f"unknown acquisition {self.kind!r}")
        if not math.isfinite(self.xi) or self.xi < 0.0:
            raise ParameterError("xi must be finite and nonnegative")
        if self.sense not in ("max", "min"):
            raise ParameterError("sense must be 'max' or 'min'")


def norm_cdf(u: float) -> float:
    return 0.5 * (1.0 + math.erf(u / math.sqrt(2.0)))


def norm_pdf(u: float) -> float:
    return math.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)


def acquisition_value(spec: AcquisitionSpec, model: GprModel, x,
                      y_best: float) -> float:
    """Score a candidate point; larger is better under every kind.

    The formulas are written for maximisation of the underlying objective;
    with ``sense='min'`` the prediction and incumbent are negated first.
    Zero predictive deviation falls back to the limit forms.
    """
    mean, var = gpr_predict(model, np.asarray(x, dtype=float))
    s = math.sqrt(var)
    if spec.sense == "min":
        mean, y_best = -mean, -y_best
    delta = mean - y_best - spec.xi
    if spec.kind == "ucb":
        return mean + spec.xi * s
    if spec.kind == "max_std":
        return s
    if s == 0.0:
        if spec.kind == "ei":
            return max(delta, 0.0)
        if spec.kind == "modified_ei":
            return 0.0
        return 1.0 if delta > 0.0 else 0.0  # pi
    u = delta / s
    if spec.kind == "ei":
        return delta * norm_cdf(u) + s * norm_pdf(u)
    if spec.kind == "modified_ei":
        return s * norm_pdf(u)
    if spec.kind == "pi":
        return norm_cdf(u)
    raise ParameterError(f"{spec.kind!r} is not a point-wise acquisition")


def relative_sq_error(y_true: float, y_pred: float) -> float:
    """((y - yhat) / y)^2; the caller must screen out y = 0."""
    if y_true == 0.0:
        raise ZeroDivisionError("relative squared error is undefined at y = 0")
    return ((y_true - y_pred) / y_true) ** 2


def departure(model_full: GprModel, model_minus_j: GprModel, x) -> float:
    """Impact of one sample on the prediction: full-model minus leave-one-out."""
    mu_full, _ = gpr_predict(model_full, np.asarray(x, dtype=float))
    mu_loo, _ = gpr_predict(model_minus_j, np.asarray(x, dtype=float))
    return mu_full - mu_loo


# ---------------------------------------------------------------------------
# solvable problems


def build_max_std_problem(model: GprModel, space: SearchSpace,
                          name: str | None = None) -> Formulation:
    """Minimise the uncertainty proxy over the box (maximises the variance)."""
    f = gpr_uncertainty_block(model, bounds=space, name=name)
    f.set_objective(f.io_outputs["uproxy"], "min")
    return f


def build_modified_ei_problem(
    model: GprModel,
    y_best: float,
    xi: float,
    sense: str,
    space: SearchSpace,
    name: str | None = None,
) -> Formulation:
    """Maximise sqrt(D / 2 pi) * exp(-(mean - best - xi)^2 / (2 D)).

    D is the predictive variance sigma_f2 - uproxy passed through a smooth
    positive clamp 0.5 (D + sqrt(D^2 + eps^2)), which keeps the square root
    and the division well-defined where round-off drives the raw variance a
    hair negative at training points. Mean and incumbent are negated for
    ``sense='min'``.
    """
    if sense not in ("max", "min"):
        raise ParameterError("sense must be 'max' or 'min'")
    f = gpr_joint_block(model, bounds=space, name=name)
    mean = f.io_outputs["mean"]
    proxy = f.io_outputs["uproxy"]
    raw = Const(model.sigma_f2) - proxy
    eps = _VAR_SMOOTH * max(model.sigma_f2, 1.0)
    variance = Mul(
        Const(0.5), raw + Pow(Pow(raw, 2.0) + Const(eps * eps), 0.5)
    )
    if sense == "max":
        delta = mean - Const(y_best + xi)
    else:
        delta = Const(y_best - xi) - mean
    obj = Mul(
        Pow(Mul(Const(1.0 / (2.0 * math.pi)), variance), 0.5),
        Exp(Neg(Mul(Pow(delta, 2.0), Pow(Mul(Const(2.0), variance), -1.0)))),
    )
    f.set_objective(obj, "max")
    return f


@dataclass
class RegionSelection:
    """Delaunay-region choice: eligible simplices, their sizes, and the pick."""

    triangulation: Triangulation
    eligible: np.ndarray
    scores: np.ndarray
    chosen: int

    @property
    def new_x(self) -> np.ndarray:
        return self.triangulation.centroids[self.chosen]


def _select_largest(tri: Triangulation, eligible: np.ndarray) -> RegionSelection:
    if eligible.size == 0:
        raise EmptyEligibleError("no eligible region to sample")
    scores = tri.volumes[eligible]
    chosen = int(eligible[int(np.argmax(scores))])  # ties: lowest index
    return RegionSelection(tri, eligible, scores, chosen)


def _filter_by_bounds(tri: Triangulation, bounds: SearchSpace | None) -> np.ndarray:
    idx = np.arange(len(tri.simplices))
    if bounds is None:
        return idx
    keep = [i for i in idx if bounds.contains(tri.centroids[i], atol=1e-12)]
    return np.array(keep, dtype=int)


def build_explore_triangle_problem(
    points,
    space: SearchSpace | None = None,
    include_vertices: bool = False,
    bounds: SearchSpace | None = None,
) -> RegionSelection:
    """Choose the largest Delaunay region; the sample goes at its centroid.

    ``bounds`` restricts eligibility to centroids inside an adjusted box
    (defaults to ``space``); ties break to the lowest simplex index.
    """
    tri = triangulate(points, space=space, include_vertices=include_vertices)
    eligible = _filter_by_bounds(tri, bounds if bounds is not None else space)
    if eligible.size == 0:
        raise EmptyEligibleError("all centroids fall outside the adjusted bounds")
    return _select_largest(tri, eligible)


def build_exploit_triangle_problem(
    points,
    y,
    sense: str,
    space: SearchSpace | None = None,
    include_vertices: bool = False,
    bounds: SearchSpace | None = None,
) -> RegionSelection:
    """Choose the largest region incident to the current best sample."""
    if sense not in ("max", "min"):
        raise ParameterError("sense must be 'max' or 'min'")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != points.shape[0]:
        raise ParameterError("y must align with the sample rows")
    best = int(np.argmax(y) if sense == "max" else np.argmin(y))
    tri = triangulate(points, space=space, include_vertices=include_vertices)
    try:
        vertex = tri.find_point(points[best], tol=1e-9)
    except ParameterError as exc:
        raise InternalError(
            "current best sample is not a triangulation vertex"
        ) from exc
    incident = np.array(tri.incident_simplices(vertex), dtype=int)
    in_bounds = set(
        _filter_by_bounds(tri, bounds if bounds is not None else space).tolist()
    )
    eligible = np.array([i for i in incident if i in in_bounds], dtype=int)
    if eligible.size == 0:
        raise EmptyEligibleError(
            "no region incident to the best sample lies inside the bounds"
        )
    return _select_largest(tri, eligible)


def region_milp(sel: RegionSelection, name: str | None = None) -> Formulation:
    """Choose-one MILP over the eligible regions (for the embedded solver)."""
    tri = sel.triangulation
    m = tri.dim
    f = Formulation(name)
    cents = tri.centroids[sel.eligible]
    xvars = [
        f.new_var(f"x{j}", float(cents[:, j].min()), float(cents[:, j].max()))
        for j in range(m)
    ]
    f.io_inputs = list(xvars)
    zvars = [f.new_var(f"z{int(i)}", binary=True) for i in sel.eligible]
    for j in range(m):
        f.add_constraint(
            xvars[j], "==",
            ssum([Const(cents[r, j]) * zvars[r] for r in range(len(zvars))]),
            label=f"sample bound to chosen centroid, dim {j}",
        )
    f.add_constraint(ssum(zvars), "==", 1.0, label="choose exactly one region")
    f.set_objective(
        ssum([Const(tri.volumes[i]) * z for i, z in zip(sel.eligible, zvars)]),
        "max",
    )
    return f


def adjust_bounds(space: SearchSpace, center, shrink: float) -> SearchSpace:
    """Shrink the box around a center, clipped back into the original box."""
    if not 0.0 < shrink <= 1.0:
        raise ParameterError("shrink must lie in (0, 1]")
    center = np.asarray(center, dtype=float)
    if not space.contains(center, atol=1e-12):
        raise ParameterError("center must lie inside the space")
    half = 0.5 * (space.upper - space.lower) * shrink
    lo = np.maximum(space.lower, center - half)
    hi = np.minimum(space.upper, center + half)
    return SearchSpace(list(zip(lo, hi)))


def with_feasibility(problem, classifier_block: Formulation,
                     threshold_latent: float = 0.0):
    """Plug a classifier's latent constraint into a sampling problem.

    NLP formulations gain ``latent >= threshold``; region selections keep
    only simplices whose centroid satisfies it (re-picking the largest).
    """
    if "latent" not in classifier_block.io_outputs:
        raise ParameterError("classifier block exposes no latent output")
    if isinstance(problem, Formulation):
        bound = bind_inputs(classifier_block, problem.io_inputs)
        out = Formulation(name=problem.name)
        out.variables = list(problem.variables)
        out.constraints = list(problem.constraints)
        out.program = list(problem.program)
        out.io_inputs = list(problem.io_inputs)
        out.io_outputs = dict(problem.io_outputs)
        out.objective = problem.objective
        out.absorb(bound)
        out.add_constraint(
            bound.io_outputs["latent"], ">=", threshold_latent,
            label="classifier feasibility",
        )
        return out
    if isinstance(problem, RegionSelection):
        tri = problem.triangulation
        keep = []
        for i in problem.eligible:
            latent = eval_formulation(
                classifier_block, tri.centroids[int(i)]
            )["latent"]
            if latent >= threshold_latent:
                keep.append(int(i))
        if not keep:
            raise EmptyEligibleError("no region centroid is classifier-feasible")
        return _select_largest(tri, np.array(keep, dtype=int))
    raise ParameterError(f"unsupported problem type {type(problem).__name__}")
