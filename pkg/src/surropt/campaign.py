"""Campaign drivers: sampling, fitting, the adaptive DFO loop, and the
superstructure studies (single objective, epsilon-constraint sweep,
stochastic expectation), plus plot-ready surface emission.

Every command is a plain function of a :class:`RunConfig`; the CLI is a thin
wrapper. All randomness flows from the run seed, evaluation records carry no
timestamps, and reports are written with full-precision floats, so a repeated
run replays to byte-identical logs.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn as nn_mod
from .adaptive import (
    adjust_bounds,
    build_exploit_triangle_problem,
    build_explore_triangle_problem,
    build_max_std_problem,
    build_modified_ei_problem,
    with_feasibility,
)
from .data import Dataset, SearchSpace, sample_static, save as save_dataset, \
    split as split_dataset, standardize, load as load_dataset
from .errors import ParameterError
from .expr import Const, Var
from .formul import Formulation, eval_formulation, gpc_block, gpr_mean_block, \
    nn_block
from .gp import (
    GpcModel,
    GprModel,
    KernelSpec,
    gpc_fit,
    gpc_from_dict,
    gpc_latent,
    gpc_predict_class,
    gpc_to_dict,
    gpr_fit,
    gpr_from_dict,
    gpr_predict,
    gpr_to_dict,
)
from .oracle import get_black_box
from .solve import SolveConfig, SuperstructureSolution, Solution, solve_nlp, \
    solve_superstructure

SCHEMA_VERSION = 1

_DEFAULT_SENSE = {
    "biogas": "max",
    "nutrient": "max",
    "aeration": "min",
    "cod": "min",
    "tn": "min",
    "tp": "min",
    "f": "min",
}


@dataclass
class RunConfig:
    """Campaign parameters; JSON config files mirror these fields."""

    black_box: object = "brewery"
    space: list | None = None
    strategy: str = "sobol"
    n_static: int = 32
    n_adaptive: int = 0
    seed: int = 0
    out: str | None = None
    objective: object = "biogas"
    sense: str | None = None
    test_fraction: float = 0.25
    limits: dict = field(default_factory=lambda: {"cod": 50.0, "tn": 10.0,
                                                  "tp": 5.0})
    epsilon: dict = field(default_factory=lambda: {"variable": "biogas",
                                                   "steps": 8})
    scenarios: dict = field(default_factory=lambda: {"mean": 4000.0,
                                                     "std": 1000.0,
                                                     "values": None})
    solver: dict = field(default_factory=dict)
    classifier: str = "nn"  # classifier family for fitted campaigns
    nn_hidden: tuple = (10, 10)
    nn_epochs: int = 1500
    nn_lr: float = 0.1
    nn_batch: int = 10
    noise: float = 1e-10
    kernel: str = "sqexp"
    poly_order: int = 1
    xi: float = 0.01
    schedule: tuple = ("modified_ei", "explore_triangle")
    shrink: float = 0.5
    refine_after: float = 0.4
    refine_shrink: float = 0.5
    refine_decay: float = 0.65
    refine_greedy: bool = True  # late exploit steps optimise the mean itself
    surface_n: int = 50

    def __post_init__(self):
        if self.n_static < 1:
            raise ParameterError("n_static must be >= 1")
        if self.n_adaptive < 0:
            raise ParameterError("n_adaptive must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def solve_config(self) -> SolveConfig:
        return SolveConfig(**{"seed": self.seed, **self.solver})

    def box(self):
        return get_black_box(self.black_box)

    def resolved_space(self, box) -> SearchSpace:
        return SearchSpace(self.space) if self.space is not None else box.space


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _objective_index(box, objective) -> int:
    if isinstance(objective, int):
        return objective
    if objective in box.output_names:
        return box.output_names.index(objective)
    if len(box.output_names) == 1:
        return 0
    raise ParameterError(
        f"objective {objective!r} not among outputs {box.output_names}"
    )


def _objective_sense(cfg: RunConfig, name: str) -> str:
    if cfg.sense is not None:
        return cfg.sense
    return _DEFAULT_SENSE.get(name, "min")


# ---------------------------------------------------------------------------
# sample


def cmd_sample(cfg: RunConfig) -> dict[str, Dataset]:
    """Static sampling campaign; one dataset per configuration."""
    box = cfg.box()
    space = cfg.resolved_space(box)
    X = sample_static(cfg.strategy, cfg.n_static, space, cfg.seed)
    configs = box.configs if box.configs is not None else ("main",)
    datasets: dict[str, Dataset] = {}
    for config in configs:
        ys, ts = [], []
        for row in X:
            y, t = box.evaluate(row, None if box.configs is None else config)
            ys.append(y)
            ts.append(t)
        ds = Dataset(x=X, y=np.array(ys), t=np.array(ts, dtype=float),
                     space=space)
        datasets[config] = ds
        if cfg.out:
            save_dataset(ds, Path(cfg.out) / "data" / config)
    return datasets


# ---------------------------------------------------------------------------
# fit


@dataclass
class FittedConfig:
    dataset: Dataset
    gprs: dict[str, GprModel]
    classifier_nn: nn_mod.NetworkParams | None = None
    classifier_gpc: GpcModel | None = None

    @property
    def has_classifier(self) -> bool:
        return self.classifier_nn is not None or self.classifier_gpc is not None


@dataclass
class FitResult:
    configs: dict[str, FittedConfig]
    report: dict
    output_names: tuple[str, ...]


def _fit_classifier(cfg: RunConfig, x_scaled, t):
    if cfg.classifier == "gpc":
        return None, gpc_fit(x_scaled, t, seed=cfg.seed)
    shape = nn_mod.NetworkShape(
        (x_scaled.shape[1], *cfg.nn_hidden, 1), "sigmoid", is_classifier=True,
    )
    tc = nn_mod.TrainConfig(
        batch_size=cfg.nn_batch, epochs=cfg.nn_epochs,
        learning_rate=cfg.nn_lr, seed=cfg.seed, loss="bce_logits",
    )
    return nn_mod.train(shape, x_scaled, t, tc).params, None


def _classifier_scores(fc: FittedConfig, x_scaled):
    if fc.classifier_nn is not None:
        return nn_mod.predict_class(fc.classifier_nn, x_scaled).reshape(-1)
    return gpc_predict_class(fc.classifier_gpc, x_scaled).reshape(-1)


def cmd_fit(cfg: RunConfig, datasets: dict[str, Dataset] | None = None
            ) -> FitResult:
    """Split, standardise, and fit one regressor per (configuration, output)
    plus one convergence classifier per configuration.

    Regressors train on converged rows only; classifiers train on all rows
    and are skipped (with a warning) when every sample converged.
    """
    box = cfg.box()
    if datasets is None:
        if not cfg.out:
            raise ParameterError("cmd_fit needs datasets or an out directory")
        configs = box.configs if box.configs is not None else ("main",)
        datasets = {
            c: load_dataset(Path(cfg.out) / "data" / c) for c in configs
        }
    spec = KernelSpec(cfg.kernel, cfg.poly_order)
    fitted: dict[str, FittedConfig] = {}
    report: dict = {"schema_version": SCHEMA_VERSION, "configs": {}}
    for config, ds in datasets.items():
        ds = standardize(split_dataset(ds, cfg.test_fraction, cfg.seed))
        xs_train = ds.scale_x(ds.x_train)
        ys_train = ds.scale_y(ds.y_train)
        t_train = ds.t_train if ds.t is not None else np.ones(len(xs_train))
        feas = t_train == 1.0
        gprs: dict[str, GprModel] = {}
        for v, name in enumerate(box.output_names):
            gprs[name] = gpr_fit(
                xs_train[feas], ys_train[feas, v], spec,
                noise=cfg.noise, seed=cfg.seed,
            )
        clf_nn = clf_gpc = None
        if ds.t is not None and np.any(t_train == 0.0) and np.any(
                t_train == 1.0):
            clf_nn, clf_gpc = _fit_classifier(cfg, xs_train, t_train)
        elif ds.t is not None and np.all(t_train == 1.0):
            warnings.warn(
                f"all {config} training samples converged; classifier skipped",
                stacklevel=2,
            )
        fc = FittedConfig(ds, gprs, clf_nn, clf_gpc)
        fitted[config] = fc
        report["configs"][config] = _validation_metrics(box, fc)
        if cfg.out:
            mdir = Path(cfg.out) / "models" / config
            save_dataset(ds, Path(cfg.out) / "data" / config)
            for name, model in gprs.items():
                _write_json(mdir / f"gpr_{name}.json", gpr_to_dict(model))
            if clf_nn is not None:
                _write_json(mdir / "clf.json", nn_mod.params_to_dict(clf_nn))
            if clf_gpc is not None:
                _write_json(mdir / "clf.json", gpc_to_dict(clf_gpc))
    if cfg.out:
        _write_json(Path(cfg.out) / "fit_report.json", report)
    return FitResult(fitted, report, box.output_names)


def _validation_metrics(box, fc: FittedConfig) -> dict:
    ds = fc.dataset
    out: dict = {"n_train": int(len(ds.train_idx)),
                 "n_test": int(len(ds.test_idx)), "gpr": {}}
    t_test = ds.t_test if ds.t is not None else np.ones(len(ds.test_idx))
    mask = t_test == 1.0
    x_test_scaled = ds.scale_x(ds.x_test)
    for v, name in enumerate(box.output_names):
        if not np.any(mask):
            out["gpr"][name] = {"mae": None, "mape": None}
            continue
        mean_s, _ = gpr_predict(fc.gprs[name], x_test_scaled[mask])
        pred = mean_s * ds.y_scaler.std[v] + ds.y_scaler.mean[v]
        truth = ds.y_test[mask, v]
        err = np.abs(pred - truth)
        nz = np.abs(truth) > 1e-12
        out["gpr"][name] = {
            "mae": float(err.mean()),
            "mape": float(np.mean(err[nz] / np.abs(truth[nz]))) if nz.any()
            else None,
        }
    if fc.has_classifier and ds.t is not None:
        pred = _classifier_scores(fc, x_test_scaled)
        truth = t_test.astype(int)
        tp = int(np.sum((pred == 1) & (truth == 1)))
        fp = int(np.sum((pred == 1) & (truth == 0)))
        fn = int(np.sum((pred == 0) & (truth == 1)))
        out["classifier"] = {
            "precision": tp / (tp + fp) if tp + fp else 1.0,
            "recall": tp / (tp + fn) if tp + fn else 1.0,
        }
    else:
        out["classifier"] = None
    return out


def load_fitted(cfg: RunConfig) -> FitResult:
    """Rehydrate a ``cmd_fit`` result from the out directory."""
    box = cfg.box()
    configs = box.configs if box.configs is not None else ("main",)
    fitted = {}
    for config in configs:
        ds = load_dataset(Path(cfg.out) / "data" / config)
        mdir = Path(cfg.out) / "models" / config
        gprs = {}
        for name in box.output_names:
            with open(mdir / f"gpr_{name}.json") as fh:
                gprs[name] = gpr_from_dict(json.load(fh))
        clf_nn = clf_gpc = None
        clf_path = mdir / "clf.json"
        if clf_path.exists():
            with open(clf_path) as fh:
                d = json.load(fh)
            if d.get("kind") == "gpc":
                clf_gpc = gpc_from_dict(d)
            else:
                clf_nn = nn_mod.params_from_dict(d)
        fitted[config] = FittedConfig(ds, gprs, clf_nn, clf_gpc)
    with open(Path(cfg.out) / "fit_report.json") as fh:
        report = json.load(fh)
    return FitResult(fitted, report, box.output_names)


# ---------------------------------------------------------------------------
# superstructure formulation building


def _scaled_inputs(f: Formulation, ds: Dataset, space: SearchSpace) -> list[Var]:
    scaled = ds.scale_space(space)
    return [
        f.new_var(f"x{j}", scaled.lower[j], scaled.upper[j])
        for j in range(space.dim)
    ]


def _classifier_latent_into(f: Formulation, fc: FittedConfig, xvars,
                            name: str):
    """Absorb the configuration's classifier block; returns the latent Var."""
    if fc.classifier_nn is not None:
        blk = nn_block(fc.classifier_nn, inputs=xvars, name=name)
    else:
        blk = gpc_block(fc.classifier_gpc, inputs=xvars, name=name)
    f.absorb(blk)
    return blk.io_outputs["latent"]


def _config_branch(
    box,
    fc: FittedConfig,
    config: str,
    objective_name: str,
    sense: str,
    limits: dict,
    extra: list | None = None,
    space: SearchSpace | None = None,
) -> Formulation:
    """Single-configuration NLP: surrogate blocks, effluent limits,
    classifier feasibility, and the inverse-scaled objective."""
    ds = fc.dataset
    space = space if space is not None else ds.space
    f = Formulation(f"cfg_{config}")
    xvars = _scaled_inputs(f, ds, space)
    f.io_inputs = list(xvars)
    orig: dict[str, object] = {}
    cache: dict = {}
    for v, name in enumerate(box.output_names):
        blk = gpr_mean_block(fc.gprs[name], inputs=xvars,
                             name=f"gpr_{config}_{name}", cache=cache)
        f.absorb(blk)
        orig[name] = (
            Const(float(ds.y_scaler.std[v])) * blk.io_outputs["mean"]
            + Const(float(ds.y_scaler.mean[v]))
        )
    for name, limit in (limits or {}).items():
        if limit is None or not math.isfinite(limit):
            continue
        f.add_constraint(orig[name], "<=", limit, label=f"{name} limit")
    if fc.has_classifier:
        latent = _classifier_latent_into(f, fc, xvars, f"clf_{config}")
        f.add_constraint(latent, ">=", 0.0, label="feasibility")
    for name, csense, bound in extra or []:
        f.add_constraint(orig[name], csense, bound, label=f"epsilon {name}")
    f.set_objective(orig[objective_name], sense)
    f.orig_outputs = orig  # inverse-scaled output expressions, by name
    return f


def _solution_report(box, fitted: dict[str, FittedConfig],
                     ss: SuperstructureSolution, objective_name: str,
                     sense: str) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "status": ss.status,
        "objective_name": objective_name,
        "sense": sense,
        "branches": ss.branches,
    }
    if ss.status == "infeasible":
        report["binding"] = _infeasibility_diagnostics(box, fitted, ss)
        return report
    fc = fitted[ss.chosen]
    ds = fc.dataset
    x_scaled = ss.solution.inputs
    x_orig = ds.inv_scale_x(x_scaled)
    outputs = {}
    for v, name in enumerate(box.output_names):
        mean_s, var_s = gpr_predict(fc.gprs[name], x_scaled)
        mean = mean_s * ds.y_scaler.std[v] + ds.y_scaler.mean[v]
        std = math.sqrt(var_s) * ds.y_scaler.std[v]
        outputs[name] = {
            "mean": float(mean),
            "std": float(std),
            "lo95": float(mean - 1.96 * std),
            "hi95": float(mean + 1.96 * std),
        }
    report.update(
        {
            "config": ss.chosen,
            "objective": float(ss.solution.objective),
            "x": [float(v) for v in x_orig],
            "x_scaled": [float(v) for v in x_scaled],
            "outputs": outputs,
            "gamma": {
                k: ss.solution.x.get(f"gamma.{k}", 0.0) for k in fitted
            },
        }
    )
    return report


def _infeasibility_diagnostics(box, fitted, ss) -> dict:
    """Per-configuration note of which constraints cannot be met."""
    notes = {}
    for branch in ss.branches:
        notes[branch["label"]] = {
            "status": branch["status"],
            "objective": branch["objective"],
        }
    return notes


def cmd_superstructure(cfg: RunConfig, fitted: FitResult | None = None,
                       extra: list | None = None,
                       space: SearchSpace | None = None) -> dict:
    """Choose-one superstructure optimisation by configuration enumeration."""
    box = cfg.box()
    if fitted is None:
        fitted = load_fitted(cfg)
    objective_name = box.output_names[_objective_index(box, cfg.objective)]
    sense = _objective_sense(cfg, objective_name)
    branches = [
        (
            config,
            _config_branch(box, fc, config, objective_name, sense,
                           cfg.limits, extra=extra, space=space),
        )
        for config, fc in fitted.configs.items()
    ]
    ss = solve_superstructure(branches, cfg.solve_config())
    report = _solution_report(box, fitted.configs, ss, objective_name, sense)
    if cfg.out:
        _write_json(Path(cfg.out) / "superstructure_report.json", report)
    return report


# ---------------------------------------------------------------------------
# epsilon-constraint sweep


def _dominates(a: dict, b: dict, sense_a: str, sense_b: str) -> bool:
    """Strict dominance: better in both objectives."""

    def better(x, y, sense):
        return x > y if sense == "max" else x < y

    return better(a["objective"], b["objective"], sense_a) and better(
        a["constrained_value"], b["constrained_value"], sense_b
    )


def cmd_pareto(cfg: RunConfig, fitted: FitResult | None = None) -> dict:
    """Trace the frontier between the main objective and a bounded one."""
    box = cfg.box()
    if fitted is None:
        fitted = load_fitted(cfg)
    objective_name = box.output_names[_objective_index(box, cfg.objective)]
    sense_a = _objective_sense(cfg, objective_name)
    eps_name = cfg.epsilon["variable"]
    steps = int(cfg.epsilon.get("steps", 8))
    sense_b = _DEFAULT_SENSE.get(eps_name, "min")
    if eps_name == objective_name:
        raise ParameterError("epsilon variable must differ from the objective")

    cfg_b = RunConfig(**{**asdict_shallow(cfg), "objective": eps_name,
                         "sense": sense_b, "out": None})
    best_b = cmd_superstructure(cfg_b, fitted)
    cfg_a = RunConfig(**{**asdict_shallow(cfg), "sense": sense_a, "out": None})
    best_a = cmd_superstructure(cfg_a, fitted)
    if best_b["status"] == "infeasible" or best_a["status"] == "infeasible":
        raise ParameterError("single-objective anchors are infeasible")
    b_opt = best_b["outputs"][eps_name]["mean"]
    b_at_a = best_a["outputs"][eps_name]["mean"]
    eps_values = np.linspace(b_opt, b_at_a, steps)

    rows = []
    csense = ">=" if sense_b == "max" else "<="
    for eps in eps_values:
        rep = cmd_superstructure(
            cfg_a, fitted, extra=[(eps_name, csense, float(eps))]
        )
        row = {"epsilon": float(eps), "feasible": rep["status"] != "infeasible"}
        if row["feasible"]:
            row.update(
                {
                    "objective": rep["objective"],
                    "config": rep["config"],
                    "x": rep["x"],
                    "constrained_value": rep["outputs"][eps_name]["mean"],
                }
            )
        rows.append(row)
    feasible = [r for r in rows if r["feasible"]]
    kept = [
        r
        for r in feasible
        if not any(
            _dominates(o, r, sense_a, sense_b) for o in feasible if o is not r
        )
    ]
    report = {
        "schema_version": SCHEMA_VERSION,
        "objective_name": objective_name,
        "epsilon_variable": eps_name,
        "anchors": {"best_b": b_opt, "b_at_best_a": b_at_a},
        "rows": rows,
        "frontier": kept,
    }
    if cfg.out:
        _write_json(Path(cfg.out) / "pareto_report.json", report)
    return report


def asdict_shallow(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


# ---------------------------------------------------------------------------
# stochastic programming


def _scenario_values(cfg: RunConfig, fitted: FitResult) -> np.ndarray:
    values = cfg.scenarios.get("values")
    if values is not None:
        return np.asarray(values, dtype=float)
    # default: an evenly spread subset of the sampled uncertain-input values
    ds = next(iter(fitted.configs.values())).dataset
    pool = np.unique(ds.x_train[:, 1])
    count = int(cfg.scenarios.get("count", 8))
    if count >= pool.size:
        return pool
    idx = np.unique(np.round(np.linspace(0, pool.size - 1, count)).astype(int))
    return pool[idx]


def cmd_stochastic(cfg: RunConfig, fitted: FitResult | None = None) -> dict:
    """Expected-value superstructure with the second input as the scenario
    parameter; the classifier constraint is enforced for every scenario."""
    box = cfg.box()
    if fitted is None:
        fitted = load_fitted(cfg)
    objective_name = box.output_names[_objective_index(box, cfg.objective)]
    sense = _objective_sense(cfg, objective_name)
    mean = float(cfg.scenarios.get("mean", 4000.0))
    std = float(cfg.scenarios.get("std", 1000.0))
    realizations = _scenario_values(cfg, fitted)
    dens = np.exp(-0.5 * ((realizations - mean) / std) ** 2) / (
        std * math.sqrt(2.0 * math.pi)
    )
    weights = dens / dens.sum()

    branches = []
    for config, fc in fitted.configs.items():
        ds = fc.dataset
        f = Formulation(f"cfg_{config}")
        scaled = ds.scale_space()
        xv = f.new_var("x0", scaled.lower[0], scaled.upper[0])
        f.io_inputs = [xv]
        scen_vars = []
        scen_caches: list[dict] = []
        for s, r in enumerate(realizations):
            rs = float((r - ds.x_scaler.mean[1]) / ds.x_scaler.std[1])
            xc = f.new_var(f"xC_s{s}", rs, rs)
            scen_vars.append(xc)
            scen_caches.append({})
        expected: dict[str, object] = {}
        for v, name in enumerate(box.output_names):
            terms = []
            for s in range(len(realizations)):
                blk = gpr_mean_block(
                    fc.gprs[name], inputs=[xv, scen_vars[s]],
                    name=f"gpr_{config}_{name}_s{s}", cache=scen_caches[s],
                )
                f.absorb(blk)
                orig = (
                    Const(float(ds.y_scaler.std[v])) * blk.io_outputs["mean"]
                    + Const(float(ds.y_scaler.mean[v]))
                )
                terms.append(Const(float(weights[s])) * orig)
            expected[name] = sum(terms[1:], terms[0])
        for name, limit in (cfg.limits or {}).items():
            if limit is None or not math.isfinite(limit):
                continue
            f.add_constraint(expected[name], "<=", limit,
                             label=f"expected {name} limit")
        if fc.has_classifier:
            for s in range(len(realizations)):
                latent = _classifier_latent_into(
                    f, fc, [xv, scen_vars[s]], f"clf_{config}_s{s}"
                )
                f.add_constraint(latent, ">=", 0.0,
                                 label=f"feasibility scenario {s}")
        f.set_objective(expected[objective_name], sense)
        branches.append((config, f))

    ss = solve_superstructure(branches, cfg.solve_config())
    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "status": ss.status,
        "objective_name": objective_name,
        "sense": sense,
        "scenarios": {
            "values": [float(v) for v in realizations],
            "weights": [float(w) for w in weights],
        },
        "branches": ss.branches,
    }
    if ss.status != "infeasible":
        config = ss.chosen
        fc = fitted.configs[config]
        ds = fc.dataset
        v_scaled = float(ss.solution.inputs[0])
        v_orig = v_scaled * ds.x_scaler.std[0] + ds.x_scaler.mean[0]
        per_scenario = []
        expected_outputs = {}
        for v, name in enumerate(box.output_names):
            means = []
            for r in realizations:
                rs = (r - ds.x_scaler.mean[1]) / ds.x_scaler.std[1]
                mu_s, _ = gpr_predict(fc.gprs[name],
                                      np.array([v_scaled, rs]))
                means.append(mu_s * ds.y_scaler.std[v] + ds.y_scaler.mean[v])
            expected_outputs[name] = float(np.dot(weights, means))
            per_scenario.append({"output": name,
                                 "values": [float(m) for m in means]})
        latents = []
        if fc.has_classifier:
            for r in realizations:
                rs = (r - ds.x_scaler.mean[1]) / ds.x_scaler.std[1]
                xs = np.array([v_scaled, rs])
                if fc.classifier_gpc is not None:
                    latents.append(float(gpc_latent(fc.classifier_gpc, xs)))
                else:
                    latents.append(float(nn_mod.forward(fc.classifier_nn,
                                                        xs)[0]))
        report.update(
            {
                "config": config,
                "V": float(v_orig),
                "objective": float(ss.solution.objective),
                "expected_outputs": expected_outputs,
                "per_scenario": per_scenario,
                "scenario_latents": latents,
                "gamma": {k: ss.solution.x.get(f"gamma.{k}", 0.0)
                          for k in fitted.configs},
            }
        )
    if cfg.out:
        _write_json(Path(cfg.out) / "stochastic_report.json", report)
    return report


# ---------------------------------------------------------------------------
# surface emission


def cmd_surface(cfg: RunConfig, fitted: FitResult | None = None) -> dict:
    """Evaluate surrogate mean/std and classifier latent on a grid CSV."""
    box = cfg.box()
    if fitted is None:
        fitted = load_fitted(cfg)
    n = int(cfg.surface_n)
    paths = {}
    for config, fc in fitted.configs.items():
        ds = fc.dataset
        space = ds.space
        axes = [np.linspace(lo, hi, n) for lo, hi in space.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.column_stack([g.ravel() for g in mesh])
        gs = ds.scale_x(grid)
        cols = {f"x{j + 1}": grid[:, j] for j in range(space.dim)}
        for v, name in enumerate(box.output_names):
            mean_s, var_s = gpr_predict(fc.gprs[name], gs)
            cols[f"mean_{name}"] = mean_s * ds.y_scaler.std[v] \
                + ds.y_scaler.mean[v]
            cols[f"std_{name}"] = np.sqrt(var_s) * ds.y_scaler.std[v]
        if fc.has_classifier:
            if fc.classifier_gpc is not None:
                cols["latent"] = gpc_latent(fc.classifier_gpc, gs)
            else:
                cols["latent"] = nn_mod.forward(fc.classifier_nn, gs)[:, 0]
        out = Path(cfg.out or ".") / f"surface_{config}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        header = ",".join(cols)
        rows = np.column_stack(list(cols.values()))
        with open(out, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        paths[config] = str(out)
    return paths


# ---------------------------------------------------------------------------
# adaptive DFO loop


def _best_feasible(y, t, sense: str):
    """Index of the best converged sample, or None."""
    mask = t == 1.0
    if not mask.any():
        return None
    vals = np.where(mask, y, -np.inf if sense == "max" else np.inf)
    return int(np.argmax(vals) if sense == "max" else np.argmin(vals))


def cmd_optimize(cfg: RunConfig) -> dict:
    """Generic adaptive DFO loop on one black box.

    Static sampling, then per iteration: standardise, fit the objective
    regressor on converged rows (plus a convergence classifier once failures
    appear), build the scheduled acquisition problem, solve it, evaluate the
    black box at the new point, and append. Later exploitation steps shrink
    the search box around the incumbent to refine locally.
    """
    box = cfg.box()
    if box.configs is not None:
        raise ParameterError("cmd_optimize drives a single-configuration box")
    space = cfg.resolved_space(box)
    obj_col = _objective_index(box, cfg.objective)
    sense = _objective_sense(cfg, box.output_names[obj_col])
    rng = np.random.default_rng(cfg.seed + 7919)
    solver_cfg = cfg.solve_config()

    X = sample_static(cfg.strategy, cfg.n_static, space, cfg.seed)
    ys, ts = [], []
    records = []
    for i, row in enumerate(X):
        y, t = box.evaluate(row)
        ys.append(y)
        ts.append(float(t))
        records.append(_record(i, row, y, t, "static", "static"))
    Y = np.array(ys)
    T = np.array(ts)

    events = []
    refine_steps = 0
    for it in range(cfg.n_adaptive):
        iteration = cfg.n_static + it
        kind = cfg.schedule[it % len(cfg.schedule)]
        ds = standardize(Dataset(x=X, y=Y, t=T, space=space))
        feas = T == 1.0
        gpr = gpr_fit(
            ds.x_scaled[feas], ds.y_scaled[feas, obj_col],
            KernelSpec(cfg.kernel, cfg.poly_order), noise=cfg.noise,
            seed=cfg.seed,
        )
        clf = None
        if np.any(T == 0.0) and np.any(T == 1.0):
            clf = gpc_fit(ds.x_scaled, T, seed=cfg.seed)
        best_idx = _best_feasible(Y[:, obj_col], T, sense)
        bounds = space
        refine = it >= math.ceil(cfg.refine_after * cfg.n_adaptive)
        if refine and best_idx is not None and kind in ("modified_ei",
                                                        "max_std"):
            # trust-region flavour: tighten bounds geometrically around the
            # incumbent and, optionally, exploit the surrogate mean directly
            shrink = max(cfg.refine_shrink * cfg.refine_decay**refine_steps,
                         1e-3)
            bounds = adjust_bounds(space, X[best_idx], shrink)
            refine_steps += 1
            if cfg.refine_greedy:
                kind = "greedy_mean"
        x_new, status = _solve_acquisition(
            cfg, kind, ds, gpr, clf, X, Y[:, obj_col], T, sense, best_idx,
            obj_col, space, bounds, solver_cfg,
        )
        if _too_close(x_new, X):
            events.append({"iteration": iteration, "event": "duplicate",
                           "action": "perturb"})
            width = space.upper - space.lower
            x_new = np.clip(x_new + rng.normal(0.0, 0.01 * width),
                            space.lower, space.upper)
            if _too_close(x_new, X) and best_idx is not None:
                events.append({"iteration": iteration, "event": "duplicate",
                               "action": "bounds_adjust"})
                shrunk = adjust_bounds(space, X[best_idx], cfg.shrink)
                x_new, status = _solve_acquisition(
                    cfg, kind, ds, gpr, clf, X, Y[:, obj_col], T, sense,
                    best_idx, obj_col, space, shrunk, solver_cfg,
                )
        y_new, t_new = box.evaluate(x_new)
        X = np.vstack([X, x_new])
        Y = np.vstack([Y, y_new])
        T = np.concatenate([T, [float(t_new)]])
        records.append(_record(iteration, x_new, y_new, t_new, kind, status))

    best_idx = _best_feasible(Y[:, obj_col], T, sense)
    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "n_evaluations": int(len(X)),
        "objective_name": box.output_names[obj_col],
        "sense": sense,
        "events": events,
    }
    if best_idx is not None:
        report["incumbent"] = {
            "x": [float(v) for v in X[best_idx]],
            "objective": float(Y[best_idx, obj_col]),
            "outputs": [float(v) for v in Y[best_idx]],
        }
        ds = standardize(Dataset(x=X, y=Y, t=T, space=space))
        feas = T == 1.0
        gpr = gpr_fit(
            ds.x_scaled[feas], ds.y_scaled[feas, obj_col],
            KernelSpec(cfg.kernel, cfg.poly_order), noise=cfg.noise,
            seed=cfg.seed,
        )
        prob = gpr_mean_block(gpr, bounds=ds.scale_space(), name="meanopt")
        prob.set_objective(prob.io_outputs["mean"], sense)
        sol = solve_nlp(prob, solver_cfg)
        xs = sol.inputs
        mu_s, var_s = gpr_predict(gpr, xs)
        mu = mu_s * ds.y_scaler.std[obj_col] + ds.y_scaler.mean[obj_col]
        std = math.sqrt(var_s) * ds.y_scaler.std[obj_col]
        report["surrogate_optimum"] = {
            "x": [float(v) for v in ds.inv_scale_x(xs)],
            "mean": float(mu),
            "std": float(std),
            "lo95": float(mu - 1.96 * std),
            "hi95": float(mu + 1.96 * std),
        }
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "runlog.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        _write_json(out / "optimize_report.json", report)
        save_dataset(Dataset(x=X, y=Y, t=T, space=space), out / "data" / "main")
    report["records"] = records
    return report


def _record(iteration, x, y, t, acquisition, status) -> dict:
    return {
        "iteration": int(iteration),
        "x": [float(v) for v in np.atleast_1d(x)],
        "outputs": [float(v) for v in np.atleast_1d(y)],
        "converged": int(t),
        "acquisition": acquisition,
        "solver_status": status,
    }


def _too_close(x, X, tol: float = 1e-8) -> bool:
    return bool(np.min(np.max(np.abs(X - x), axis=1)) <= tol)


def _solve_acquisition(cfg, kind, ds, gpr, clf, X, y_obj, t, sense, best_idx,
                       obj_col, space, bounds, solver_cfg):
    """Build and solve one scheduled acquisition; returns (x_new, status)."""
    scaled_bounds = ds.scale_space(bounds)
    if kind in ("modified_ei", "max_std", "greedy_mean"):
        if kind == "modified_ei":
            if best_idx is None:
                prob = build_max_std_problem(gpr, scaled_bounds, name="acq")
            else:
                yb = float(
                    (y_obj[best_idx] - ds.y_scaler.mean[obj_col])
                    / ds.y_scaler.std[obj_col]
                )
                prob = build_modified_ei_problem(
                    gpr, yb, cfg.xi, sense, scaled_bounds, name="acq"
                )
        elif kind == "greedy_mean":
            prob = gpr_mean_block(gpr, bounds=scaled_bounds, name="acq")
            prob.set_objective(prob.io_outputs["mean"], sense)
        else:
            prob = build_max_std_problem(gpr, scaled_bounds, name="acq")
        if clf is not None:
            prob = with_feasibility(
                prob, gpc_block(clf, bounds=ds.scale_space(), name="feas")
            )
        sol = solve_nlp(prob, solver_cfg)
        x_new = ds.inv_scale_x(sol.inputs)
        return np.clip(x_new, bounds.lower, bounds.upper), sol.status
    if kind in ("explore_triangle", "exploit_triangle"):
        if kind == "explore_triangle" or best_idx is None:
            sel = build_explore_triangle_problem(
                X, space=space, include_vertices=True, bounds=bounds,
            )
        else:
            masked = np.where(t == 1.0, y_obj,
                              -np.inf if sense == "max" else np.inf)
            sel = build_exploit_triangle_problem(
                X, masked, sense, space=space, include_vertices=True,
                bounds=bounds,
            )
        if clf is not None:
            blk = _original_space_classifier(ds, clf, space)
            sel = with_feasibility(sel, blk)
        return sel.new_x.copy(), "optimal_exact"
    raise ParameterError(f"unknown acquisition kind {kind!r}")


def _original_space_classifier(ds: Dataset, clf: GpcModel,
                               space: SearchSpace) -> Formulation:
    """Wrap a scaled-space classifier so it can score original-space points."""
    f = Formulation("feas_orig")
    xo = [
        f.new_var(f"x{j}", space.lower[j], space.upper[j])
        for j in range(space.dim)
    ]
    f.io_inputs = list(xo)
    xs = []
    for j in range(space.dim):
        v = f.new_var(f"xs{j}")
        f.define(
            v,
            Const(1.0 / float(ds.x_scaler.std[j]))
            * (xo[j] - Const(float(ds.x_scaler.mean[j]))),
        )
        xs.append(v)
    blk = gpc_block(clf, inputs=xs, name="feas_scaled")
    f.absorb(blk)
    f.io_inputs = list(xo)  # the scaled vars are internal, not block inputs
    f.io_outputs["latent"] = blk.io_outputs["latent"]
    return f
