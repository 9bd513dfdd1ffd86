"""Built-in black boxes and the external-command evaluation contract.

The brewery box is a deterministic synthetic stand-in for a wastewater
resource-recovery simulator: four plant configurations share a 2-D input
space (reactor volume V in m^3, influent COD concentration C in g/m^3) and
produce six outputs plus a convergence flag. Response shapes: effluent COD
falls with V and rises with C; effluent TP worsens at high V and low C;
biogas grows with both inputs; convergence fails iff C/V > 40 for every
configuration except UCT.
"""
from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass

import numpy as np

from .data import SearchSpace
from .errors import ParameterError

BREWERY_CONFIGS = ("A2O", "Bardenpho", "Johannesburg", "UCT")
BREWERY_OUTPUTS = ("cod", "tn", "tp", "biogas", "nutrient", "aeration")
BREWERY_SPACE = SearchSpace([(50.0, 500.0), (2000.0, 6000.0)])

# per-configuration parameters, ordered as BREWERY_CONFIGS
_RHO = (110.0, 95.0, 100.0, 90.0)        # biogas conversion length (m^3)
_COD_RHO = (55.0, 48.0, 50.0, 45.0)      # COD removal length (m^3)
_ETA = (0.988, 0.993, 0.991, 0.990)      # asymptotic COD removal fraction
_ZETA = (1.05, 0.92, 0.98, 1.00)         # TN multiplier
_PHI = (4.0, 3.2, 3.6, 1.5)              # TP release at high V / low C
_KAPPA = (0.97, 1.05, 1.00, 0.95)        # digestate quality multiplier
_AER = (1.00, 1.10, 1.05, 0.85)          # aeration multiplier


def brewery_response(config: str, x) -> tuple[np.ndarray, int]:
    """Six outputs and the convergence flag for one configuration."""
    k = BREWERY_CONFIGS.index(config)
    V, C = float(x[0]), float(x[1])
    cod = C * (1.0 - _ETA[k] * (1.0 - math.exp(-V / _COD_RHO[k])))
    tn = 80.0 * (0.04 + 0.30 * math.exp(-V / 140.0) + 3e-5 * V) \
        * math.sqrt(C / 4000.0) * _ZETA[k]
    tp = 30.0 * (0.05 + 0.35 * math.exp(-V / 120.0)) * (C / 4000.0) \
        + _PHI[k] * (V / 500.0) * (2000.0 / C)
    biogas = 0.25 * C * (1.0 - math.exp(-V / _RHO[k]))
    nutrient = 65.0 * math.exp(-C / 6000.0) \
        * (1.0 - 0.4 * math.exp(-V / 200.0)) * _KAPPA[k]
    aeration = 50000.0 * (0.35 + 0.65 * math.exp(-V / 250.0)) \
        * (C / 4000.0) ** 0.7 * _AER[k]
    converged = 0 if (C / V > 40.0 and config != "UCT") else 1
    return np.array([cod, tn, tp, biogas, nutrient, aeration]), converged


def six_hump_camel(x) -> float:
    x1, x2 = float(x[0]), float(x[1])
    return (
        (4.0 - 2.1 * x1**2 + x1**4 / 3.0) * x1**2
        + x1 * x2
        + (-4.0 + 4.0 * x2**2) * x2**2
    )


CAMEL_SPACE = SearchSpace([(-2.0, 2.0), (-1.0, 1.0)])
CAMEL_MIN = -1.0316  # global minimum value on the box (two symmetric minima)

_DISK_CENTER = np.array([1.2, 0.6])
_DISK_RADIUS = 0.5


def camel_disk_converged(x) -> int:
    """Convergence predicate of the constrained camel: fails inside the disk."""
    return 0 if float(np.sum((np.asarray(x, float) - _DISK_CENTER) ** 2)) \
        < _DISK_RADIUS**2 else 1


@dataclass(frozen=True)
class BlackBox:
    """Evaluation wrapper: y, t = f(x) with optional discrete configurations."""

    name: str
    space: SearchSpace
    n_outputs: int
    output_names: tuple[str, ...]
    configs: tuple[str, ...] | None = None
    _fn: object = None

    def evaluate(self, x, config: str | None = None) -> tuple[np.ndarray, int]:
        if self.configs is not None and config is None:
            raise ParameterError(f"{self.name} needs a configuration id")
        y, t = self._fn(config, np.asarray(x, dtype=float))
        return np.asarray(y, dtype=float), int(t)


def _brewery_fn(config, x):
    return brewery_response(config, x)


def _camel_fn(config, x):
    return np.array([six_hump_camel(x)]), 1


def _camel_disk_fn(config, x):
    return np.array([six_hump_camel(x)]), camel_disk_converged(x)


def _constant_fn(config, x):
    return np.array([1.0]), 1


_BUILTINS = {
    "brewery": BlackBox(
        "brewery", BREWERY_SPACE, 6, BREWERY_OUTPUTS, BREWERY_CONFIGS,
        _brewery_fn,
    ),
    "camel": BlackBox("camel", CAMEL_SPACE, 1, ("f",), None, _camel_fn),
    "camel_disk": BlackBox(
        "camel_disk", CAMEL_SPACE, 1, ("f",), None, _camel_disk_fn,
    ),
    "constant": BlackBox(
        "constant", SearchSpace([(0.0, 1.0)]), 1, ("f",), None, _constant_fn,
    ),
}


class ExternalBox:
    """Subprocess black box: inputs as command-line args, outputs on stdout.

    The command is run as ``cmd x1 x2 ...`` (plus the configuration id when
    one is set) and must print one CSV line of outputs. A nonzero exit is
    recorded as a convergence failure with zeroed outputs.
    """

    def __init__(self, command, n_outputs: int, space, output_names=None,
                 configs=None):
        self.name = "external"
        self.command = shlex.split(command) if isinstance(command, str) \
            else list(command)
        self.n_outputs = int(n_outputs)
        self.space = space if isinstance(space, SearchSpace) else SearchSpace(space)
        self.output_names = tuple(output_names) if output_names else tuple(
            f"y{j + 1}" for j in range(self.n_outputs)
        )
        self.configs = tuple(configs) if configs else None

    def evaluate(self, x, config: str | None = None) -> tuple[np.ndarray, int]:
        argv = list(self.command)
        if config is not None:
            argv.append(str(config))
        argv.extend(repr(float(v)) for v in np.asarray(x, dtype=float))
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            return np.zeros(self.n_outputs), 0
        try:
            vals = [float(v) for v in proc.stdout.strip().split(",")]
        except ValueError as exc:
            raise ParameterError(
                f"external black box printed unparsable output: "
                f"{proc.stdout!r}"
            ) from exc
        if len(vals) != self.n_outputs:
            raise ParameterError(
                f"external black box printed {len(vals)} values, "
                f"expected {self.n_outputs}"
            )
        return np.array(vals), 1


def get_black_box(spec) -> BlackBox | ExternalBox:
    """Resolve a builtin name or an external-command description."""
    if isinstance(spec, str):
        if spec in _BUILTINS:
            return _BUILTINS[spec]
        raise ParameterError(
            f"unknown builtin black box {spec!r}; "
            f"available: {sorted(_BUILTINS)}"
        )
    if isinstance(spec, dict):
        return ExternalBox(
            command=spec["command"],
            n_outputs=spec["n_outputs"],
            space=spec["space"],
            output_names=spec.get("output_names"),
            configs=spec.get("configs"),
        )
    raise ParameterError("black_box must be a builtin name or a command spec")
