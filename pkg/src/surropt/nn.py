"""Fully-dense feedforward networks trained with mini-batch gradient descent.

Regression networks minimise a mean-squared-error loss; classifiers emit a
single logit and minimise the numerically stable binary cross-entropy on that
logit. L2 weight decay enters the cost as (decay/2) * sum(w^2), matching the
update rule w <- w - lr * (eps * a + decay * w).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    ModeError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)

ACTIVATIONS = ("linear", "tanh", "sigmoid", "softplus", "relu", "hardsigmoid")
SMOOTH_ACTIVATIONS = ("linear", "tanh", "sigmoid", "softplus")


def activation_eval(kind: str, z):
    """Value of the named activation at ``z`` (scalar or array)."""
    z = np.asarray(z, dtype=float)
    if kind == "linear":
        return z + 0.0
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return expit(z)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    if kind == "relu":
        return np.maximum(0.0, z)
    if kind == "hardsigmoid":
        return np.clip(z / 6.0 + 0.5, 0.0, 1.0)
    raise ParameterError(f"unknown activation {kind!r}")


def activation_grad(kind: str, z):
    """Derivative of the named activation at ``z``."""
    z = np.asarray(z, dtype=float)
    if kind == "linear":
        return np.ones_like(z)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "sigmoid":
        s = expit(z)
        return s * (1.0 - s)
    if kind == "softplus":
        return expit(z)
    if kind == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if kind == "hardsigmoid":
        return np.where(np.abs(z) >= 3.0, 0.0, 1.0 / 6.0)
    raise ParameterError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class NetworkShape:
    """Layer sizes ``[inputs, hidden..., outputs]`` plus the activation kind."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    is_classifier: bool = False

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ParameterError("need at least one hidden layer")
        if any(s < 1 for s in sizes):
            raise ParameterError("every layer needs at least one node")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layer_sizes) - 2


@dataclass(frozen=True)
class NetworkParams:
    """Trained weight matrices and bias vectors, immutable after fit.

    ``weights[k]`` maps layer k onto layer k+1 and has shape
    (layer_sizes[k+1], layer_sizes[k]); ``biases[k]`` has length
    layer_sizes[k+1]. The output layer applies no activation.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    shape: NetworkShape

    def __post_init__(self):
        sizes = self.shape.layer_sizes
        weights = tuple(np.asarray(w, dtype=float) for w in self.weights)
        biases = tuple(np.asarray(b, dtype=float) for b in self.biases)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise ShapeError("expected one weight matrix and bias per layer map")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (sizes[k + 1], sizes[k]):
                raise ShapeError(
                    f"weights[{k}] has shape {w.shape}, "
                    f"expected {(sizes[k + 1], sizes[k])}"
                )
            if b.shape != (sizes[k + 1],):
                raise ShapeError(f"biases[{k}] has shape {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"non-finite parameter in layer map {k}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    epochs: int = 1000
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    loss: str = "mse"  # or "bce_logits"
    early_stopping: bool = False
    patience: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be >= 1")
        if self.learning_rate < 0.0:
            raise ParameterError("learning_rate must be nonnegative")
        if self.weight_decay < 0.0:
            raise ParameterError("weight_decay must be nonnegative")
        if self.loss not in ("mse", "bce_logits"):
            raise ParameterError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    params: NetworkParams
    loss_history: list = field(default_factory=list)


def init_params(shape: NetworkShape, seed: int = 0) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialisation, seeded."""
    rng = np.random.default_rng(seed)
    sizes = shape.layer_sizes
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[k])
        weights.append(rng.uniform(-bound, bound, size=(sizes[k + 1], sizes[k])))
        biases.append(rng.uniform(-bound, bound, size=sizes[k + 1]))
    return NetworkParams(tuple(weights), tuple(biases), shape)


def _forward_trace(params: NetworkParams, x: np.ndarray):
    """Batch forward pass keeping pre-activations; x has shape (n, m)."""
    zs, acts = [], [x]
    a = x
    n_maps = len(params.weights)
    for k in range(n_maps):
        z = a @ params.weights[k].T + params.biases[k]
        zs.append(z)
        if k < n_maps - 1:
            a = activation_eval(params.shape.activation, z)
            acts.append(a)
    return zs, acts


def forward(params: NetworkParams, x):
    """Evaluate the network; accepts a single vector or a batch matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != params.shape.n_inputs:
        raise ShapeError(
            f"input has {xb.shape[1]} features, expected {params.shape.n_inputs}"
        )
    zs, _ = _forward_trace(params, xb)
    out = zs[-1]
    if not np.all(np.isfinite(out)):
        raise NumericError("forward pass produced non-finite outputs")
    return out[0] if single else out


def loss_and_cost(cfg: TrainConfig, predictions, targets, params: NetworkParams):
    """Return (loss, cost); cost adds the L2 weight penalty to the loss."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ShapeError(
            f"predictions {predictions.shape} vs targets {targets.shape}"
        )
    n = predictions.shape[0] if predictions.ndim else 1
    if cfg.loss == "mse":
        loss = float(np.mean((predictions - targets) ** 2))
    else:
        z, t = predictions, targets
        # stable form of softplus(z) - t*z
        loss = float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    reg = 0.5 * cfg.weight_decay * sum(float(np.sum(w**2)) for w in params.weights)
    return loss, loss + reg


def backprop(params: NetworkParams, batch_x, batch_y, cfg: TrainConfig):
    """Gradients of the cost for one batch, shaped like the parameters.

    The output-layer error signal is the loss derivative with respect to the
    final pre-activation; hidden error signals propagate backwards through the
    transposed weights times the activation derivative. The weight gradients
    add the decay term ``decay * w``.
    """
    x = np.atleast_2d(np.asarray(batch_x, dtype=float))
    y = np.asarray(batch_y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise ParameterError("empty batch")
    n = x.shape[0]
    zs, acts = _forward_trace(params, x)
    yhat = zs[-1]
    if cfg.loss == "mse":
        eps = 2.0 * (yhat - y) / yhat.size  # mean over batch and output dims
    else:
        eps = (expit(yhat) - y) / (n * yhat.shape[1])
    grads_w, grads_b = [None] * len(params.weights), [None] * len(params.biases)
    kind = params.shape.activation
    for k in range(len(params.weights) - 1, -1, -1):
        a_prev = acts[k]
        gw = eps.T @ a_prev + cfg.weight_decay * params.weights[k]
        gb = eps.sum(axis=0)
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer map {k}")
        grads_w[k], grads_b[k] = gw, gb
        if k > 0:
            eps = (eps @ params.weights[k]) * activation_grad(kind, zs[k - 1])
    return tuple(grads_w), tuple(grads_b)


def train(
    shape: NetworkShape,
    x,
    y,
    cfg: TrainConfig,
    val_x=None,
    val_y=None,
) -> TrainResult:
    """Mini-batch gradient descent: shuffle, forward, cost, backprop, step.

    ``x`` and ``y`` are expected in the standardised modelling space (targets
    for a classifier are the raw 0/1 labels). Deterministic for a fixed seed.
    The returned history holds the mean batch cost per epoch; with
    ``early_stopping`` and validation data the loop stops once the validation
    loss has not improved for ``patience`` epochs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if shape.is_classifier and cfg.loss != "bce_logits":
        cfg = TrainConfig(**{**cfg.__dict__, "loss": "bce_logits"})
    if x.shape[0] != y.shape[0]:
        raise ShapeError("x and y row counts differ")
    if x.shape[1] != shape.n_inputs or y.shape[1] != shape.n_outputs:
        raise ShapeError("data width does not match the network shape")
    params = init_params(shape, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    n = x.shape[0]
    history = []
    best_val, stale = np.inf, 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        xs, ys = x[perm], y[perm]
        epoch_costs = []
        for start in range(0, n, cfg.batch_size):
            bx = xs[start:start + cfg.batch_size]
            by = ys[start:start + cfg.batch_size]
            preds = forward(params, bx)
            _, cost = loss_and_cost(cfg, preds, by, params)
            if not np.isfinite(cost):
                raise TrainingDivergedError(
                    f"training cost became non-finite in epoch {epoch}",
                    last_finite_epoch=epoch - 1,
                )
            epoch_costs.append(cost)
            gw, gb = backprop(params, bx, by, cfg)
            params = NetworkParams(
                tuple(w - cfg.learning_rate * g for w, g in zip(params.weights, gw)),
                tuple(b - cfg.learning_rate * g for b, g in zip(params.biases, gb)),
                shape,
            )
        history.append(float(np.mean(epoch_costs)))
        if cfg.early_stopping and val_x is not None:
            val_pred = forward(params, np.atleast_2d(val_x))
            val_loss, _ = loss_and_cost(cfg, val_pred, np.atleast_2d(val_y), params)
            if val_loss < best_val - 1e-12:
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale > cfg.patience:
                    break
    return TrainResult(params=params, loss_history=history)


def predict_proba(params: NetworkParams, x):
    """Sigmoid-squashed logit of a classifier network."""
    if not params.shape.is_classifier:
        raise ModeError("predict_proba requires a classifier network")
    logit = forward(params, x)
    return expit(logit)


def predict_class(params: NetworkParams, x, threshold: float = 0.5):
    """Class 1 when the predicted probability reaches the threshold (ties -> 1)."""
    proba = predict_proba(params, x)
    return (np.asarray(proba) >= threshold).astype(int)


# ---------------------------------------------------------------------------
# serialization


def params_to_dict(params: NetworkParams) -> dict:
    return {
        "schema_version": 1,
        "layer_sizes": list(params.shape.layer_sizes),
        "activation": params.shape.activation,
        "is_classifier": params.shape.is_classifier,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }


def params_from_dict(d: dict) -> NetworkParams:
    shape = NetworkShape(
        tuple(d["layer_sizes"]), d["activation"], d["is_classifier"]
    )
    return NetworkParams(
        tuple(np.array(w) for w in d["weights"]),
        tuple(np.array(b) for b in d["biases"]),
        shape,
    )
