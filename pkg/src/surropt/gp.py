"""Gaussian-process regression and binary classification.

Regression supports squared-exponential and polynomial kernels with
hyperparameters chosen by multi-start maximum-likelihood (negative log
marginal likelihood minimised over a bounded log-parameter box). The
classifier uses the squared-exponential kernel, a Newton inner loop for the
latent posterior mode, and the probit approximation for predictive
probabilities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize
from scipy.special import expit

from .data import sobol_unit
from .errors import (
    DegenerateTargetsError,
    FitError,
    IllConditionedError,
    ParameterError,
    ShapeError,
)

LOG2PI = math.log(2.0 * math.pi)

# bounded log-space search box for maximum-likelihood fitting
L_BOUNDS = (1e-2, 1e2)
SF2_BOUNDS = (1e-4, 1e4)
S02_BOUNDS = (1e-8, 1e2)  # lower bound stands in for an inhomogeneity of zero
N_MULTISTARTS = 8
MAX_NUGGET = 1e-4


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family; ``order`` applies to the polynomial kernel only."""

    kind: str = "sqexp"
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("sqexp", "poly"):
            raise ParameterError(f"unknown kernel {self.kind!r}")
        if self.kind == "poly" and self.order < 1:
            raise ParameterError("polynomial order must be >= 1")


def kernel_eval(spec: KernelSpec, x, xp, *, l=1.0, sigma_f2=1.0, sigma_02=0.0):
    """Covariance between two points.

    sqexp: sigma_f2 * exp(-sum((x - xp)^2) / (2 l^2))
    poly:  sigma_f2 * (sigma_02 + x . xp)^order
    """
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if x.shape != xp.shape:
        raise ShapeError("kernel arguments must have the same shape")
    if sigma_f2 <= 0.0:
        raise ParameterError("sigma_f2 must be positive")
    if spec.kind == "sqexp":
        if l <= 0.0:
            raise ParameterError("length scale must be positive")
        return float(sigma_f2 * np.exp(-np.sum((x - xp) ** 2) / (2.0 * l * l)))
    return float(sigma_f2 * (sigma_02 + float(x @ xp)) ** spec.order)


def _sqexp_gram(X, Z, l, sigma_f2):
    d2 = np.sum(X**2, axis=1)[:, None] + np.sum(Z**2, axis=1)[None, :] - 2.0 * X @ Z.T
    np.maximum(d2, 0.0, out=d2)
    return sigma_f2 * np.exp(-d2 / (2.0 * l * l))


def _poly_gram(X, Z, sigma_f2, sigma_02, order):
    return sigma_f2 * (sigma_02 + X @ Z.T) ** order


@dataclass(frozen=True)
class GprModel:
    """Fitted regression model; all arrays live in the standardised space."""

    spec: KernelSpec
    x_train: np.ndarray
    y_train: np.ndarray
    length_scale: float
    sigma_f2: float
    sigma_02: float
    noise: float
    alpha: np.ndarray
    inv_K: np.ndarray

    @property
    def n(self) -> int:
        return self.x_train.shape[0]

    @property
    def m(self) -> int:
        return self.x_train.shape[1]

    def kernel_row(self, x) -> np.ndarray:
        """k(X_train, x) for a single point or a batch."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.spec.kind == "sqexp":
            return _sqexp_gram(x, self.x_train, self.length_scale, self.sigma_f2)
        return _poly_gram(x, self.x_train, self.sigma_f2, self.sigma_02,
                          self.spec.order)


def _chol_with_escalation(K_base: np.ndarray, noise: float):
    """Cholesky of K_base + nugget*I, escalating the nugget tenfold on failure."""
    n = K_base.shape[0]
    nugget = noise
    while True:
        try:
            factor = cho_factor(K_base + nugget * np.eye(n), lower=True)
            return factor, nugget
        except LinAlgError:
            if nugget == 0.0:
                nugget = 1e-12
            else:
                nugget *= 10.0
            if nugget > MAX_NUGGET:
                cond = float(np.linalg.cond(K_base + MAX_NUGGET * np.eye(n)))
                raise IllConditionedError(
                    f"Gram matrix not factorizable below nugget {MAX_NUGGET:g} "
                    f"(condition estimate {cond:.3e})"
                ) from None


def _sqdist(X):
    d2 = np.sum(X**2, axis=1)[:, None] + np.sum(X**2, axis=1)[None, :] - 2.0 * X @ X.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def _gpr_nll_grad(theta, spec, X, y, noise):
    """Negative log marginal likelihood and gradient in log-parameter space."""
    n = X.shape[0]
    if spec.kind == "sqexp":
        l, sf2 = math.exp(theta[0]), math.exp(theta[1])
        d2 = _sqdist(X)
        K0 = sf2 * np.exp(-d2 / (2.0 * l * l))
    else:
        sf2, s02 = math.exp(theta[0]), math.exp(theta[1])
        base = s02 + X @ X.T
        K0 = sf2 * base**spec.order
    try:
        factor = cho_factor(K0 + noise * np.eye(n), lower=True)
    except LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve(factor, y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    nll = 0.5 * float(y @ alpha) + 0.5 * logdet + 0.5 * n * LOG2PI
    # d(nll)/d(theta_i) = 0.5 tr((inv_K - alpha alpha^T) dK/dtheta_i)
    inv_K = cho_solve(factor, np.eye(n))
    A = inv_K - np.outer(alpha, alpha)
    grads = np.zeros_like(theta)
    if spec.kind == "sqexp":
        grads[0] = 0.5 * float(np.sum(A * (K0 * d2 / (l * l))))
        grads[1] = 0.5 * float(np.sum(A * K0))
    else:
        grads[0] = 0.5 * float(np.sum(A * K0))
        dK = sf2 * spec.order * base ** (spec.order - 1) * s02
        grads[1] = 0.5 * float(np.sum(A * dK))
    return nll, grads


def _multistart_minimize(objective, bounds_log, seed, jac):
    """Minimise over a log box from Sobol starts; ties go to the lowest index."""
    d = len(bounds_log)
    lo = np.log([b[0] for b in bounds_log])
    hi = np.log([b[1] for b in bounds_log])
    starts = lo + sobol_unit(N_MULTISTARTS, d) * (hi - lo)
    # nudge starts deterministically off the exact corner
    starts = lo + (starts - lo) * 0.98 + 0.01 * (hi - lo)
    best_theta, best_val = None, np.inf
    for theta0 in starts:
        res = minimize(
            objective,
            theta0,
            jac=jac,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
        )
        candidates = [(float(res.fun), res.x)]
        f0 = objective(theta0)
        f0 = float(f0[0] if jac else f0)
        candidates.append((f0, theta0))
        for val, theta in candidates:
            if math.isfinite(val) and val < best_val:
                best_val, best_theta = val, np.array(theta)
    if best_theta is None:
        raise FitError("no finite likelihood found over the search box")
    return best_theta, best_val


def gpr_fit(x, y, spec: KernelSpec = KernelSpec(), noise: float = 1e-10,
            seed: int = 0) -> GprModel:
    """Fit kernel hyperparameters by maximum likelihood and cache solves.

    The search minimises 0.5 y'K^-1 y + 0.5 log|K| + n/2 log(2 pi) over a
    bounded log-parameter box from 8 Sobol starts; K carries ``noise`` on its
    diagonal (escalated tenfold, up to 1e-4, if factorization fails).
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    yv = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != yv.shape[0]:
        raise ShapeError("x and y row counts differ")
    if X.shape[0] < 2:
        raise ParameterError("need at least 2 training rows")
    if noise < 0.0:
        raise ParameterError("noise must be nonnegative")

    if spec.kind == "sqexp":
        bounds = (L_BOUNDS, SF2_BOUNDS)
    else:
        bounds = (SF2_BOUNDS, S02_BOUNDS)
    theta, _ = _multistart_minimize(
        lambda th: _gpr_nll_grad(th, spec, X, yv, max(noise, 1e-12)),
        bounds, seed, jac=True,
    )
    if spec.kind == "sqexp":
        l, sf2, s02 = math.exp(theta[0]), math.exp(theta[1]), 0.0
        K0 = _sqexp_gram(X, X, l, sf2)
    else:
        l, sf2, s02 = 1.0, math.exp(theta[0]), math.exp(theta[1])
        K0 = _poly_gram(X, X, sf2, s02, spec.order)
    factor, nugget = _chol_with_escalation(K0, noise)
    alpha = cho_solve(factor, yv)
    inv_K = cho_solve(factor, np.eye(X.shape[0]))
    inv_K = 0.5 * (inv_K + inv_K.T)
    return GprModel(
        spec=spec, x_train=X, y_train=yv, length_scale=l, sigma_f2=sf2,
        sigma_02=s02, noise=nugget, alpha=alpha, inv_K=inv_K,
    )


def gpr_nll(model: GprModel) -> float:
    """Negative log marginal likelihood of a fitted model (for diagnostics)."""
    if model.spec.kind == "sqexp":
        theta = np.log([model.length_scale, model.sigma_f2])
    else:
        theta = np.log([model.sigma_f2, max(model.sigma_02, 1e-300)])
    val, _ = _gpr_nll_grad(theta, model.spec, model.x_train, model.y_train,
                           model.noise)
    return float(val)


def gpr_predict(model: GprModel, x):
    """Predictive mean and variance; variance is clamped at zero.

    A single input vector yields floats; a batch yields arrays.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    k = model.kernel_row(x)
    mean = k @ model.alpha
    var = model.sigma_f2 - np.sum(k * (k @ model.inv_K), axis=1)
    var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class GpcModel:
    """Laplace-approximated classifier with squared-exponential kernel."""

    x_train: np.ndarray
    t_train: np.ndarray
    length_scale: float
    sigma_f2: float
    u_hat: np.ndarray
    delta: np.ndarray      # t - sigmoid(u_hat)
    inv_P: np.ndarray      # (W^-1 + K)^-1 in stabilised form
    W: np.ndarray          # diagonal of sigmoid(u_hat)(1 - sigmoid(u_hat))
    jitter: float

    @property
    def n(self) -> int:
        return self.x_train.shape[0]

    def kernel_row(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _sqexp_gram(x, self.x_train, self.length_scale, self.sigma_f2)


# jitter keeps solve(K, u_hat) well enough conditioned that the stationarity
# residual t - sigmoid(u) - K^-1 u can be verified externally to 1e-6
_GPC_JITTER = 1e-6
_NEWTON_TOL = 1e-8
_NEWTON_RES_TOL = 1e-9
_NEWTON_MAX_ITER = 100


def _gpc_mode(K, t, raise_on_failure=True):
    """Newton iteration for the latent posterior mode.

    Returns (u_hat, W_diag, B_cholesky) with B = I + W^1/2 K W^1/2, the
    stabilised matrix whose determinant equals |I + K W|. Convergence needs
    both a small update and a small gradient residual at the iterate.
    """
    n = K.shape[0]
    u = np.zeros(n)
    converged = False
    for _ in range(_NEWTON_MAX_ITER):
        s = expit(u)
        W = s * (1.0 - s)
        sqW = np.sqrt(W)
        B = np.eye(n) + sqW[:, None] * K * sqW[None, :]
        L = cho_factor(B, lower=True)
        b = W * u + (t - s)
        a = b - sqW * cho_solve(L, sqW * (K @ b))
        u_new = K @ a
        update = float(np.max(np.abs(u_new - u)))
        residual = float(np.max(np.abs(t - expit(u_new) - a)))
        u = u_new
        if update <= _NEWTON_TOL and residual <= _NEWTON_RES_TOL:
            converged = True
            break
    if not converged:
        if raise_on_failure:
            raise FitError(
                f"Newton iteration for the latent mode did not converge in "
                f"{_NEWTON_MAX_ITER} steps (last update {update:.3e}, "
                f"residual {residual:.3e})"
            )
        return None
    s = expit(u)
    W = s * (1.0 - s)
    sqW = np.sqrt(W)
    B = np.eye(n) + sqW[:, None] * K * sqW[None, :]
    L = cho_factor(B, lower=True)
    return u, W, L


def _gpc_nll(theta, X, t):
    """Laplace-approximated negative log marginal likelihood."""
    l, sf2 = math.exp(theta[0]), math.exp(theta[1])
    n = X.shape[0]
    K = _sqexp_gram(X, X, l, sf2) + _GPC_JITTER * np.eye(n)
    try:
        mode = _gpc_mode(K, t, raise_on_failure=False)
        if mode is None:
            return 1e25
        u, _, L = mode
        a = cho_solve(cho_factor(K, lower=True), u)
    except LinAlgError:
        return 1e25
    logdet_B = 2.0 * float(np.sum(np.log(np.diag(L[0]))))
    return (
        -float(t @ u)
        + 0.5 * float(u @ a)
        + 0.5 * logdet_B
        + float(np.sum(np.logaddexp(0.0, u)))
    )


def gpc_fit(x, t, seed: int = 0) -> GpcModel:
    """Fit the classifier: Newton inner loop, bounded multi-start outer MLE."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    tv = np.asarray(t, dtype=float).reshape(-1)
    if X.shape[0] != tv.shape[0]:
        raise ShapeError("x and t row counts differ")
    if not (np.any(tv == 0.0) and np.any(tv == 1.0)):
        raise DegenerateTargetsError("targets must contain both classes")
    theta, _ = _multistart_minimize(
        lambda th: _gpc_nll(th, X, tv),
        (L_BOUNDS, SF2_BOUNDS), seed, jac=False,
    )
    l, sf2 = math.exp(theta[0]), math.exp(theta[1])
    n = X.shape[0]
    K = _sqexp_gram(X, X, l, sf2) + _GPC_JITTER * np.eye(n)
    u, W, L = _gpc_mode(K, tv)
    sqW = np.sqrt(W)
    # (W^-1 + K)^-1 = W^1/2 B^-1 W^1/2 without forming W^-1
    inv_B = cho_solve(L, np.eye(n))
    inv_P = sqW[:, None] * inv_B * sqW[None, :]
    inv_P = 0.5 * (inv_P + inv_P.T)
    return GpcModel(
        x_train=X, t_train=tv, length_scale=l, sigma_f2=sf2, u_hat=u,
        delta=tv - expit(u), inv_P=inv_P, W=W, jitter=_GPC_JITTER,
    )


def gpc_latent(model: GpcModel, x):
    """Probit-scaled latent value whose sign decides the predicted class."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    k = model.kernel_row(x)
    num = k @ model.delta
    quad = np.sum(k * (k @ model.inv_P), axis=1)
    inner = np.maximum(model.sigma_f2 - quad, 0.0)
    latent = num / np.sqrt(1.0 + (math.pi / 8.0) * inner)
    return float(latent[0]) if single else latent


def gpc_predict(model: GpcModel, x):
    """Probability that the target is 1; strictly inside (0, 1)."""
    latent = gpc_latent(model, x)
    return expit(latent) if not np.isscalar(latent) else float(expit(latent))


def gpc_predict_class(model: GpcModel, x, threshold: float = 0.5):
    p = gpc_predict(model, x)
    return (np.asarray(p) >= threshold).astype(int)


# ---------------------------------------------------------------------------
# serialization


def gpr_to_dict(model: GprModel) -> dict:
    return {
        "schema_version": 1,
        "kind": "gpr",
        "kernel": {"kind": model.spec.kind, "order": model.spec.order},
        "length_scale": model.length_scale,
        "sigma_f2": model.sigma_f2,
        "sigma_02": model.sigma_02,
        "noise": model.noise,
        "x_train": model.x_train.tolist(),
        "y_train": model.y_train.tolist(),
        "alpha": model.alpha.tolist(),
        "inv_K": model.inv_K.tolist(),
    }


def gpr_from_dict(d: dict) -> GprModel:
    return GprModel(
        spec=KernelSpec(d["kernel"]["kind"], d["kernel"]["order"]),
        x_train=np.array(d["x_train"]),
        y_train=np.array(d["y_train"]),
        length_scale=d["length_scale"],
        sigma_f2=d["sigma_f2"],
        sigma_02=d["sigma_02"],
        noise=d["noise"],
        alpha=np.array(d["alpha"]),
        inv_K=np.array(d["inv_K"]),
    )


def gpc_to_dict(model: GpcModel) -> dict:
    return {
        "schema_version": 1,
        "kind": "gpc",
        "length_scale": model.length_scale,
        "sigma_f2": model.sigma_f2,
        "x_train": model.x_train.tolist(),
        "t_train": model.t_train.tolist(),
        "u_hat": model.u_hat.tolist(),
        "delta": model.delta.tolist(),
        "inv_P": model.inv_P.tolist(),
        "W": model.W.tolist(),
        "jitter": model.jitter,
    }


def gpc_from_dict(d: dict) -> GpcModel:
    return GpcModel(
        x_train=np.array(d["x_train"]),
        t_train=np.array(d["t_train"]),
        length_scale=d["length_scale"],
        sigma_f2=d["sigma_f2"],
        u_hat=np.array(d["u_hat"]),
        delta=np.array(d["delta"]),
        inv_P=np.array(d["inv_P"]),
        W=np.array(d["W"]),
        jitter=d["jitter"],
    )
