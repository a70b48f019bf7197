"""One-factor linear-Gaussian state-space model.

    x_t = mu_x + alpha * x_{t-1} + e_t,        e_t ~ N(0, sigma_x^2)
    y_t = mu_y + beta * x_t + u_t,             u_t ~ N(0, R)

Used three ways: as the estimated Kalman baseline, as the true-parameter
"Kalman max" benchmark, and as the prior model whose filtered factor
regularizes transformer training.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

from .errors import ConfigError, FilterDegenerate

DIFFUSE_VAR = 1e7
_LOG2PI = math.log(2 * math.pi)


@dataclass
class LinearSSMParams:
    mu_x: float
    alpha: float
    sigma_x: float
    mu_y: np.ndarray
    beta: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.mu_y = np.atleast_1d(np.asarray(self.mu_y, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 0:
            R = R * np.eye(len(self.mu_y))
        self.R = R
        self.mu_x, self.alpha, self.sigma_x = float(self.mu_x), float(self.alpha), float(self.sigma_x)

    @property
    def k(self):
        return len(self.mu_y)

    def validate(self):
        k = self.k
        if self.beta.shape != (k,) or self.R.shape != (k, k):
            raise ConfigError("inconsistent parameter shapes")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.sigma_x < 0:
            raise ConfigError("sigma_x must be nonnegative")
        if np.abs(self.R - self.R.T).max() > 1e-10 * max(1.0, np.abs(self.R).max()):
            raise ConfigError("R must be symmetric")
        if np.linalg.eigvalsh(self.R).min() < -1e-10:
            raise ConfigError("R must be positive semi-definite")
        return self

    def copy(self):
        return LinearSSMParams(self.mu_x, self.alpha, self.sigma_x, self.mu_y.copy(),
                               self.beta.copy(), self.R.copy())

    def rescaled(self, shift, scale):
        """Parameters for data ``(y - shift) / scale`` (column-wise)."""
        shift = np.broadcast_to(np.asarray(shift, float), (self.k,))
        scale = np.broadcast_to(np.asarray(scale, float), (self.k,))
        return LinearSSMParams(self.mu_x, self.alpha, self.sigma_x, (self.mu_y - shift) / scale,
                               self.beta / scale, self.R / np.outer(scale, scale))

    # flat key-value text export
    def to_text(self) -> str:
        def fmt(a):
            return "[" + ", ".join(repr(float(v)) for v in np.ravel(a)) + "]"
        return "\n".join([
            f"k = {self.k}",
            f"mu_x = {self.mu_x!r}",
            f"alpha = {self.alpha!r}",
            f"sigma_x = {self.sigma_x!r}",
            f"mu_y = {fmt(self.mu_y)}",
            f"beta = {fmt(self.beta)}",
            f"R = {fmt(self.R)}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LinearSSMParams":
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed parameter line {line!r}")
            val = val.strip()
            if val.startswith("["):
                vals[key.strip()] = np.array([float(v) for v in val.strip("[]").split(",") if v.strip()])
            else:
                vals[key.strip()] = float(val)
        try:
            k = int(vals["k"])
            return cls(vals["mu_x"], vals["alpha"], vals["sigma_x"], vals["mu_y"], vals["beta"],
                       vals["R"].reshape(k, k))
        except KeyError as exc:
            raise ConfigError(f"missing parameter {exc.args[0]}") from None


@dataclass
class FilterOutput:
    filtered_mean: np.ndarray
    filtered_var: np.ndarray
    loglik: float
    pred_mean: np.ndarray
    pred_var: np.ndarray


def initial_moments(p: LinearSSMParams):
    """Unconditional mean/variance of the state, diffuse when alpha == 1."""
    if p.alpha >= 1:
        return 0.0, DIFFUSE_VAR
    return p.mu_x / (1 - p.alpha), p.sigma_x**2 / (1 - p.alpha**2)


def _try_chol(R):
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(L)
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        return None
    return L


def kalman_filter(p: LinearSSMParams, y, x0_mean=None, x0_var=None) -> FilterOutput:
    """Filtered factor mean/variance and the exact Gaussian log-likelihood.

    ``x0_mean``/``x0_var`` describe x at the first period before its
    measurement is seen; they default to the unconditional moments.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != p.k:
        raise ConfigError(f"data has {y.shape[1]} columns, model has k={p.k}")
    if not np.isfinite(y).all():
        raise ConfigError("observations must be finite")
    m0, v0 = initial_moments(p)
    m0 = m0 if x0_mean is None else float(x0_mean)
    v0 = v0 if x0_var is None else float(x0_var)
    L = _try_chol(p.R)
    if L is not None:
        return _filter_info(p, y, L, m0, v0)
    return _filter_cov(p, y, m0, v0)


def _filter_info(p, y, L, m0, v0):
    # scalar state lets the k x k update collapse to R^{-1}-whitened scalars
    n, k = y.shape
    Z = solve_triangular(L, (y - p.mu_y).T, lower=True).T
    b = solve_triangular(L, p.beta, lower=True)
    s = float(b @ b)
    zz = (Z * Z).sum(axis=1).tolist()
    bz = (Z @ b).tolist()
    const = k * _LOG2PI + 2.0 * float(np.log(np.diag(L)).sum())
    mu, a, q = p.mu_x, p.alpha, p.sigma_x**2
    fm, fv, pm, pv = [0.0] * n, [0.0] * n, [0.0] * n, [0.0] * n
    x, P, ll = m0, v0, 0.0
    log = math.log
    for t in range(n):
        pm[t], pv[t] = x, P
        qv = bz[t] - s * x
        vRv = zz[t] - 2.0 * x * bz[t] + x * x * s
        d = 1.0 + P * s
        Pf = P / d
        ll -= 0.5 * (const + log(d) + vRv - Pf * qv * qv)
        x = x + Pf * qv
        fm[t], fv[t] = x, Pf
        x = mu + a * x
        P = a * a * Pf + q
    return FilterOutput(np.array(fm), np.array(fv), ll, np.array(pm), np.array(pv))


def _filter_cov(p, y, m0, v0):
    n, k = y.shape
    bb = np.outer(p.beta, p.beta)
    fm, fv, pm, pv = (np.empty(n) for _ in range(4))
    x, P, ll = m0, v0, 0.0
    for t in range(n):
        pm[t], pv[t] = x, P
        F = P * bb + p.R
        try:
            C = np.linalg.cholesky(F)
        except np.linalg.LinAlgError:
            raise FilterDegenerate(f"singular innovation covariance at period {t}") from None
        if np.diag(C).min() <= 1e-150:
            raise FilterDegenerate(f"singular innovation covariance at period {t}")
        v = y[t] - p.mu_y - p.beta * x
        w = solve_triangular(C, v, lower=True)
        g = solve_triangular(C, p.beta, lower=True)
        ll -= 0.5 * (k * _LOG2PI + 2 * np.log(np.diag(C)).sum() + w @ w)
        x = x + P * (g @ w)
        P = max(P - P * P * (g @ g), 0.0)
        fm[t], fv[t] = x, P
        x = p.mu_x + p.alpha * x
        P = p.alpha**2 * P + p.sigma_x**2
    return FilterOutput(fm, fv, float(ll), pm, pv)


def loglik(p: LinearSSMParams, y) -> float:
    return kalman_filter(p, y).loglik


# --------------------------------------------------------------------------
# maximum likelihood


PARAM_NAMES = ("mu_x", "alpha", "sigma_x", "mu_y", "beta", "R")


@dataclass
class MLEOptions:
    fixed: tuple = ("mu_x", "sigma_x")
    shared_sigma_y: bool = False
    method: str = "L-BFGS-B"
    max_evals: int = 20000
    tol: float = 1e-8
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.fixed) - set(PARAM_NAMES)
        if unknown:
            raise ConfigError(f"unknown fixed parameters {sorted(unknown)}")


@dataclass
class MLEResult:
    params: LinearSSMParams
    loglik: float
    converged: bool
    n_evals: int
    history: list = field(default_factory=list)
    message: str = ""


def _logit(a):
    a = min(max(a, 1e-6), 1 - 1e-6)
    return math.log(a / (1 - a))


def _expit(z):
    return 1 / (1 + math.exp(-z)) if z >= 0 else math.exp(z) / (1 + math.exp(z))


class _Packer:
    """Maps LinearSSMParams to an unconstrained vector and back."""

    def __init__(self, base: LinearSSMParams, opts: MLEOptions):
        self.base = base
        self.opts = opts
        self.free = [n for n in PARAM_NAMES if n not in opts.fixed]
        self.k = base.k
        self.tril = np.tril_indices(self.k)

    def pack(self, p: LinearSSMParams) -> np.ndarray:
        parts = []
        for name in self.free:
            if name == "mu_x":
                parts.append([p.mu_x])
            elif name == "alpha":
                parts.append([_logit(p.alpha)])
            elif name == "sigma_x":
                parts.append([math.log(max(p.sigma_x, 1e-12))])
            elif name in ("mu_y", "beta"):
                parts.append(getattr(p, name))
            elif self.opts.shared_sigma_y:
                parts.append([0.5 * math.log(max(np.diag(p.R).mean(), 1e-12))])
            else:
                Rj = p.R + 1e-10 * np.eye(self.k)
                L = np.linalg.cholesky(Rj)
                L[np.diag_indices(self.k)] = np.log(np.diag(L))
                parts.append(L[self.tril])
        return np.concatenate([np.asarray(x, float) for x in parts]) if parts else np.zeros(0)

    def unpack(self, theta) -> LinearSSMParams:
        p = self.base.copy()
        i = 0
        for name in self.free:
            if name == "mu_x":
                p.mu_x = float(theta[i]); i += 1
            elif name == "alpha":
                p.alpha = _expit(float(theta[i])); i += 1
            elif name == "sigma_x":
                p.sigma_x = math.exp(float(theta[i])); i += 1
            elif name in ("mu_y", "beta"):
                setattr(p, name, np.array(theta[i:i + self.k], float)); i += self.k
            elif self.opts.shared_sigma_y:
                p.R = math.exp(2 * float(theta[i])) * np.eye(self.k); i += 1
            else:
                m = len(self.tril[0])
                L = np.zeros((self.k, self.k))
                L[self.tril] = theta[i:i + m]
                L[np.diag_indices(self.k)] = np.exp(np.diag(L))
                p.R = L @ L.T
                i += m
        return p


def initial_params(y, shared_sigma_y=False) -> LinearSSMParams:
    """Principal-component starting values; the factor has unit shock sd."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    mean = y.mean(axis=0)
    yc = y - mean
    _, _, vt = np.linalg.svd(yc, full_matrices=False)
    load = vt[0] * np.sign(vt[0].sum() or 1.0)
    f = yc @ load
    a = float(np.clip(np.dot(f[1:], f[:-1]) / np.dot(f[:-1], f[:-1]), 0.05, 0.98))
    innov = f[1:] - a * f[:-1]
    f = f / max(innov.std(), 1e-8)
    X = np.column_stack([np.ones(len(f)), f])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    rv = np.maximum(resid.var(axis=0), 1e-4 * y.var(axis=0).clip(1e-12))
    R = rv.mean() * np.eye(y.shape[1]) if shared_sigma_y else np.diag(rv)
    return LinearSSMParams(0.0, a, 1.0, coef[0], coef[1], R)


def estimate_mle(y, init: Optional[LinearSSMParams] = None,
                 opts: Optional[MLEOptions] = None) -> MLEResult:
    """Maximise the exact log-likelihood over transformed parameters."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 50:
        raise ConfigError("maximum likelihood needs at least 50 observations")
    opts = opts or MLEOptions()
    init = init.copy() if init is not None else initial_params(y, opts.shared_sigma_y)
    pk = _Packer(init, opts)
    n = y.shape[0]
    counter = {"n": 0}

    def objective(theta):
        counter["n"] += 1
        try:
            with np.errstate(all="ignore"):
                ll = kalman_filter(pk.unpack(theta), y).loglik
        except (FilterDegenerate, np.linalg.LinAlgError, OverflowError, ValueError):
            return 1e10
        return -ll / n if np.isfinite(ll) else 1e10

    history = []

    def run(theta0):
        local = [objective(theta0)]
        cb = lambda th, *a: local.append(objective(th))  # noqa: E731
        if opts.method == "Nelder-Mead":
            res = optimize.minimize(objective, theta0, method="Nelder-Mead", callback=cb,
                                    options=dict(maxfev=opts.max_evals, fatol=opts.tol,
                                                 xatol=1e-8, adaptive=True))
        else:
            res = optimize.minimize(objective, theta0, method=opts.method, callback=cb,
                                    options=dict(maxfun=opts.max_evals, maxiter=opts.max_evals,
                                                 ftol=opts.tol, gtol=1e-7))
        history.extend(-v * n for v in local)
        return res

    theta0 = pk.pack(init)
    best = run(theta0)
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.restarts):
        res = run(best.x + 0.05 * rng.standard_normal(best.x.shape))
        if res.fun < best.fun:
            best = res
    params = pk.unpack(best.x)
    converged = bool(best.success)
    if not converged:
        warnings.warn(f"MLE did not converge: {best.message}", RuntimeWarning, stacklevel=2)
    return MLEResult(params, -best.fun * n, converged, counter["n"], history, str(best.message))


# --------------------------------------------------------------------------
# true-parameter benchmark


def kalman_max(spec) -> LinearSSMParams:
    """Linear part of a simulated process (raw data scale), nonlinearities dropped."""
    if len(spec.alpha) != 1 or spec.regime is not None or spec.y_lag_coeffs:
        raise ConfigError("kalman_max covers one-lag processes without regimes (1-4)")
    return LinearSSMParams(spec.mu_x, spec.alpha[0], spec.sigma_x, spec.mu_y, spec.beta,
                           spec.covariance())
