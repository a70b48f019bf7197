"""Simulated one-factor state-space processes.

Six processes of increasing difficulty share one simulator.  Nonlinearity
enters through the sign preserving power function ``spow``; shocks and
measurement errors come from Gaussian, Student-t or skewed-t families that
are rescaled to a target variance.
"""
from __future__ import annotations

import csv
import functools
import math
import re
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from .errors import ConfigError, SimulationDiverged

SPOW_EPS = 1e-4


@dataclass(frozen=True)
class SpowParams:
    gamma: float
    c: float = 1.0
    epsilon: float = SPOW_EPS

    def __post_init__(self):
        if not (self.gamma > 0 and self.c > 0 and self.epsilon >= 0):
            raise ConfigError(f"invalid spow parameters {self}")


def spow(z, p: SpowParams):
    """Smoothed sign preserving power function ``c*sign(z)*[(|z/c|+eps)^g - eps^g]``.

    Odd, strictly increasing and exactly zero at the origin.
    """
    return _spow(z, p.gamma, p.c, p.epsilon)


def _spow(z, gamma, c, eps=SPOW_EPS):
    z = np.asarray(z, dtype=float)
    out = c * np.sign(z) * ((np.abs(z / c) + eps) ** gamma - eps**gamma)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# distributions


_DIST_RE = re.compile(r"^\s*(gaussian|normal|t|skew_t)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class Dist:
    """Zero-mean innovation family; the variance is supplied at draw time."""

    family: str = "gaussian"
    df: Optional[float] = None
    skew: Optional[float] = None

    def __post_init__(self):
        if self.family not in ("gaussian", "t", "skew_t"):
            raise ConfigError(f"unsupported distribution family {self.family!r}")
        if self.family != "gaussian":
            if self.df is None or not self.df > 2:
                raise ConfigError(f"{self.family} needs df > 2, got {self.df}")
        if self.family == "skew_t" and self.skew is None:
            raise ConfigError("skew_t needs a skew value")

    @classmethod
    def parse(cls, text: str) -> "Dist":
        """Parse ``gaussian``, ``t(df=10)`` or ``skew_t(df=10, skew=-2)``."""
        m = _DIST_RE.match(text)
        if not m:
            raise ConfigError(f"cannot parse distribution {text!r}")
        fam = "gaussian" if m.group(1) == "normal" else m.group(1)
        kw = {}
        if m.group(2):
            for part in m.group(2).split(","):
                key, _, val = part.partition("=")
                kw[key.strip()] = float(val)
        unknown = set(kw) - {"df", "skew"}
        if unknown:
            raise ConfigError(f"unknown distribution arguments {sorted(unknown)}")
        return cls(fam, kw.get("df"), kw.get("skew"))

    def __str__(self):
        if self.family == "gaussian":
            return "gaussian"
        if self.family == "t":
            return f"t(df={self.df:g})"
        return f"skew_t(df={self.df:g}, skew={self.skew:g})"


GAUSSIAN = Dist()


def _abs_t_moment(r, df):
    """E|T|^r for a Student-t with ``df`` degrees of freedom (r < df)."""
    return math.exp(
        0.5 * r * math.log(df) + gammaln((r + 1) / 2) + gammaln((df - r) / 2)
        - gammaln(df / 2) - 0.5 * math.log(math.pi)
    )


def _two_piece_moment(g, r, df):
    return _abs_t_moment(r, df) * (g ** (r + 1) + (-1) ** r / g ** (r + 1)) / (g + 1 / g)


def _two_piece_skewness(g, df):
    m1, m2, m3 = (_two_piece_moment(g, r, df) for r in (1, 2, 3))
    var = m2 - m1**2
    return (m3 - 3 * m1 * m2 + 2 * m1**3) / var**1.5


def _azzalini_st_skewness(alpha, df):
    d = alpha / math.sqrt(1 + alpha**2)
    b = math.sqrt(df / math.pi) * math.exp(gammaln((df - 1) / 2) - gammaln(df / 2))
    mu = b * d
    var = df / (df - 2) - mu**2
    return mu * (df * (3 - d**2) / (df - 3) - 3 * df / (df - 2) + 2 * mu**2) / var**1.5


@functools.lru_cache(maxsize=None)
def two_piece_asymmetry(skew: float, df: float) -> float:
    """Asymmetry of the split-scale t whose skewness equals that of a skew-t
    with slant ``skew`` (Azzalini parameterisation) and the same ``df``.
    Values below one put the heavier tail on the left."""
    if skew == 0:
        return 1.0
    if df <= 3:
        raise ConfigError("skewness matching needs df > 3")
    target = _azzalini_st_skewness(skew, df)
    if skew < 0:
        return brentq(lambda g: _two_piece_skewness(g, df) - target, 1e-3, 1.0)
    return brentq(lambda g: _two_piece_skewness(g, df) - target, 1.0, 1e3)


@functools.lru_cache(maxsize=None)
def _two_piece_standardizer(skew, df):
    g = two_piece_asymmetry(skew, df)
    m1 = _two_piece_moment(g, 1, df)
    var = _two_piece_moment(g, 2, df) - m1**2
    return g, m1, math.sqrt(var)


def sample_shock(dist: Dist, target_var: float, rng: np.random.Generator, size=None):
    """Draw zero-mean innovations with population variance ``target_var``."""
    if not target_var > 0:
        raise ConfigError(f"target variance must be positive, got {target_var}")
    sd = math.sqrt(target_var)
    if dist.family == "gaussian":
        return sd * rng.standard_normal(size)
    if dist.family == "t":
        return sd * math.sqrt((dist.df - 2) / dist.df) * rng.standard_t(dist.df, size)
    if dist.family == "skew_t":
        g, m1, s = _two_piece_standardizer(dist.skew, dist.df)
        mag = np.abs(rng.standard_t(dist.df, size))
        pos = rng.random(size) < g**2 / (1 + g**2)
        z = np.where(pos, g * mag, -mag / g)
        return sd * (z - m1) / s
    raise ConfigError(f"unsupported distribution {dist}")


def shock_logpdf(x, dist: Dist, var: float):
    """Log density of ``sample_shock(dist, var)`` evaluated at ``x``."""
    x = np.asarray(x, dtype=float)
    sd = math.sqrt(var)
    if dist.family == "gaussian":
        return -0.5 * (x / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)
    nu = dist.df
    logc = gammaln((nu + 1) / 2) - gammaln(nu / 2) - 0.5 * math.log(nu * math.pi)
    if dist.family == "t":
        s = sd * math.sqrt((nu - 2) / nu)
        z = x / s
        return logc - (nu + 1) / 2 * np.log1p(z * z / nu) - math.log(s)
    g, m1, s = _two_piece_standardizer(dist.skew, nu)
    z = x / sd * s + m1
    zz = np.where(z >= 0, z / g, z * g)
    return (math.log(2 / (g + 1 / g)) + logc - (nu + 1) / 2 * np.log1p(zz * zz / nu)
            + math.log(s / sd))


def sample_errors(dist: Dist, chol: np.ndarray, rng: np.random.Generator, n: int):
    """Draw ``n`` correlated error vectors with covariance ``chol @ chol.T``.

    Student-t errors share one chi-square mixing draw per period, so the
    vector is multivariate t and its density stays in closed form.
    """
    k = chol.shape[0]
    z = rng.standard_normal((n, k))
    if dist.family == "gaussian":
        return z @ chol.T
    if dist.family == "t":
        w = rng.chisquare(dist.df, n)
        scale = np.sqrt((dist.df - 2) / w)
        return (z * scale[:, None]) @ chol.T
    raise ConfigError(f"measurement errors support gaussian or t, not {dist}")


def errors_logpdf(v: np.ndarray, dist: Dist, chol: np.ndarray):
    """Log density of ``sample_errors`` at rows of ``v`` (..., k)."""
    k = chol.shape[0]
    w = np.linalg.solve(chol, np.moveaxis(v, -1, 0).reshape(k, -1))
    q = (w * w).sum(axis=0).reshape(v.shape[:-1])
    logdet = np.log(np.diag(chol)).sum()
    if dist.family == "gaussian":
        return -0.5 * q - logdet - 0.5 * k * math.log(2 * math.pi)
    nu = dist.df
    q = q * nu / (nu - 2)
    return (gammaln((nu + k) / 2) - gammaln(nu / 2) - 0.5 * k * math.log(nu * math.pi)
            - logdet - 0.5 * k * math.log((nu - 2) / nu)
            - (nu + k) / 2 * np.log1p(q / nu))


# --------------------------------------------------------------------------
# covariance


@dataclass(frozen=True)
class CovarianceSpec:
    sds: tuple
    mean_corr: float = 0.3
    jitter: float = 0.15

    def __post_init__(self):
        if not all(s > 0 for s in self.sds):
            raise ConfigError("measurement standard deviations must be positive")


def nearest_correlation(c: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues to zero and rescale to a unit diagonal."""
    w, v = np.linalg.eigh((c + c.T) / 2)
    if w.min() >= 0:
        return c
    fixed = (v * np.clip(w, 0, None)) @ v.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return (fixed + fixed.T) / 2


def random_correlation(k, mean_corr, jitter, rng):
    c = np.full((k, k), float(mean_corr))
    if jitter > 0:
        off = rng.uniform(-jitter, jitter, (k, k))
        c = c + np.triu(off, 1) + np.triu(off, 1).T
    np.fill_diagonal(c, 1.0)
    return nearest_correlation(c)


def build_covariance(spec: CovarianceSpec, rng: np.random.Generator) -> np.ndarray:
    """``D R D`` with a jittered correlation matrix ``R``."""
    sds = np.asarray(spec.sds, dtype=float)
    r = random_correlation(len(sds), spec.mean_corr, spec.jitter, rng)
    cov = r * np.outer(sds, sds)
    cov = (cov + cov.T) / 2
    np.fill_diagonal(cov, sds**2)
    return cov


# --------------------------------------------------------------------------
# process specifications


@dataclass(frozen=True)
class RegimeSpec:
    p01: float = 0.03
    p10: float = 0.01
    scale: tuple = (1.01, 0.98)
    shock_dist: tuple = (GAUSSIAN, Dist("skew_t", 10, -2))
    error_dist: tuple = (GAUSSIAN, Dist("t", 10))

    def __post_init__(self):
        if not (0 <= self.p01 <= 1 and 0 <= self.p10 <= 1):
            raise ConfigError("switch probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class DGPSpec:
    process_id: int
    mu_y: tuple
    beta: tuple
    alpha: tuple = (0.96,)
    mu_x: float = 0.0
    sigma_x: float = 1.0
    phi: Optional[float] = None          # state spow exponent; None -> linear
    c_x: float = 1.0
    gamma_exp: Optional[tuple] = None    # measurement spow exponents; None -> linear
    c_y: float = 1.0
    ma_coeff: float = 0.0
    y_lag_coeffs: tuple = ()
    shock_dist: Dist = GAUSSIAN
    error_dist: Dist = GAUSSIAN
    regime: Optional[RegimeSpec] = None
    sds: tuple = ()
    corr: Optional[tuple] = None          # k x k correlation as nested tuples
    burn_in: int = 1000
    n: int = 1800
    x0: float = 0.0

    def __post_init__(self):
        k = len(self.mu_y)
        if k < 1 or len(self.beta) != k:
            raise ConfigError("mu_y and beta must have the same positive length")
        if self.gamma_exp is not None and len(self.gamma_exp) != k:
            raise ConfigError("gamma_exp must have length k")
        if self.sds and len(self.sds) != k:
            raise ConfigError("sds must have length k")
        if any(s < 0 for s in self.sds):
            raise ConfigError("sds must be nonnegative")
        if not 1 <= len(self.alpha) <= 3:
            raise ConfigError("alpha carries one to three lags")
        if len(self.y_lag_coeffs) > 3:
            raise ConfigError("at most three measurement lags")
        if self.sigma_x < 0:
            raise ConfigError("sigma_x must be nonnegative")

    @property
    def k(self):
        return len(self.mu_y)

    @property
    def n_lags(self):
        return max(len(self.alpha), len(self.y_lag_coeffs), 1)

    def covariance(self) -> np.ndarray:
        sds = np.asarray(self.sds, dtype=float)
        corr = np.eye(self.k) if self.corr is None else np.asarray(self.corr)
        cov = corr * np.outer(sds, sds)
        np.fill_diagonal(cov, sds**2)
        return cov

    def chol(self) -> np.ndarray:
        cov = self.covariance()
        w, v = np.linalg.eigh(cov)
        if w.min() > 1e-12 * max(w.max(), 1e-300):
            return np.linalg.cholesky(cov)
        # PSD but singular: symmetric square root works for sampling
        return v * np.sqrt(np.clip(w, 0, None))

    def regime_scale(self, s: int) -> float:
        return 1.0 if self.regime is None else self.regime.scale[s]


# reference parameter values
_MU_Y_P1 = (0.11, 0.61, 0.70, -0.74, 0.65)
_BETA_P1 = (1.01, 1.25, 0.60, 0.98, 0.91)
_MU_Y_P2 = (0.79, -0.47, -0.256, 0.146, 0.82)
_MU_Y = (0.79, -0.47, -0.26, 0.15, 0.82)
_BETA = (0.58, 1.56, 1.62, 1.23, 1.18)
_T10 = Dist("t", 10)
_SKEW_T = Dist("skew_t", 10, -2)

_BASE = {
    1: dict(mu_y=_MU_Y_P1, beta=_BETA_P1),
    2: dict(mu_y=_MU_Y_P2, beta=_BETA, gamma_exp=(0.55, 1.37, 0.57, 1.48, 0.61),
            c_y=0.77, error_dist=_T10),
    3: dict(mu_y=_MU_Y, beta=_BETA, phi=0.36, sigma_x=1.2, c_x=0.13, shock_dist=_T10),
    4: dict(mu_y=(-0.46, -0.43, 0.24, 0.85, 0.10), beta=(1.41, 1.50, 1.60, 0.94, 0.51),
            gamma_exp=(1.08, 0.67, 1.03, 1.02, 1.06), phi=0.8, sigma_x=0.65, c_x=1.0,
            c_y=15.0, shock_dist=_T10, error_dist=_T10),
    5: dict(mu_y=_MU_Y, beta=_BETA, alpha=(0.74, 0.15, 0.074), ma_coeff=0.15,
            gamma_exp=(0.68, 1.12, 0.70, 1.21, 0.75), sigma_x=0.387, c_y=1.28,
            y_lag_coeffs=(0.2, 0.05, 0.02), shock_dist=_SKEW_T, error_dist=_T10),
    6: dict(mu_y=_MU_Y, beta=_BETA, alpha=(0.74, 0.15, 0.074), phi=0.8, sigma_x=0.51,
            c_x=2.24, gamma_exp=(0.57, 1.34, 0.59, 1.45, 0.62), c_y=1.83,
            y_lag_coeffs=(0.2, 0.05, 0.02), regime=RegimeSpec()),
}

SNR_SD_RATIO = 0.5
PILOT_STEPS = 10_000


@functools.lru_cache(maxsize=None)
def default_spec(process_id: int) -> DGPSpec:
    """Process ``process_id`` with calibrated error sds and a fixed random
    correlation matrix; both stay fixed across simulation seeds."""
    if process_id not in _BASE:
        raise ConfigError(f"process_id must be in 1..6, got {process_id}")
    base = DGPSpec(process_id=process_id, **_BASE[process_id])
    rng = np.random.default_rng([process_id, 7919])
    corr = random_correlation(base.k, 0.3, 0.15, rng)
    signal = noise_free_measurements(base, PILOT_STEPS, seed=[process_id, 104729])
    sds = tuple(float(s) for s in SNR_SD_RATIO * signal.std(axis=0))
    return replace(base, sds=sds, corr=tuple(map(tuple, corr)))


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class Splits:
    train: tuple
    val: tuple
    test: tuple

    @property
    def in_sample(self):
        return (self.train[0], self.val[1])


@dataclass
class SimulatedDataset:
    y: np.ndarray                 # N x k standardized
    x_true: np.ndarray            # N, raw units
    seed: int
    split: Splits
    y_mean: np.ndarray
    y_sd: np.ndarray
    y_pre: np.ndarray             # raw pre-sample rows (oldest first) for lagged measurements
    regime: Optional[np.ndarray] = None
    process_id: Optional[int] = None

    @property
    def y_raw(self):
        return self.y * self.y_sd + self.y_mean

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.y.shape[1]


def split(n: int, train_total: int = 800, test: int = 1000, val_frac: float = 0.2) -> Splits:
    """Contiguous train / validation / test index ranges; test is the tail."""
    if n < train_total + test:
        raise ConfigError(f"need at least {train_total + test} periods, got {n}")
    if not 0 < val_frac < 1:
        raise ConfigError("val_frac must lie in (0, 1)")
    start = n - test - train_total
    n_val = int(round(train_total * val_frac))
    a, b, c = start, start + train_total - n_val, start + train_total
    return Splits((a, b), (b, c), (c, n))


def _regime_path(spec, rng, total):
    s = np.zeros(total, dtype=np.int8)
    if spec.regime is None:
        return s
    u = rng.random(total)
    cur = 0
    for t in range(total):
        if cur == 0 and u[t] < spec.regime.p01:
            cur = 1
        elif cur == 1 and u[t] < spec.regime.p10:
            cur = 0
        s[t] = cur
    return s


def _draw_innovations(spec, rng, total, regimes, with_errors=True):
    """Shocks and errors for every period; regime-specific families are
    drawn for all periods and selected afterwards."""
    var = spec.sigma_x**2
    if spec.regime is None:
        shock_d, err_d = (spec.shock_dist,), (spec.error_dist,)
    else:
        shock_d, err_d = spec.regime.shock_dist, spec.regime.error_dist
    if var > 0:
        eps = np.stack([sample_shock(d, var, rng, total) for d in shock_d])
    else:
        eps = np.zeros((len(shock_d), total))
    eps = eps[regimes if spec.regime is not None else 0, np.arange(total)]
    if not with_errors:
        return eps, np.zeros((total, spec.k))
    chol = spec.chol()
    errs = np.stack([sample_errors(d, chol, rng, total) for d in err_d])
    errs = errs[regimes if spec.regime is not None else 0, np.arange(total)]
    return eps, errs


def state_mean(spec: DGPSpec, x_lags, eps_prev, s):
    """E[x_t | past] given lags ``x_lags[..., l-1] = x_{t-l}`` (arrays ok)."""
    if spec.regime is None:
        sc = 1.0
    elif np.isscalar(s):
        sc = spec.regime_scale(s)
    else:
        sc = np.where(np.asarray(s) == 0, *spec.regime.scale)
    a1 = spec.alpha[0] * sc
    first = x_lags[..., 0]
    if spec.phi is not None:
        first = _spow(first, spec.phi * sc, spec.c_x)
    m = spec.mu_x + a1 * first
    for l in range(1, len(spec.alpha)):
        m = m + spec.alpha[l] * x_lags[..., l]
    return m + spec.ma_coeff * eps_prev


def measurement_mean(spec: DGPSpec, x, y_lags, s):
    """Noise-free y_t given x_t (...,) and raw lags ``y_lags[..., l-1, :]``."""
    x = np.asarray(x, dtype=float)
    if spec.regime is None:
        sc = 1.0
    elif np.isscalar(s):
        sc = spec.regime_scale(s)
    else:
        sc = np.where(np.asarray(s) == 0, *spec.regime.scale)[..., None]
    beta = np.asarray(spec.beta) * sc
    xe = x[..., None]
    if spec.gamma_exp is not None:
        g = np.asarray(spec.gamma_exp) * sc
        h = spec.c_y * np.sign(xe) * ((np.abs(xe / spec.c_y) + SPOW_EPS) ** g - SPOW_EPS**g)
    else:
        h = xe
    m = np.asarray(spec.mu_y) + beta * h
    for l, coef in enumerate(spec.y_lag_coeffs):
        m = m + coef * y_lags[..., l, :]
    return m


def _run(spec, eps, errs, regimes, total):
    L = spec.n_lags
    x = np.zeros(total + L)
    y = np.zeros((total + L, spec.k))
    x[:L] = spec.x0
    y[:L] = np.asarray(spec.mu_y)
    eps_full = np.concatenate([np.zeros(1), eps])
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(total):
            i = t + L
            m = state_mean(spec, x[i - L:i][::-1], eps_full[t], int(regimes[t]))
            x[i] = m + eps[t]
            y[i] = measurement_mean(spec, x[i], y[i - L:i][::-1], int(regimes[t])) + errs[t]
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        bad = int(np.argmax(~np.isfinite(x[L:]) | ~np.isfinite(y[L:]).all(axis=1)))
        raise SimulationDiverged(f"process {spec.process_id} diverged near step {bad}")
    return x[L:], y[L:]


def noise_free_measurements(spec: DGPSpec, n: int, seed) -> np.ndarray:
    """Measurements simulated with zero measurement error (signal only)."""
    rng = np.random.default_rng(seed)
    total = spec.burn_in + n
    regimes = _regime_path(spec, rng, total)
    eps, _ = _draw_innovations(spec, rng, total, regimes, with_errors=False)
    _, y = _run(spec, eps, np.zeros((total, spec.k)), regimes, total)
    return y[spec.burn_in:]


def standardize(y: np.ndarray):
    """Column-wise (y - mean) / population sd; zero-variance columns are only centered."""
    mean = y.mean(axis=0)
    centered = y - mean
    sd = np.sqrt((centered**2).mean(axis=0))
    sd = np.where(sd > 0, sd, 1.0)
    z = centered / sd
    # second pass removes residual rounding in the mean
    z = z - z.mean(axis=0)
    return z, mean, sd


def simulate(spec: DGPSpec, seed: int, splits: Optional[Splits] = None) -> SimulatedDataset:
    """Simulate ``burn_in + n`` steps and keep the last ``n``, standardized."""
    if not spec.sds:
        raise ConfigError("spec has no measurement error sds; use default_spec()")
    rng = np.random.default_rng(seed)
    total = spec.burn_in + spec.n
    regimes = _regime_path(spec, rng, total)
    eps, errs = _draw_innovations(spec, rng, total, regimes)
    x, y = _run(spec, eps, errs, regimes, total)
    b = spec.burn_in
    y_pre = y[max(b - 3, 0):b].copy()
    z, mean, sd = standardize(y[b:])
    if splits is None:
        splits = split(spec.n) if spec.n >= 1800 else None
    return SimulatedDataset(
        y=z, x_true=x[b:].copy(), seed=seed, split=splits, y_mean=mean, y_sd=sd,
        y_pre=y_pre, regime=regimes[b:].astype(int) if spec.regime is not None else None,
        process_id=spec.process_id,
    )


def write_dataset_csv(ds: SimulatedDataset, path) -> None:
    k = ds.k
    header = ["t"] + [f"y{i + 1}" for i in range(k)] + ["x_true"]
    if ds.regime is not None:
        header.append("regime")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(ds.n):
            row = [t] + [repr(float(v)) for v in ds.y[t]] + [repr(float(ds.x_true[t]))]
            if ds.regime is not None:
                row.append(int(ds.regime[t]))
            w.writerow(row)


def read_dataset_csv(path):
    """Returns ``(y, x_true, regime_or_None)`` from a dataset CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ycols = [i for i, h in enumerate(header) if re.fullmatch(r"y\d+", h)]
    arr = np.array(body, dtype=float)
    y = arr[:, ycols]
    x = arr[:, header.index("x_true")]
    reg = arr[:, header.index("regime")].astype(int) if "regime" in header else None
    return y, x, reg
