"""Auxiliary particle filter that knows the true simulating process.

Each period runs seven steps: look-ahead weights from the deterministic
predictor, systematic resampling, propagation with the true transition,
likelihood-ratio correction, adaptive resampling on low ESS, roughening
after any resample, and the weighted-mean output.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import dgp
from .errors import ConfigError, WeightCollapse

INIT_STEPS = 200


def ess(weights) -> float:
    """Effective sample size 1 / sum(w^2) of normalized weights."""
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(np.dot(w, w))


def systematic_resample(weights, u: float) -> np.ndarray:
    """Indices from one stratified sweep at positions (u + i) / Np."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    if not 0 <= u < 1:
        raise ConfigError(f"u must lie in [0, 1), got {u}")
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    pos = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, pos, side="right"), n - 1)


@dataclass
class ParticleCloud:
    x: np.ndarray            # (Np, L) state lags, column 0 is the latest
    y_lags: np.ndarray       # (L, k) raw measurement lags shared by all particles
    eps_prev: np.ndarray     # (Np,) last state shock (MA term)
    regime: np.ndarray       # (Np,) int labels
    weights: np.ndarray      # (Np,)

    @property
    def n(self):
        return self.weights.size


def _shock_draw(spec, s, rng, n):
    var = spec.sigma_x**2
    if var == 0:
        return np.zeros(n)
    if spec.regime is None:
        return dgp.sample_shock(spec.shock_dist, var, rng, n)
    d0, d1 = spec.regime.shock_dist
    a, b = dgp.sample_shock(d0, var, rng, n), dgp.sample_shock(d1, var, rng, n)
    return np.where(s == 0, a, b)


def _switch(spec, s, rng):
    if spec.regime is None:
        return s
    u = rng.random(s.size)
    flip = np.where(s == 0, u < spec.regime.p01, u < spec.regime.p10)
    return np.where(flip, 1 - s, s).astype(s.dtype)


def _transition(spec, cloud: ParticleCloud, rng):
    s = _switch(spec, cloud.regime, rng)
    m = dgp.state_mean(spec, cloud.x, cloud.eps_prev, s)
    e = _shock_draw(spec, s, rng, cloud.n)
    x = np.concatenate([(m + e)[:, None], cloud.x[:, :-1]], axis=1)
    return x, e, s


def _meas_loglik(spec, chol, x, y_t, y_lags, s):
    mean = dgp.measurement_mean(spec, x, np.broadcast_to(y_lags, (1,) + y_lags.shape), s)
    v = y_t - mean
    if spec.regime is None:
        return dgp.errors_logpdf(v, spec.error_dist, chol)
    d0, d1 = spec.regime.error_dist
    return np.where(s == 0, dgp.errors_logpdf(v, d0, chol), dgp.errors_logpdf(v, d1, chol))


def _normalize(logw, t):
    top = np.max(logw)
    if not np.isfinite(top):
        raise WeightCollapse(t)
    return np.exp(logw - logsumexp(logw))


def _roughen(cloud: ParticleCloud, scale, rng):
    if scale <= 0 or cloud.n < 2:
        return
    x0 = cloud.x[:, 0]
    mu = np.dot(cloud.weights, x0)
    sd = math.sqrt(max(np.dot(cloud.weights, (x0 - mu) ** 2), 0.0))
    cloud.x[:, 0] = x0 + scale * sd * rng.standard_normal(cloud.n)


def initial_cloud(spec, n_particles, rng, y_pre=None) -> ParticleCloud:
    """Particles drawn by running the true transition forward from x0."""
    L = spec.n_lags
    cloud = ParticleCloud(
        x=np.full((n_particles, L), float(spec.x0)),
        y_lags=np.zeros((L, spec.k)),
        eps_prev=np.zeros(n_particles),
        regime=np.zeros(n_particles, dtype=np.int64),
        weights=np.full(n_particles, 1.0 / n_particles),
    )
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(INIT_STEPS):
            cloud.x, cloud.eps_prev, cloud.regime = _transition(spec, cloud, rng)
    if y_pre is not None and len(y_pre):
        pre = np.asarray(y_pre, dtype=float)[::-1][:L]
        cloud.y_lags[: len(pre)] = pre
    else:
        cloud.y_lags[:] = np.asarray(spec.mu_y)
    return cloud


def apf_filter(spec, y, n_particles: int = 10_000, ess_threshold: float = 0.5,
               roughening_scale: float = 0.05, seed: int = 0,
               y_pre: Optional[np.ndarray] = None) -> np.ndarray:
    """Filtered factor means for raw-scale observations ``y`` (N x k).

    ``y_pre`` holds raw measurements preceding ``y`` (oldest first); it
    only matters for processes with lagged measurements.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != spec.k:
        raise ConfigError(f"data has {y.shape[1]} columns, spec has k={spec.k}")
    if n_particles < 1:
        raise ConfigError("need at least one particle")
    if not spec.sds:
        raise ConfigError("spec has no measurement error sds")
    rng = np.random.default_rng(seed)
    chol = spec.chol()
    cloud = initial_cloud(spec, n_particles, rng, y_pre)
    out = np.empty(len(y))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(len(y)):
            out[t] = _step(spec, chol, cloud, y[t], t, ess_threshold, roughening_scale, rng)
    return out


def _step(spec, chol, cloud, y_t, t, ess_threshold, rough, rng):
    n = cloud.n
    # 1. look-ahead weights at the deterministic predictor
    pred = dgp.state_mean(spec, cloud.x, cloud.eps_prev, cloud.regime)
    look = _meas_loglik(spec, chol, pred, y_t, cloud.y_lags, cloud.regime)
    look = np.where(np.isfinite(look), look, -np.inf)
    first = _normalize(np.log(cloud.weights) + look, t)
    # 2. resample parents
    idx = systematic_resample(first, rng.random())
    cloud.x, cloud.eps_prev, cloud.regime = cloud.x[idx], cloud.eps_prev[idx], cloud.regime[idx]
    cloud.weights = np.full(n, 1.0 / n)
    _roughen(cloud, rough, rng)
    look = look[idx]
    # 3. propagate with the true transition
    cloud.x, cloud.eps_prev, cloud.regime = _transition(spec, cloud, rng)
    # 4. second-stage correction p(y|x) / p(y|predictor)
    ll = _meas_loglik(spec, chol, cloud.x[:, 0], y_t, cloud.y_lags, cloud.regime)
    logw = np.where(np.isfinite(ll), ll - look, -np.inf)
    cloud.weights = _normalize(logw, t)
    # 7. weighted mean, taken before the optional resample
    est = float(np.dot(cloud.weights, cloud.x[:, 0]))
    # 5-6. adaptive resample, then roughen
    if ess(cloud.weights) / n < ess_threshold:
        idx = systematic_resample(cloud.weights, rng.random())
        cloud.x, cloud.eps_prev, cloud.regime = cloud.x[idx], cloud.eps_prev[idx], cloud.regime[idx]
        cloud.weights = np.full(n, 1.0 / n)
        _roughen(cloud, rough, rng)
    if len(cloud.y_lags):
        cloud.y_lags = np.concatenate([y_t[None], cloud.y_lags[:-1]])
    return est


def oracle_for_dataset(ds: dgp.SimulatedDataset, spec, **kw) -> np.ndarray:
    """Oracle factor for a simulated dataset (unstandardizes ``ds.y`` first)."""
    return apf_filter(spec, ds.y_raw, y_pre=ds.y_pre, **kw)


def write_factor_csv(x, path, name="x_oracle") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", name])
        for t, v in enumerate(x):
            w.writerow([t, repr(float(v))])
