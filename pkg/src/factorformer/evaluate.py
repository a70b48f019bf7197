"""Optimal L1 scaling of factor estimates and the accuracy metrics.

The sign and scale of an estimated factor are not identified, so every
estimate is mapped onto the true factor by the affine map minimizing the
mean absolute error on the in-sample span before any test metric is taken.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError

MODELS = ("transformer", "kalman", "kalman_max", "oracle", "mean_y")
FLATLINE_RATIO = 0.1
GAIN_MIN_DENOM = 1e-6


@dataclass(frozen=True)
class ScalingParams:
    gamma0: float
    gamma1: float
    degenerate: bool = False

    def apply(self, x):
        return self.gamma0 + self.gamma1 * np.asarray(x, dtype=float)


def l1_objective(gamma0, gamma1, x, target) -> float:
    return float(np.abs(gamma0 + gamma1 * np.asarray(x) - np.asarray(target)).sum())


def _lad_lp(x, z):
    """Least absolute deviations line as a linear program."""
    n = len(x)
    # variables: g0, g1, e+ (n), e- (n);  g0 + g1 x + e+ - e- = z
    c = np.concatenate([[0.0, 0.0], np.ones(2 * n)])
    A = np.hstack([np.ones((n, 1)), x[:, None], np.eye(n), -np.eye(n)])
    bounds = [(None, None), (None, None)] + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A, b_eq=z, bounds=bounds, method="highs")
    if res.status != 0:
        raise ConfigError(f"L1 scaling failed: {res.message}")
    return res.x[0], res.x[1]


def fit_scaling(x_raw, x_true, span=None) -> ScalingParams:
    """argmin over (g0, g1) of sum |g0 + g1 x_raw - x_true| on ``span``.

    Non-finite estimates inside the span (e.g. before the first full
    window) are skipped.  A constant estimate yields g1 = 0 and the median.
    """
    x = np.asarray(x_raw, dtype=float)
    z = np.asarray(x_true, dtype=float)
    if span is not None:
        x, z = x[span[0]:span[1]], z[span[0]:span[1]]
    ok = np.isfinite(x) & np.isfinite(z)
    x, z = x[ok], z[ok]
    if len(x) < 10:
        raise ConfigError(f"scaling span needs at least 10 finite points, got {len(x)}")
    if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
        return ScalingParams(float(np.median(z)), 0.0, degenerate=True)
    # centre and scale for conditioning; the map back is exact affine algebra
    mx, sx = x.mean(), x.std()
    u = (x - mx) / sx
    g0, g1 = _lad_lp(u, z)
    g0, g1 = _polish(u, z, g0, g1)
    return ScalingParams(float(g0 - g1 * mx / sx), float(g1 / sx))


def _polish(u, z, g0, g1):
    """An L1 line optimum passes through two data points; snap to the
    vertex defined by the two smallest residuals when it is no worse."""
    r = np.abs(g0 + g1 * u - z)
    i, j = np.argsort(r, kind="stable")[:2]
    if u[i] == u[j]:
        return g0, g1
    b = (z[i] - z[j]) / (u[i] - u[j])
    a = z[i] - b * u[i]
    if l1_objective(a, b, u, z) <= l1_objective(g0, g1, u, z):
        return a, b
    return g0, g1


def flatline_check(x_raw, scaling: ScalingParams, x_true, span=None) -> bool:
    """True (discard) when the scaled estimate barely moves relative to the
    truth: sd ratio strictly below 0.1 on the span."""
    x = scaling.apply(x_raw)
    z = np.asarray(x_true, dtype=float)
    if span is not None:
        x, z = x[span[0]:span[1]], z[span[0]:span[1]]
    ok = np.isfinite(x)
    sz = z[ok].std()
    if sz == 0:
        raise ConfigError("true factor has zero variance")
    return bool(x[ok].std() / sz < FLATLINE_RATIO)


@dataclass
class MetricsReport:
    mse: dict
    r2: dict
    fit: Optional[float]
    gain: Optional[float]
    corr: Optional[float]
    fit_max: Optional[float] = None
    val_loss: Optional[float] = None
    discarded: bool = False
    scaling: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {}
        for m, v in self.mse.items():
            out[f"mse_{m}"] = v
        for m, v in self.r2.items():
            out[f"r2_{m}"] = v
        out.update(fit=self.fit, fit_max=self.fit_max, gain=self.gain, corr=self.corr,
                   val_loss=self.val_loss, discarded=self.discarded)
        return out

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def fit_pct(mse_t, mse_k) -> Optional[float]:
    """Relative change in accuracy against the Kalman baseline, in percent;
    None when the baseline is exact."""
    if mse_k == 0:
        return None
    return (mse_k - mse_t) / mse_k * 100.0


def gain_pct(mse_t, mse_k, mse_o, var_x) -> Optional[float]:
    """Share of the Kalman-to-oracle gap closed; None for a tiny gap."""
    denom = mse_k - mse_o
    if abs(denom) < GAIN_MIN_DENOM * var_x:
        return None
    return (mse_k - mse_t) / denom * 100.0


def metrics(estimates: Mapping[str, np.ndarray], x_true, fit_span, test_span,
            val_loss: Optional[float] = None, fit_max: Optional[float] = None,
            flatline_span=None) -> MetricsReport:
    """Scale each raw estimate on ``fit_span``, score it on ``test_span``."""
    z = np.asarray(x_true, dtype=float)
    zt = z[test_span[0]:test_span[1]]
    var = float(zt.var())
    if var == 0:
        raise ConfigError("true factor has zero variance on the test span")
    mse, r2, scal = {}, {}, {}
    scaled_t = None
    for name, x in estimates.items():
        if x is None:
            continue
        sp = fit_scaling(x, z, fit_span)
        xs = sp.apply(x)[test_span[0]:test_span[1]]
        if not np.isfinite(xs).all():
            raise ConfigError(f"estimate {name!r} is not finite on the test span")
        e = float(np.mean((xs - zt) ** 2))
        mse[name], r2[name], scal[name] = e, 1.0 - e / var, (sp.gamma0, sp.gamma1)
        if name == "transformer":
            scaled_t = xs
    fit = gain = corr = None
    discarded = False
    if "transformer" in mse:
        if "kalman" in mse:
            fit = fit_pct(mse["transformer"], mse["kalman"])
            if "oracle" in mse:
                gain = gain_pct(mse["transformer"], mse["kalman"], mse["oracle"], var)
        corr = float(np.corrcoef(scaled_t, zt)[0, 1]) if scaled_t.std() > 0 else 0.0
        sp = ScalingParams(*scal["transformer"])
        discarded = flatline_check(estimates["transformer"], sp, z, flatline_span or fit_span)
    return MetricsReport(mse=mse, r2=r2, fit=fit, gain=gain, corr=corr, fit_max=fit_max,
                         val_loss=val_loss, discarded=discarded, scaling=scal)


@dataclass(frozen=True)
class SlopeResult:
    slope: float
    degenerate: bool = False


def loss_fit_slope(val_loss: Sequence[float], fit: Sequence[float]) -> SlopeResult:
    """OLS slope of test fit on validation loss over training epochs; a
    negative slope means lower loss went with better factor accuracy."""
    a = np.asarray(val_loss, dtype=float)
    b = np.asarray(fit, dtype=float)
    if len(a) != len(b) or len(a) < 3:
        raise ConfigError("need at least 3 paired epochs")
    da = a - a.mean()
    sxx = float(da @ da)
    if sxx <= 1e-300:
        warnings.warn("validation loss has no variance; slope undefined", RuntimeWarning)
        return SlopeResult(math.nan, degenerate=True)
    return SlopeResult(float(da @ (b - b.mean()) / sxx))


def format_m_sd(values) -> str:
    """Seed summary as "mean (sd)" with one decimal, sample sd."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if len(v) == 0:
        return "NA"
    sd = v.std(ddof=1) if len(v) > 1 else 0.0
    return f"{v.mean():.1f} ({sd:.1f})"


def mean_of_data(y) -> np.ndarray:
    """The naive baseline: pointwise average of the observables."""
    return np.asarray(y, dtype=float).mean(axis=1)
