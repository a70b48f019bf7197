"""Attention matrices, contribution series, residual-stream probes and
recursive projections ("tentacles") for a trained network.

Lag labels: ``lag_1`` is the window's most recent period, ``lag_P`` the oldest.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from . import net
from .errors import ConfigError

PROBE_STAGES = ("Embed", "Norm1", "Attn", "Norm2", "FFN")


def _pick(a, b):
    return a if b is None else a[b]


def state_attention_matrix(trace: net.ForwardTrace, b: Optional[int] = 0, per_head=False):
    """Last score row of the final State Encoder reshaped to (P, k).

    Rows follow window order (oldest lag first), columns are variables.
    ``b=None`` keeps the batch axis; ``per_head`` keeps the head axis.
    """
    s = trace.state_scores[-1]                      # (B, h, P, P*k)
    P = s.shape[2]
    k = s.shape[3] // P
    last = s[:, :, -1, :]
    if not per_head:
        last = last.mean(axis=1)
    return _pick(last.reshape(last.shape[:-1] + (P, k)), b)


def measurement_attention_matrix(trace: net.ForwardTrace, b: Optional[int] = 0, per_head=False):
    """Last k rows of the final Measurement Encoder scores, transposed to
    (P, k); column i is what the prediction of variable i attended to."""
    s = trace.measurement_scores[-1]                # (B, h, P*k, P)
    P = s.shape[3]
    k = s.shape[2] // P
    if not per_head:
        s = s.mean(axis=1)
    return _pick(np.swapaxes(s[..., -k:, :], -1, -2), b)


@dataclass
class AttentionRecord:
    t: int
    state_matrix: np.ndarray          # (P, k)
    measurement_matrix: np.ndarray    # (P, k)

    @property
    def variable_contrib(self):
        return self.state_matrix.sum(axis=0)

    @property
    def lag_contrib_state(self):
        return self.state_matrix.sum(axis=1)

    @property
    def lag_contrib_measure(self):
        """Row sums divided by k so the shares sum to one."""
        m = self.measurement_matrix
        return m.sum(axis=1) / m.shape[1]


def attention_records(params, hp: net.Hyperparams, y, start: int, end: int, chunk=256):
    """One record per period t in [start, end) from the window ending at t."""
    y = np.asarray(y, dtype=float)
    if start < hp.P - 1 or end > len(y) or start >= end:
        raise ConfigError(f"periods [{start}, {end}) need P-1={hp.P - 1} earlier lags")
    recs = []
    for a in range(start, end, chunk):
        t = np.arange(a, min(a + chunk, end))
        idx = t[:, None] + np.arange(-hp.P + 1, 1)[None, :]
        tr = net.forward(y[idx], params, hp, mode="infer")
        S = state_attention_matrix(tr, None)
        M = measurement_attention_matrix(tr, None)
        recs.extend(AttentionRecord(int(ti), S[i], M[i]) for i, ti in enumerate(t))
    return recs


def contribution_series(records):
    """Stacks (T x k variable shares, T x P state lag shares, T x P
    measurement lag shares).  Lag columns run lag_1 (newest) .. lag_P."""
    if not records:
        raise ConfigError("no attention records")
    var = np.array([r.variable_contrib for r in records])
    ls = np.array([r.lag_contrib_state[::-1] for r in records])
    lm = np.array([r.lag_contrib_measure[::-1] for r in records])
    return var, ls, lm


def smooth(series, alpha: float = 0.1, two_way: bool = False):
    """Exponential smoother a~_t = alpha a_t + (1 - alpha) a~_{t-1}, a~_0 = a_0,
    along axis 0; ``two_way`` averages forward and backward passes."""
    if not 0 < alpha <= 1:
        raise ConfigError("alpha must lie in (0, 1]")
    a = np.asarray(series, dtype=float)
    if a.shape[0] == 0:
        return a.copy()

    def one(x):
        zi = (1 - alpha) * x[0]
        return lfilter([alpha], [1.0, -(1 - alpha)], x, axis=0, zi=zi[None] if x.ndim > 1
                       else np.atleast_1d(zi))[0]

    fwd = one(a)
    if not two_way:
        return fwd
    return 0.5 * (fwd + one(a[::-1])[::-1])


def residual_probe(trace: net.ForwardTrace, W_factor, b: int = 0) -> dict:
    """Each factor-side stage projected through the factor head.  The last
    stage reproduces x_hat exactly (same operation on the same array)."""
    stages = (trace.X_init, trace.X_0, trace.X_2, trace.X_3, trace.X_5)
    return {name: (X @ W_factor)[..., 0][b] for name, X in zip(PROBE_STAGES, stages)}


def project(params, hp: net.Hyperparams, series, t, n: int):
    """Recursive projections from the information set ending at t.

    Each round appends the predicted next observables to the window and
    reruns the network.  ``t`` may be an int or an array of periods;
    returns (x (.., n), y (.., n, k)).
    """
    y = np.asarray(series, dtype=float)
    ts = np.atleast_1d(np.asarray(t, dtype=int))
    if n < 0:
        raise ConfigError("n must be nonnegative")
    if ts.size and (ts.min() < hp.P - 1 or ts.max() >= len(y)):
        raise ConfigError(f"t must lie in [P-1, N) = [{hp.P - 1}, {len(y)})")
    idx = ts[:, None] + np.arange(-hp.P + 1, 1)[None, :]
    win = y[idx].copy()
    xs = np.zeros((len(ts), n))
    ys = np.zeros((len(ts), n, hp.k))
    for s in range(n):
        tr = net.forward(win, params, hp, mode="infer")
        xs[:, s] = tr.x_hat[:, -1]
        ys[:, s] = tr.y_hat_next
        win = np.concatenate([win[:, 1:], tr.y_hat_next[:, None, :]], axis=1)
    if np.ndim(t) == 0:
        return xs[0], ys[0]
    return xs, ys


# --------------------------------------------------------------------------
# CSV export


def _label(t):
    """Integer periods print as integers; dates and other labels as text."""
    return int(t) if isinstance(t, (int, np.integer)) else str(t)


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh)


def write_state_snapshot(path, matrix) -> None:
    P, k = matrix.shape
    fh, w = _writer(path)
    with fh:
        w.writerow(["lag"] + [f"var_{i + 1}" for i in range(k)])
        for p in range(P):
            w.writerow([f"lag_{P - p}"] + [repr(float(v)) for v in matrix[p]])


def write_series(path, t, matrix, prefix) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["t"] + [f"{prefix}_{i + 1}" for i in range(matrix.shape[1])])
        for ti, row in zip(t, matrix):
            w.writerow([_label(ti)] + [repr(float(v)) for v in row])


def write_residual_stream(path, probe: dict) -> None:
    P = len(probe["FFN"])
    fh, w = _writer(path)
    with fh:
        w.writerow(["lag"] + list(PROBE_STAGES))
        for p in range(P):
            w.writerow([f"lag_{P - p}"] + [repr(float(probe[s][p])) for s in PROBE_STAGES])


def write_tentacles(path, t0, xs, ys=None) -> None:
    fh, w = _writer(path)
    with fh:
        head = ["t0", "step", "x_proj"]
        if ys is not None:
            head += [f"y{i + 1}" for i in range(ys.shape[-1])]
        w.writerow(head)
        for i, t in enumerate(t0):
            for s in range(xs.shape[1]):
                row = [_label(t), s + 1, repr(float(xs[i, s]))]
                if ys is not None:
                    row += [repr(float(v)) for v in ys[i, s]]
                w.writerow(row)
