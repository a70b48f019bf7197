"""Windowing, the prior-regularized loss, AdamW training with early
stopping, and multi-run ensembles."""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import evaluate, net
from .errors import ConfigError, TrainingDiverged


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    lr: float = 1e-4
    T0: int = 100
    warmup: int = 10
    max_epochs: int = 1000
    weight_decay: float = 0.015
    dropout: float = 0.15
    lam: float = 0.6
    runs: int = 10
    patience: int = 100
    loss: str = "mae"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        for name in ("batch", "T0", "max_epochs", "runs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or self.patience < 0:
            raise ConfigError("lr must be positive; weight_decay and patience nonnegative")
        if not 0 <= self.warmup < self.T0:
            raise ConfigError("warmup must lie in [0, T0)")
        if self.loss != "mae":
            raise ConfigError("only the MAE loss is supported")


# --------------------------------------------------------------------------
# windows


@dataclass
class Windows:
    X: np.ndarray        # (n, P, k)
    target: np.ndarray   # (n, k)
    prior: np.ndarray    # (n, P); zeros when no prior is given
    t: np.ndarray        # (n,) index of each window's last period

    def __len__(self):
        return len(self.t)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("X", "target", "prior", "t")))


def make_windows(series, P: int, prior=None, start: int = 0, end: Optional[int] = None
                 ) -> Windows:
    """Rolling windows inside ``[start, end)``: window t covers t-P+1..t and
    its target is row t+1, so both stay inside the range."""
    y = np.asarray(series, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    end = len(y) if end is None else end
    if not 0 <= start <= end <= len(y):
        raise ConfigError(f"range [{start}, {end}) outside series of length {len(y)}")
    if prior is not None:
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (len(y),):
            raise ConfigError(f"prior length {prior.shape} does not match series length {len(y)}")
    n = end - start - P
    if n < 1:
        raise ConfigError(f"range of length {end - start} too short for P={P}")
    t = np.arange(start + P - 1, end - 1)
    idx = t[:, None] + np.arange(-P + 1, 1)[None, :]
    pr = np.zeros((n, P)) if prior is None else prior[idx]
    return Windows(X=y[idx], target=y[t + 1], prior=pr, t=t)


def windows_for_segments(series, P, segments, prior=None) -> Windows:
    return Windows.concat(make_windows(series, P, prior, a, b) for a, b in segments)


# --------------------------------------------------------------------------
# loss and schedule


def loss(trace, target, prior_window, lam: float) -> float:
    """lam * mean|x_hat - prior| + (1 - lam) * mean|y_hat - target| (batch mean)."""
    x = trace.x_hat
    return net.batch_loss(x, trace.y_hat_next, np.reshape(target, trace.y_hat_next.shape),
                          np.reshape(prior_window, x.shape), lam)[0]


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to zero inside each T0-epoch cycle."""
    c = math.fmod(epoch, cfg.T0)
    if c < cfg.warmup:
        return cfg.lr * c / cfg.warmup
    frac = (c - cfg.warmup) / (cfg.T0 - cfg.warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay (decay scaled by the scheduled lr)."""

    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.decay = {k: not net.is_no_decay(k) for k in params}
        self.t = 0

    def step(self, params, grads, lr: float):
        c = self.cfg
        self.t += 1
        b1c = 1 - c.beta1**self.t
        b2c = 1 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if self.decay[k] and c.weight_decay:
                p *= 1 - lr * c.weight_decay
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainData:
    y: np.ndarray                    # N x k standardized
    train_segments: Sequence
    val_segments: Sequence
    prior: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.train_segments or not self.val_segments:
            raise ConfigError("need at least one training and one validation segment")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    test_fit: Optional[list] = None
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best_val(self):
        return self.val_loss[self.best_epoch]

    @classmethod
    def from_csv(cls, path, stop_reason: str = "") -> "TrainHistory":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        h = cls([float(r["train_loss"]) for r in rows], [float(r["val_loss"]) for r in rows],
                [float(r["test_fit"]) for r in rows] if rows and "test_fit" in rows[0] else None,
                stop_reason=stop_reason)
        h.best_epoch = int(np.argmin(h.val_loss)) if rows else -1
        return h

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            head = ["epoch", "train_loss", "val_loss"]
            if self.test_fit is not None:
                head.append("test_fit")
            w.writerow(head)
            for e, (a, b) in enumerate(zip(self.train_loss, self.val_loss)):
                row = [e, repr(a), repr(b)]
                if self.test_fit is not None:
                    row.append(repr(self.test_fit[e]))
                w.writerow(row)


_ALLOC_TUNED = False


def _tune_allocator():
    """Keep freed blocks in the glibc heap; the many short-lived activation
    arrays otherwise cost a page-fault round trip each.  No-op off glibc."""
    global _ALLOC_TUNED
    if _ALLOC_TUNED:
        return
    _ALLOC_TUNED = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(-3, 1 << 30)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)   # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def predict_batches(params, hp, X, chunk=512):
    """Inference-mode (x_hat, y_hat_next) over many windows."""
    xs, ys = [], []
    for i in range(0, len(X), chunk):
        tr = net.forward(X[i:i + chunk], params, hp, mode="infer")
        xs.append(tr.x_hat)
        ys.append(tr.y_hat_next)
    if not xs:
        return np.zeros((0, hp.P)), np.zeros((0, hp.k))
    return np.concatenate(xs), np.concatenate(ys)


def validation_loss(params, hp, win: Windows, lam: float = 0.0) -> float:
    """Prediction-error-only MAE with dropout off.  At lam == 1 the
    prediction head gets no gradient, so the prior distance is used."""
    x, y = predict_batches(params, hp, win.X)
    if lam >= 1:
        return float(np.abs(x - win.prior).mean())
    return float(np.abs(y - win.target).mean())


def train_run(data: TrainData, hp: net.Hyperparams, cfg: TrainConfig, run_seed,
              monitor: Optional[Callable] = None):
    """One training run.  Returns ``(best_params, history)``.

    ``monitor(params) -> float`` is evaluated after every epoch and stored as
    the test-fit trace (simulation only).
    """
    _tune_allocator()
    hp = replace(hp, dropout=cfg.dropout)
    if cfg.lam > 0 and data.prior is None:
        raise ConfigError("prior series required when lam > 0")
    tr_w = windows_for_segments(data.y, hp.P, data.train_segments, data.prior)
    va_w = windows_for_segments(data.y, hp.P, data.val_segments, data.prior)
    rng = np.random.default_rng(run_seed)
    params = net.init_params(hp, rng.integers(2**63))
    opt = AdamW(params, cfg)
    hist = TrainHistory(test_fit=[] if monitor is not None else None)
    best = None
    n = len(tr_w)
    steps = math.ceil(n / cfg.batch)
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(steps):
            idx = order[s * cfg.batch:(s + 1) * cfg.batch]
            lr = lr_at(epoch + s / steps, cfg)
            val, grads, _ = net.loss_and_grad(tr_w.X[idx], tr_w.target[idx], tr_w.prior[idx],
                                              params, hp, cfg.lam, rng=rng)
            if not math.isfinite(val):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {s}")
            opt.step(params, grads, lr)
            total += val * len(idx)
        hist.train_loss.append(total / n)
        v = validation_loss(params, hp, va_w, cfg.lam)
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        hist.val_loss.append(v)
        if monitor is not None:
            hist.test_fit.append(float(monitor(params)))
        if best is None or v < hist.val_loss[hist.best_epoch]:
            hist.best_epoch = epoch
            best = params.copy()
        elif epoch - hist.best_epoch >= cfg.patience:
            hist.stop_reason = "patience"
            break
        if cfg.patience == 0:
            hist.stop_reason = "patience"
            break
    else:
        hist.stop_reason = "max_epochs"
    return best, hist


def factor_series(params, hp: net.Hyperparams, y, start: int = 0, end: Optional[int] = None):
    """Local filtering: the factor at t is the last x_hat of the window
    ending at t.  Periods before the first full window are NaN."""
    y = np.asarray(y, dtype=float)
    end = len(y) if end is None else end
    out = np.full(end - start, np.nan)
    t = np.arange(max(start, hp.P - 1), end)
    if len(t):
        idx = t[:, None] + np.arange(-hp.P + 1, 1)[None, :]
        x, _ = predict_batches(params, hp, y[idx])
        out[t - start] = x[:, -1]
    return out


# --------------------------------------------------------------------------
# ensembles


@dataclass
class Ensemble:
    params: list
    histories: list
    run_seeds: list
    series: np.ndarray       # (r, N) per-run factor over the full series
    flipped: list

    @property
    def mean(self) -> np.ndarray:
        return self.series.mean(axis=0)

    @property
    def best_run(self) -> int:
        return int(np.argmin([h.best_val for h in self.histories]))


def run_seed_for(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])


@dataclass
class FitMonitor:
    """Test-span Fit of a run's current parameters against a fixed Kalman
    MSE, with the L1 scaling refit on the in-sample span each call."""
    y: np.ndarray
    x_true: np.ndarray
    fit_span: tuple
    test_span: tuple
    mse_kalman: float
    hp: net.Hyperparams

    def __call__(self, params) -> float:
        hp = replace(self.hp, dropout=0.0)
        x = factor_series(params, hp, self.y)
        sc = evaluate.fit_scaling(x, self.x_true, self.fit_span)
        a, b = self.test_span
        mse = float(np.mean((sc.apply(x[a:b]) - self.x_true[a:b]) ** 2))
        return evaluate.fit_pct(mse, self.mse_kalman)


def _worker(args):
    from threadpoolctl import threadpool_limits
    data, hp, cfg, seed, monitor = args
    with threadpool_limits(1):
        return train_run(data, hp, cfg, seed, monitor)


def train_runs(data: TrainData, hp: net.Hyperparams, cfg: TrainConfig, seeds, jobs: int = 1,
               monitor: Optional[Callable] = None):
    """``train_run`` for each seed, in a process pool when ``jobs > 1``.
    Results do not depend on ``jobs``: each run owns its generator."""
    tasks = [(data, hp, cfg, s, monitor) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            return list(ex.map(_worker, tasks))
    return [_worker(t) for t in tasks]


def assemble_ensemble(data: TrainData, hp: net.Hyperparams, cfg: TrainConfig, results, seeds,
                      align: bool = True) -> Ensemble:
    """Factor series for each trained run; with ``align`` a run whose
    in-sample factor correlates negatively with the prior is sign-flipped."""
    hp = replace(hp, dropout=cfg.dropout)
    ins = np.zeros(len(data.y), bool)
    for a, b in list(data.train_segments) + list(data.val_segments):
        ins[a:b] = True
    series, flipped = [], []
    for params, _ in results:
        x = factor_series(params, hp, data.y)
        flip = False
        if align and data.prior is not None:
            mask = ins & np.isfinite(x)
            c = np.corrcoef(x[mask], data.prior[mask])[0, 1]
            flip = bool(np.isfinite(c) and c < 0)
        series.append(-x if flip else x)
        flipped.append(flip)
    return Ensemble(params=[p for p, _ in results], histories=[h for _, h in results],
                    run_seeds=list(seeds), series=np.array(series), flipped=flipped)


def train_ensemble(data: TrainData, hp: net.Hyperparams, cfg: TrainConfig,
                   r: Optional[int] = None, jobs: int = 1, align: bool = True) -> Ensemble:
    """``r`` runs that differ only in their seed, averaged into one factor."""
    r = cfg.runs if r is None else r
    if r < 1:
        raise ConfigError("need at least one run")
    seeds = [run_seed_for(cfg.seed, i) for i in range(r)]
    results = train_runs(data, hp, cfg, seeds, jobs)
    return assemble_ensemble(data, hp, cfg, results, seeds, align)


def write_factor_csv(path, t, columns: dict) -> None:
    names = list(columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + names)
        for i, ti in enumerate(t):
            w.writerow([ti] + [repr(float(columns[n][i])) for n in names])
