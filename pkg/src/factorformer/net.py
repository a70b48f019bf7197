"""Encoder-Encoder transformer for a single dynamic factor.

Every observable value at every lag is one token.  An Initial Encoder
runs self-attention over the data tokens.  State Encoders refine a P-step
factor representation with queries from the factor and keys/values from
the data.  The factor head yields x_hat, which is re-embedded and read by
Measurement Encoders (queries from the data, keys/values from the factor,
no skip around the attention) whose head predicts next-period observables.

Everything is float64 numpy with a hand-written backward pass.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, NumericOverflow

LN_EPS = 1e-5
CHECKPOINT_VERSION = "factorformer-ckpt-1"
_INV_SQRT_2PI = 1.0 / math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class Hyperparams:
    P: int = 9
    k: int = 5
    d_m: int = 32
    n_head: int = 4
    d_k: int = 8
    d_ff: int = 64
    H: int = 1
    dropout: float = 0.15
    enc_scale: float = 0.5
    sinusoidal: bool = False
    factor_init: Union[str, int] = "mean"   # "mean" or an observable column index

    def __post_init__(self):
        for name in ("P", "k", "d_m", "n_head", "d_k", "d_ff", "H"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_ff < self.d_m:
            raise ConfigError("d_ff must be >= d_m")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.enc_scale < 0:
            raise ConfigError("enc_scale must be nonnegative")
        fi = self.factor_init
        if not (fi == "mean" or (isinstance(fi, int) and 0 <= fi < self.k)):
            raise ConfigError(f"factor_init must be 'mean' or a column index, got {fi!r}")

    @property
    def T(self):
        return self.P * self.k


# --------------------------------------------------------------------------
# parameters


def _encoder_shapes(hp: Hyperparams, cross: bool):
    d, h, dk, ff = hp.d_m, hp.n_head, hp.d_k, hp.d_ff
    norms = ["normq", "normkv", "norm2"] if cross else ["norm1", "norm2"]
    shapes = {}
    for n in norms:
        shapes[f"{n}_g"] = (d,)
        shapes[f"{n}_b"] = (d,)
    shapes.update(Wq=(h, d, dk), Wk=(h, d, dk), Wv=(h, d, dk), Wo=(h * dk, d),
                  W1=(d, ff), b1=(ff,), W2=(ff, d), b2=(d,))
    return shapes


def param_shapes(hp: Hyperparams) -> dict:
    shapes = {"W_embed": (1, hp.d_m), "pe": (hp.P, hp.d_m), "ve": (hp.k + 1, hp.d_m)}
    for name, s in _encoder_shapes(hp, cross=False).items():
        shapes[f"init.{name}"] = s
    for j in range(hp.H):
        for name, s in _encoder_shapes(hp, cross=True).items():
            shapes[f"state.{j}.{name}"] = s
    for j in range(hp.H):
        for name, s in _encoder_shapes(hp, cross=True).items():
            shapes[f"meas.{j}.{name}"] = s
    shapes["W_factor"] = (hp.d_m, 1)
    shapes["W_predict"] = (hp.d_m, 1)
    return shapes


def is_no_decay(name: str) -> bool:
    """Norm scales/shifts, biases and encodings are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("pe", "ve", "b1", "b2") or "_g" in leaf or "_b" in leaf


def sinusoidal_encoding(P: int, d: int) -> np.ndarray:
    pos = np.arange(P)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TransformerParams(dict):
    """Name -> float64 array.  A plain dict with a few helpers."""

    def copy(self) -> "TransformerParams":
        return TransformerParams({k: v.copy() for k, v in self.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def zeros_like(self) -> "TransformerParams":
        return TransformerParams({k: np.zeros_like(v) for k, v in self.items()})

    def save(self, path, hp: Hyperparams) -> None:
        manifest = {"version": CHECKPOINT_VERSION, "hyper": asdict(hp),
                    "shapes": {k: list(v.shape) for k, v in self.items()}}
        payload = {k: np.ascontiguousarray(v) for k, v in self.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __manifest__=np.array(json.dumps(manifest, sort_keys=True)), **payload)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(str(z["__manifest__"]))
            if manifest.get("version") != CHECKPOINT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {manifest.get('version')!r}")
            params = cls({k: z[k].astype(float) for k in manifest["shapes"]})
        for k, s in manifest["shapes"].items():
            if list(params[k].shape) != s:
                raise ConfigError(f"checkpoint shape mismatch for {k}")
        return params, Hyperparams(**manifest["hyper"])


def init_params(hp: Hyperparams, seed) -> TransformerParams:
    """Glorot-uniform weights; norm scales one; biases and shifts zero."""
    rng = np.random.default_rng(seed)
    out = TransformerParams()
    for name, shape in param_shapes(hp).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            out[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            out[name] = np.zeros(shape)
        elif name == "pe" and hp.sinusoidal:
            out[name] = sinusoidal_encoding(hp.P, hp.d_m)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            out[name] = rng.uniform(-bound, bound, shape)
    return out


# --------------------------------------------------------------------------
# layers (forward returns output and cache; backward returns input grads)


def layer_norm(x, g, b):
    xh = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xh, xh)[..., None] / x.shape[-1] + LN_EPS)
    xh *= inv
    return xh * g + b, (xh, inv, g)


def layer_norm_back(dout, cache):
    xh, inv, g = cache
    red = tuple(range(dout.ndim - 1))
    dg = (dout * xh).sum(axis=red)
    db = dout.sum(axis=red)
    dxh = dout * g
    n = dout.shape[-1]
    proj = np.einsum("...i,...i->...", dxh, xh)[..., None] / n
    dxh -= dxh.mean(axis=-1, keepdims=True)
    dxh -= xh * proj
    dxh *= inv
    return dxh, dg, db


def softmax(s):
    z = s - s.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def gelu(x):
    return x * ndtr(x)


def gelu_grad(x, cdf=None):
    cdf = ndtr(x) if cdf is None else cdf
    pdf = x * x
    pdf *= -0.5
    np.exp(pdf, out=pdf)
    pdf *= x
    pdf *= _INV_SQRT_2PI
    pdf += cdf
    return pdf


def _heads(x2d, W, B, T):
    """(B*T, d) @ (h, d, dk) as one matmul -> (B, h, T, dk)."""
    h, d, dk = W.shape
    return (x2d @ W.transpose(1, 0, 2).reshape(d, h * dk)).reshape(B, T, h, dk).swapaxes(1, 2)


def _unheads(g, B, T):
    """(B, h, T, dk) -> (B*T, h*dk)."""
    h, dk = g.shape[1], g.shape[3]
    return g.swapaxes(1, 2).reshape(B * T, h * dk)


def _fold(W2d, h, dk):
    """(d, h*dk) -> (h, d, dk)."""
    return W2d.reshape(W2d.shape[0], h, dk).transpose(1, 0, 2)


def attention(xq, xkv, Wq, Wk, Wv, Wo):
    """Multi-head scaled dot-product attention.  Shapes: xq (B,Tq,d),
    xkv (B,Tk,d), W* (h,d,dk), Wo (h*dk,d).  Returns (scores, out, cache)."""
    h, d, dk = Wq.shape
    B, Tq, _ = xq.shape
    Tk = xkv.shape[1]
    xq2, xkv2 = xq.reshape(B * Tq, d), xkv.reshape(B * Tk, d)
    q = _heads(xq2, Wq, B, Tq)
    kk = _heads(xkv2, Wk, B, Tk)
    v = _heads(xkv2, Wv, B, Tk)
    logits = q @ kk.swapaxes(-1, -2)
    logits *= 1.0 / math.sqrt(dk)
    scores = softmax(logits)
    oc = _unheads(scores @ v, B, Tq)
    out = (oc @ Wo).reshape(B, Tq, Wo.shape[1])
    return scores, out, (xq2, xkv2, q, kk, v, scores, oc, B, Tq, Tk)


def attention_back(dout, cache, Wq, Wk, Wv, Wo):
    xq2, xkv2, q, kk, v, a, oc, B, Tq, Tk = cache
    h, d, dk = Wq.shape
    dout2 = dout.reshape(B * Tq, -1)
    dWo = oc.T @ dout2
    do = (dout2 @ Wo.T).reshape(B, Tq, h, dk).swapaxes(1, 2)
    da = do @ v.swapaxes(-1, -2)
    dv = a.swapaxes(-1, -2) @ do
    da -= np.einsum("...i,...i->...", da, a)[..., None]
    da *= a
    da *= 1.0 / math.sqrt(dk)
    ds = da
    dq = _unheads(ds @ kk, B, Tq)
    dk_ = _unheads(ds.swapaxes(-1, -2) @ q, B, Tk)
    dv = _unheads(dv, B, Tk)
    dWq = _fold(xq2.T @ dq, h, dk)
    dWk = _fold(xkv2.T @ dk_, h, dk)
    dWv = _fold(xkv2.T @ dv, h, dk)
    flat = lambda W: W.transpose(1, 0, 2).reshape(d, h * dk)
    dxq = (dq @ flat(Wq).T).reshape(B, Tq, d)
    dxkv = (dk_ @ flat(Wk).T + dv @ flat(Wv).T).reshape(B, Tk, d)
    return dxq, dxkv, dWq, dWk, dWv, dWo


def ffn(x, W1, b1, W2, b2):
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    hpre = x2 @ W1 + b1
    cdf = ndtr(hpre)
    g = hpre * cdf
    return (g @ W2 + b2).reshape(shape[:-1] + (W2.shape[1],)), (x2, hpre, cdf, g, shape)


def ffn_back(dout, cache, W1, W2):
    x2, hpre, cdf, g, shape = cache
    dout2 = dout.reshape(-1, dout.shape[-1])
    dW2 = g.T @ dout2
    db2 = dout2.sum(axis=0)
    dh = dout2 @ W2.T
    dh *= gelu_grad(hpre, cdf)
    dW1 = x2.T @ dh
    db1 = dh.sum(axis=0)
    return (dh @ W1.T).reshape(shape), dW1, db1, dW2, db2


def _dropout_mask(shape, rate, rng):
    if rng is None or rate == 0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _drop(x, mask):
    return x if mask is None else x * mask


# --------------------------------------------------------------------------
# embedding


def data_encodings(params, hp: Hyperparams) -> np.ndarray:
    """gamma * (pe_p + ve_i) for token order (lag-major, variable-minor)."""
    pe = np.repeat(params["pe"], hp.k, axis=0)
    ve = np.tile(params["ve"][: hp.k], (hp.P, 1))
    return hp.enc_scale * (pe + ve)


def factor_encodings(params, hp: Hyperparams) -> np.ndarray:
    return hp.enc_scale * (params["pe"] + params["ve"][hp.k])


def embed_window(window, params, hp: Hyperparams) -> np.ndarray:
    """(..., P, k) window -> (..., P*k, d_m) token representations."""
    w = np.asarray(window, dtype=float)
    v = w.reshape(w.shape[:-2] + (hp.T,))
    return v[..., None] * params["W_embed"][0] + data_encodings(params, hp)


def factor_init_series(window, hp: Hyperparams) -> np.ndarray:
    w = np.asarray(window, dtype=float)
    if hp.factor_init == "mean":
        return w.mean(axis=-1)
    return w[..., hp.factor_init]


def init_factor(window, params, hp: Hyperparams, series=None) -> np.ndarray:
    """(..., P, d_m) initial factor representation."""
    xi = factor_init_series(window, hp) if series is None else np.asarray(series, float)
    return xi[..., None] * params["W_embed"][0] + factor_encodings(params, hp)


# --------------------------------------------------------------------------
# forward


@dataclass
class ForwardTrace:
    X_init: np.ndarray
    X_0: np.ndarray
    X_2: np.ndarray
    X_3: np.ndarray
    X_5: np.ndarray
    D: np.ndarray                     # Initial Encoder output (data tokens)
    F: np.ndarray                     # re-embedded factor
    Y: list                           # per measurement encoder: dict of Y_0, Y_2, Y_3, Y_5
    state_scores: list                # per state encoder: (B, h, P, P*k)
    measurement_scores: list          # per measurement encoder: (B, h, P*k, P)
    init_scores: np.ndarray           # (B, h, P*k, P*k)
    x_hat: np.ndarray                 # (B, P)
    y_hat: np.ndarray                 # (B, P*k) all token predictions
    y_hat_next: np.ndarray            # (B, k)
    cache: Optional[dict] = field(default=None, repr=False)

    @property
    def state_attention_scores(self):
        return self.state_scores[-1]

    @property
    def measurement_attention_scores(self):
        return self.measurement_scores[-1]


def _check(x, layer):
    if not np.isfinite(x).all():
        raise NumericOverflow(layer)


def _self_encoder(p, pre, x, hp, rng):
    z1, c1 = layer_norm(x, p[pre + "norm1_g"], p[pre + "norm1_b"])
    sc, a, ca = attention(z1, z1, p[pre + "Wq"], p[pre + "Wk"], p[pre + "Wv"], p[pre + "Wo"])
    m1 = _dropout_mask(a.shape, hp.dropout, rng)
    z2 = x + _drop(a, m1)
    z3, c3 = layer_norm(z2, p[pre + "norm2_g"], p[pre + "norm2_b"])
    f, cf = ffn(z3, p[pre + "W1"], p[pre + "b1"], p[pre + "W2"], p[pre + "b2"])
    m2 = _dropout_mask(f.shape, hp.dropout, rng)
    z5 = z2 + _drop(f, m2)
    return z5, sc, dict(c1=c1, ca=ca, m1=m1, c3=c3, cf=cf, m2=m2)


def _cross_encoder(p, pre, q_src, kv_src, hp, rng, skip: bool):
    q0, cq = layer_norm(q_src, p[pre + "normq_g"], p[pre + "normq_b"])
    kv0, ckv = layer_norm(kv_src, p[pre + "normkv_g"], p[pre + "normkv_b"])
    sc, a, ca = attention(q0, kv0, p[pre + "Wq"], p[pre + "Wk"], p[pre + "Wv"], p[pre + "Wo"])
    m1 = _dropout_mask(a.shape, hp.dropout, rng)
    s2 = _drop(a, m1) + (q_src if skip else 0.0)
    s3, c3 = layer_norm(s2, p[pre + "norm2_g"], p[pre + "norm2_b"])
    f, cf = ffn(s3, p[pre + "W1"], p[pre + "b1"], p[pre + "W2"], p[pre + "b2"])
    m2 = _dropout_mask(f.shape, hp.dropout, rng)
    s5 = s2 + _drop(f, m2)
    stages = dict(S_0=q0, S_2=s2, S_3=s3, S_5=s5)
    return s5, sc, stages, dict(cq=cq, ckv=ckv, ca=ca, m1=m1, c3=c3, cf=cf, m2=m2)


def forward(window, params, hp: Hyperparams, mode: str = "infer", rng=None,
            init_series=None, keep_cache: bool = False) -> ForwardTrace:
    """Run the network on one (P, k) window or a batch (B, P, k).

    ``mode="train"`` applies inverted dropout drawn from ``rng``;
    ``mode="infer"`` is deterministic.  Trace arrays always carry a
    leading batch axis.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    w = np.asarray(window, dtype=float)
    if w.ndim == 2:
        w = w[None]
    if w.shape[1:] != (hp.P, hp.k):
        raise ConfigError(f"window shape {w.shape[1:]} does not match (P, k)=({hp.P}, {hp.k})")
    if init_series is not None:
        init_series = np.asarray(init_series, dtype=float).reshape(w.shape[0], hp.P)
    drop_rng = rng if mode == "train" else None
    if mode == "train" and rng is None and hp.dropout > 0:
        raise ConfigError("train mode needs an rng for dropout")
    p = params
    E = embed_window(w, p, hp)
    D, init_sc, c_init = _self_encoder(p, "init.", E, hp, drop_rng)
    _check(D, "init")

    X_init = init_factor(w, p, hp, init_series)
    X = X_init
    state_scores, c_state = [], []
    for j in range(hp.H):
        X, sc, st, c = _cross_encoder(p, f"state.{j}.", X, D, hp, drop_rng, skip=True)
        _check(X, f"state.{j}")
        state_scores.append(sc)
        c_state.append(c)
    x_hat = (X @ p["W_factor"])[..., 0]
    _check(x_hat, "factor_head")

    F = init_factor(None, p, hp, x_hat)
    Yq = D
    meas_scores, c_meas, y_stages = [], [], []
    for j in range(hp.H):
        Yq, sc, stg, c = _cross_encoder(p, f"meas.{j}.", Yq, F, hp, drop_rng, skip=False)
        _check(Yq, f"meas.{j}")
        meas_scores.append(sc)
        c_meas.append(c)
        y_stages.append({"Y_0": stg["S_0"], "Y_2": stg["S_2"], "Y_3": stg["S_3"],
                         "Y_5": stg["S_5"]})
    y_hat = (Yq @ p["W_predict"])[..., 0]
    _check(y_hat, "predict_head")

    cache = None
    if keep_cache:
        cache = dict(w=w, E=E, c_init=c_init, X_init=X_init, c_state=c_state, F=F, c_meas=c_meas, init_series=init_series)
    return ForwardTrace(
        X_init=X_init, X_0=st["S_0"], X_2=st["S_2"], X_3=st["S_3"], X_5=st["S_5"],
        D=D, F=F, Y=y_stages, state_scores=state_scores, measurement_scores=meas_scores,
        init_scores=init_sc, x_hat=x_hat, y_hat=y_hat, y_hat_next=y_hat[:, -hp.k:],
        cache=cache,
    )


# --------------------------------------------------------------------------
# loss and backward


def batch_loss(x_hat, y_next, targets, priors, lam):
    """lam * mean|x_hat - prior| + (1 - lam) * mean|y_next - target|, batch mean."""
    pi = np.abs(x_hat - priors).mean(axis=-1)
    pe = np.abs(y_next - targets).mean(axis=-1)
    return float(np.mean(lam * pi + (1 - lam) * pe)), pi, pe


def _self_encoder_back(dz5, p, pre, c, g):
    df = _drop(dz5, c["m2"])
    dz3, dW1, db1, dW2, db2 = ffn_back(df, c["cf"], p[pre + "W1"], p[pre + "W2"])
    dz2_n, dg2, db2n = layer_norm_back(dz3, c["c3"])
    dz2 = dz5 + dz2_n
    da = _drop(dz2, c["m1"])
    dq, dkv, dWq, dWk, dWv, dWo = attention_back(
        da, c["ca"], p[pre + "Wq"], p[pre + "Wk"], p[pre + "Wv"], p[pre + "Wo"])
    dx_n, dg1, db1n = layer_norm_back(dq + dkv, c["c1"])
    for name, val in (("W1", dW1), ("b1", db1), ("W2", dW2), ("b2", db2),
                      ("norm2_g", dg2), ("norm2_b", db2n), ("Wq", dWq), ("Wk", dWk),
                      ("Wv", dWv), ("Wo", dWo), ("norm1_g", dg1), ("norm1_b", db1n)):
        g[pre + name] += val
    return dz2 + dx_n


def _cross_encoder_back(ds5, p, pre, c, g, skip):
    df = _drop(ds5, c["m2"])
    ds3, dW1, db1, dW2, db2 = ffn_back(df, c["cf"], p[pre + "W1"], p[pre + "W2"])
    ds2_n, dg2, db2n = layer_norm_back(ds3, c["c3"])
    ds2 = ds5 + ds2_n
    da = _drop(ds2, c["m1"])
    dq0, dkv0, dWq, dWk, dWv, dWo = attention_back(
        da, c["ca"], p[pre + "Wq"], p[pre + "Wk"], p[pre + "Wv"], p[pre + "Wo"])
    dq_src, dgq, dbq = layer_norm_back(dq0, c["cq"])
    dkv_src, dgkv, dbkv = layer_norm_back(dkv0, c["ckv"])
    if skip:
        dq_src = dq_src + ds2
    for name, val in (("W1", dW1), ("b1", db1), ("W2", dW2), ("b2", db2),
                      ("norm2_g", dg2), ("norm2_b", db2n), ("Wq", dWq), ("Wk", dWk),
                      ("Wv", dWv), ("Wo", dWo), ("normq_g", dgq), ("normq_b", dbq),
                      ("normkv_g", dgkv), ("normkv_b", dbkv)):
        g[pre + name] += val
    return dq_src, dkv_src


def backward(trace: ForwardTrace, params, hp: Hyperparams, dx_hat, dy_hat) -> TransformerParams:
    """Gradients of a scalar objective given its partials w.r.t. x_hat (B,P)
    and y_hat (B,P*k), at the dropout realization stored in ``trace``."""
    c = trace.cache
    if c is None:
        raise ConfigError("trace was produced without keep_cache=True")
    p = params
    g = p.zeros_like() if isinstance(p, TransformerParams) else TransformerParams(
        {k: np.zeros_like(v) for k, v in p.items()})
    B = dx_hat.shape[0]
    Wemb = p["W_embed"][0]

    # prediction head
    Y5 = trace.Y[-1]["Y_5"]
    g["W_predict"][:, 0] += np.einsum("btd,bt->d", Y5, dy_hat)
    dY = dy_hat[..., None] * p["W_predict"][:, 0]

    # measurement stack
    dF = np.zeros_like(trace.F)
    for j in reversed(range(hp.H)):
        dY, dkv = _cross_encoder_back(dY, p, f"meas.{j}.", c["c_meas"][j], g, skip=False)
        dF += dkv
    dD = dY

    # re-embedding of x_hat shares W_embed and the factor encodings
    x_hat = trace.x_hat
    g["W_embed"][0] += np.einsum("bp,bpd->d", x_hat, dF)
    dF_sum = dF.sum(axis=0)
    g["pe"] += hp.enc_scale * dF_sum
    g["ve"][hp.k] += hp.enc_scale * dF_sum.sum(axis=0)
    dxh = dx_hat + dF @ Wemb

    # factor head
    g["W_factor"][:, 0] += np.einsum("bpd,bp->d", trace.X_5, dxh)
    dX = dxh[..., None] * p["W_factor"][:, 0]

    # state stack
    for j in reversed(range(hp.H)):
        dX, dkv = _cross_encoder_back(dX, p, f"state.{j}.", c["c_state"][j], g, skip=True)
        dD = dD + dkv

    # factor initialization
    xi = factor_init_series(c["w"], hp) if c["init_series"] is None else c["init_series"]
    g["W_embed"][0] += np.einsum("bp,bpd->d", xi, dX)
    dX_sum = dX.sum(axis=0)
    g["pe"] += hp.enc_scale * dX_sum
    g["ve"][hp.k] += hp.enc_scale * dX_sum.sum(axis=0)

    # Initial Encoder and data embedding
    dE = _self_encoder_back(dD, p, "init.", c["c_init"], g)
    v = c["w"].reshape(B, hp.T)
    g["W_embed"][0] += np.einsum("bt,btd->d", v, dE)
    dE4 = dE.reshape(B, hp.P, hp.k, hp.d_m)
    g["pe"] += hp.enc_scale * dE4.sum(axis=(0, 2))
    g["ve"][: hp.k] += hp.enc_scale * dE4.sum(axis=(0, 1))
    if hp.sinusoidal:
        g["pe"][:] = 0.0
    return g


def loss_and_grad(windows, targets, priors, params, hp: Hyperparams, lam: float,
                  rng=None, mode: str = "train"):
    """Batch-mean prior-regularized MAE and its exact gradient.

    Returns ``(loss, grads, trace)``.  ``priors`` may be None when lam == 0.
    """
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    w = np.asarray(windows, dtype=float)
    if w.ndim == 2:
        w = w[None]
    B = w.shape[0]
    targets = np.asarray(targets, dtype=float).reshape(B, hp.k)
    if priors is None:
        if lam != 0:
            raise ConfigError("prior series required when lambda > 0")
        priors = np.zeros((B, hp.P))
    priors = np.asarray(priors, dtype=float).reshape(B, hp.P)
    tr = forward(w, params, hp, mode=mode, rng=rng, keep_cache=True)
    loss, _, _ = batch_loss(tr.x_hat, tr.y_hat_next, targets, priors, lam)
    dx = lam / (hp.P * B) * np.sign(tr.x_hat - priors)
    dy = np.zeros_like(tr.y_hat)
    dy[:, -hp.k:] = (1 - lam) / (hp.k * B) * np.sign(tr.y_hat_next - targets)
    grads = backward(tr, params, hp, dx, dy)
    return loss, grads, tr
