"""Command-line entry point.

Every command reads one flat ``key = value`` config (with ``include``
presets), writes CSV tables and JSON reports under ``--out`` and records a
manifest with the config hash.  Failures exit nonzero with a JSON error
object on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import shutil
import sys
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, dataio, dgp, evaluate, interpret, net, train
from . import linear_ssm as ls
from . import particle_oracle as po
from .errors import ConfigError, DataError, FactorFormerError

# --------------------------------------------------------------------------
# configuration


def _bool(v: str) -> bool:
    t = v.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _ints(v: str):
    return [int(x) for x in v.replace(",", " ").split()]


def _floats(v: str):
    return [float(x) for x in v.replace(",", " ").split()]


SCHEMA = {
    # experiment
    "mode": (str, "simulate"),
    "process": (int, 1),
    "seeds": (_ints, [0]),
    "n": (int, 1800),
    "train_total": (int, 800),
    "test": (int, 1000),
    "val_frac": (float, 0.2),
    # training
    "runs": (int, 10),
    "lam": (_floats, [0.6]),
    "lr": (float, 1e-4),
    "T0": (int, 100),
    "warmup": (int, 10),
    "max_epochs": (int, 1000),
    "patience": (int, 100),
    "batch": (int, 32),
    "dropout": (float, 0.15),
    "weight_decay": (float, 0.015),
    # network
    "P": (int, 9),
    "d_m": (int, 32),
    "n_head": (int, 4),
    "d_k": (int, 8),
    "d_ff": (int, 64),
    "H": (int, 1),
    "enc_scale": (float, 0.5),
    "sinusoidal": (_bool, False),
    # baselines
    "oracle": (_bool, True),
    "n_particles": (int, 10000),
    "oracle_seed": (int, 0),
    "shared_sigma_y": (_bool, False),
    # empirical data
    "data_dir": (str, ""),
    "split_file": (str, ""),
    "recessions_file": (str, ""),
    # interpretation
    "projection_steps": (int, 6),
    "tentacle_every": (int, 10),
    "tentacle_steps": (int, 20),
    "smooth_alpha": (float, 0.1),
}


@dataclass
class ExperimentConfig:
    values: dict
    text: str          # canonical rendering, hashed into the manifest

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def hyper(self, k: int) -> net.Hyperparams:
        return net.Hyperparams(P=self.P, k=k, d_m=self.d_m, n_head=self.n_head, d_k=self.d_k,
                               d_ff=self.d_ff, H=self.H, dropout=self.dropout,
                               enc_scale=self.enc_scale, sinusoidal=self.sinusoidal)

    def train_config(self, lam: float, seed: int) -> train.TrainConfig:
        return train.TrainConfig(batch=self.batch, lr=self.lr, T0=self.T0, warmup=self.warmup,
                                 max_epochs=self.max_epochs, weight_decay=self.weight_decay,
                                 dropout=self.dropout, lam=lam, runs=self.runs,
                                 patience=self.patience, seed=seed)


def preset_path(name: str) -> Path:
    return Path(str(resources.files("factorformer") / "presets" / f"{name}.cfg"))


def _read_layers(source, base: Path, seen: tuple):
    """Ordered (key, raw value) pairs with includes expanded in place."""
    if isinstance(source, Path):
        if source in seen:
            raise ConfigError(f"include cycle through {source}")
        if not source.exists():
            raise ConfigError(f"config file not found: {source}")
        text, base, seen = source.read_text(encoding="utf-8"), source.parent, seen + (source,)
    else:
        text = source
    out = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"line {ln}: expected key = value, got {line!r}")
        if key == "include":
            for name in val.replace(",", " ").split():
                cand = base / name
                path = cand if cand.suffix == ".cfg" and cand.exists() else preset_path(name)
                if not path.exists():
                    raise ConfigError(f"unknown preset or include {name!r}")
                out.extend(_read_layers(path, base, seen))
        else:
            out.append((key, val))
    return out


def load_config(path=None, presets=(), overrides=None) -> ExperimentConfig:
    """Defaults, then each preset, then the config file, then overrides."""
    pairs = []
    for p in presets:
        pairs.extend(_read_layers(f"include = {p}", Path("."), ()))
    if path is not None:
        pairs.extend(_read_layers(Path(path).resolve(), Path("."), ()))
    for k, v in (overrides or {}).items():
        pairs.append((k, v))
    values = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in SCHEMA.items()}
    for key, raw in pairs:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = SCHEMA[key][0](raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    _validate(values)
    text = "\n".join(f"{k} = {_render(values[k])}" for k in sorted(values)) + "\n"
    return ExperimentConfig(values, text)


def _render(v):
    if isinstance(v, list):
        return ", ".join(repr(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _validate(v):
    if v["mode"] not in ("simulate", "empirical"):
        raise ConfigError(f"mode must be simulate or empirical, got {v['mode']!r}")
    if v["mode"] == "simulate" and v["process"] not in range(1, 7):
        raise ConfigError("process must lie in 1..6")
    if not v["seeds"]:
        raise ConfigError("seeds must not be empty")
    if not v["lam"]:
        raise ConfigError("lam must list at least one value")
    if len(set(v["lam"])) != len(v["lam"]):
        raise ConfigError("lam values must be distinct")
    # constructing these runs their own checks
    net.Hyperparams(P=v["P"], k=1, d_m=v["d_m"], n_head=v["n_head"], d_k=v["d_k"],
                    d_ff=v["d_ff"], H=v["H"], dropout=v["dropout"], enc_scale=v["enc_scale"])
    for lam in v["lam"]:
        train.TrainConfig(batch=v["batch"], lr=v["lr"], T0=v["T0"], warmup=v["warmup"],
                          max_epochs=v["max_epochs"], weight_decay=v["weight_decay"],
                          dropout=v["dropout"], lam=lam, runs=v["runs"], patience=v["patience"])
    for key in ("n_particles", "projection_steps", "tentacle_every", "tentacle_steps"):
        if v[key] < 1:
            raise ConfigError(f"{key} must be positive")


# --------------------------------------------------------------------------
# file helpers


def _atomic(path: Path, write):
    """Run ``write(tmp_path)`` and move the result into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def _write_json(path: Path, obj):
    def w(p):
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    _atomic(path, w)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.datetime64):
        return str(o)
    raise TypeError(type(o).__name__)


def _read_csv_columns(path: Path) -> dict:
    import csv
    if not path.exists():
        raise DataError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    return {h: np.array([float(r[i]) if r[i] not in ("", "nan") else np.nan for r in body])
            for i, h in enumerate(head)}


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra=None):
    import scipy
    man = {
        "command": command,
        "config_sha256": cfg.digest,
        "config": cfg.values,
        "seeds": cfg.seeds,
        "versions": {"factorformer": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
    }
    man.update(extra or {})
    _write_json(out / "manifest.json", man)
    _atomic(out / "config.cfg", lambda p: p.write_text(cfg.text, encoding="utf-8"))


def _lam_tag(lam: float) -> str:
    return f"lam_{lam:g}"


def _require_simulate(cfg):
    if cfg.mode != "simulate":
        raise ConfigError("this command needs mode = simulate")


# --------------------------------------------------------------------------
# simulated experiments


def _spec(cfg) -> dgp.DGPSpec:
    return replace(dgp.default_spec(cfg.process), n=cfg.n)


def _splits(cfg) -> dgp.Splits:
    return dgp.split(cfg.n, cfg.train_total, cfg.test, cfg.val_frac)


def cmd_simulate(cfg, out: Path, jobs: int = 1):
    _require_simulate(cfg)
    spec, splits = _spec(cfg), _splits(cfg)
    for seed in cfg.seeds:
        ds = dgp.simulate(spec, seed, splits)
        d = out / f"seed_{seed}"
        _atomic(d / "dataset.csv", lambda p: dgp.write_dataset_csv(ds, p))
        _write_json(d / "dataset_meta.json", {
            "process": cfg.process, "seed": seed, "y_mean": ds.y_mean, "y_sd": ds.y_sd,
            "y_pre": ds.y_pre, "split": asdict(splits)})
    write_manifest(out, cfg, "simulate")


def load_dataset(out: Path, seed: int) -> dgp.SimulatedDataset:
    d = out / f"seed_{seed}"
    if not (d / "dataset.csv").exists() or not (d / "dataset_meta.json").exists():
        raise DataError(f"no dataset for seed {seed} under {out}; run simulate first")
    y, x, reg = dgp.read_dataset_csv(d / "dataset.csv")
    meta = json.loads((d / "dataset_meta.json").read_text())
    sp = dgp.Splits(**{k: tuple(v) for k, v in meta["split"].items()})
    return dgp.SimulatedDataset(y=y, x_true=x, seed=seed, split=sp,
                                y_mean=np.array(meta["y_mean"]), y_sd=np.array(meta["y_sd"]),
                                y_pre=np.array(meta["y_pre"]).reshape(-1, y.shape[1]),
                                regime=reg, process_id=meta["process"])


def kalman_baseline(y, fit_span, shared_sigma_y=False):
    """MLE on the in-sample rows, then filter the whole series."""
    opts = ls.MLEOptions(shared_sigma_y=shared_sigma_y)
    res = ls.estimate_mle(y[fit_span[0]:fit_span[1]], opts=opts)
    return ls.kalman_filter(res.params, y).filtered_mean, res


def cmd_baselines(cfg, out: Path, jobs: int = 1):
    _require_simulate(cfg)
    spec = _spec(cfg)
    for seed in cfg.seeds:
        ds = load_dataset(out, seed)
        d = out / f"seed_{seed}"
        xk, res = kalman_baseline(ds.y, ds.split.in_sample, cfg.shared_sigma_y)
        _atomic(d / "kalman_params.txt", lambda p: p.write_text(res.params.to_text()))
        try:
            xkm = ls.kalman_filter(ls.kalman_max(spec), ds.y_raw).filtered_mean
        except ConfigError:
            xkm = np.full(ds.n, np.nan)
        xo = (po.oracle_for_dataset(ds, spec, n_particles=cfg.n_particles, seed=cfg.oracle_seed)
              if cfg.oracle else np.full(ds.n, np.nan))
        cols = {"x_kalman": xk, "x_kalman_max": xkm, "x_oracle": xo,
                "x_mean": evaluate.mean_of_data(ds.y)}
        _atomic(d / "baselines.csv", lambda p: train.write_factor_csv(p, range(ds.n), cols))
    write_manifest(out, cfg, "baselines")


def _run_dir(d: Path, i: int) -> Path:
    return d / "runs" / f"run_{i}"


def train_resumable(data, hp, tcfg, d: Path, jobs: int, monitor=None) -> train.Ensemble:
    """Train the runs that have no saved checkpoint; reload the others."""
    seeds = [train.run_seed_for(tcfg.seed, i) for i in range(tcfg.runs)]
    todo = [i for i in range(tcfg.runs)
            if not (_run_dir(d, i) / "checkpoint.npz").exists()]
    fresh = dict(zip(todo, train.train_runs(data, hp, tcfg, [seeds[i] for i in todo], jobs,
                                              monitor)))
    results = []
    for i in range(tcfg.runs):
        rd = _run_dir(d, i)
        if i in fresh:
            params, hist = fresh[i]
            _atomic(rd / "history.csv", hist.to_csv)
            _write_json(rd / "run.json", {"run_seed": seeds[i], "best_epoch": hist.best_epoch,
                                          "stop_reason": hist.stop_reason})
            _atomic(rd / "checkpoint.npz",
                    lambda p: params.save(p, replace(hp, dropout=tcfg.dropout)))
        else:
            params, _ = net.TransformerParams.load(rd / "checkpoint.npz")
            info = json.loads((rd / "run.json").read_text())
            hist = train.TrainHistory.from_csv(rd / "history.csv", info["stop_reason"])
        results.append((params, hist))
    return train.assemble_ensemble(data, hp, tcfg, results, seeds)


def _write_ensemble(d: Path, ens: train.Ensemble, t, extra_cols=None):
    cols = {"x_transformer": ens.mean}
    cols.update({f"run_{i}": s for i, s in enumerate(ens.series)})
    cols.update(extra_cols or {})
    _atomic(d / "factor_mean.csv", lambda p: train.write_factor_csv(p, t, cols))
    for i, s in enumerate(ens.series):
        _atomic(_run_dir(d, i) / "factor.csv",
                lambda p, s=s: train.write_factor_csv(p, t, {"x_hat": s}))
    _write_json(d / "ensemble.json", {
        "run_seeds": [str(s) for s in ens.run_seeds], "flipped": ens.flipped,
        "best_epoch": [h.best_epoch for h in ens.histories],
        "best_val": [h.best_val for h in ens.histories], "best_run": ens.best_run,
        "fit_max": _fit_max(ens)})


def _fit_max(ens: train.Ensemble):
    """Mean over runs of the best test Fit across epochs (stopping on test
    accuracy); None without a monitored history."""
    traces = [h.test_fit for h in ens.histories]
    if any(not t for t in traces):
        return None
    return float(np.mean([max(t) for t in traces]))


def cmd_train(cfg, out: Path, jobs: int = 1):
    _require_simulate(cfg)
    for seed in cfg.seeds:
        ds = load_dataset(out, seed)
        sp = ds.split
        base = out / f"seed_{seed}"
        # the prior also sets the sign of lambda = 0 runs, so load it whenever present
        prior = None
        if any(lam > 0 for lam in cfg.lam) or (base / "baselines.csv").exists():
            prior = _read_csv_columns(base / "baselines.csv")["x_kalman"]
        hp = cfg.hyper(ds.k)
        monitor = None
        if prior is not None:
            sc = evaluate.fit_scaling(prior, ds.x_true, sp.in_sample)
            a, b = sp.test
            mse_k = float(np.mean((sc.apply(prior[a:b]) - ds.x_true[a:b]) ** 2))
            monitor = train.FitMonitor(ds.y, ds.x_true, sp.in_sample, sp.test, mse_k, hp)
        for lam in cfg.lam:
            data = train.TrainData(ds.y, [sp.train], [sp.val], prior)
            ens = train_resumable(data, hp, cfg.train_config(lam, seed), base / _lam_tag(lam),
                                  jobs, monitor)
            _write_ensemble(base / _lam_tag(lam), ens, range(ds.n))
    write_manifest(out, cfg, "train", {"jobs": jobs})


def seed_metrics(out: Path, seed: int, lam: float) -> evaluate.MetricsReport:
    ds = load_dataset(out, seed)
    base = out / f"seed_{seed}"
    bl = _read_csv_columns(base / "baselines.csv")
    fac = _read_csv_columns(base / _lam_tag(lam) / "factor_mean.csv")
    ens = json.loads((base / _lam_tag(lam) / "ensemble.json").read_text())
    est = {"transformer": fac["x_transformer"], "kalman": bl["x_kalman"], "mean_y": bl["x_mean"]}
    for name in ("kalman_max", "oracle"):
        if np.isfinite(bl[f"x_{name}"]).all():
            est[name] = bl[f"x_{name}"]
    return evaluate.metrics(est, ds.x_true, ds.split.in_sample, ds.split.test,
                            val_loss=float(np.mean(ens["best_val"])),
                            fit_max=ens.get("fit_max"))


ROW_KEYS = ("fit", "fit_max", "gain", "r2_transformer", "r2_kalman", "r2_kalman_max",
            "r2_oracle", "r2_mean_y", "val_loss")


def cmd_evaluate(cfg, out: Path, jobs: int = 1):
    _require_simulate(cfg)
    summary, rows = {}, []
    for lam in cfg.lam:
        per_seed, kept = {}, []
        for seed in cfg.seeds:
            rep = seed_metrics(out, seed, lam)
            rep.write(out / f"seed_{seed}" / _lam_tag(lam) / "metrics.json")
            per_seed[str(seed)] = rep.to_json()
            if not rep.discarded:
                kept.append(rep.to_json())
        row = {"process": cfg.process, "lam": lam, "n_seeds": len(kept),
               "n_discarded": len(cfg.seeds) - len(kept)}
        for key in ROW_KEYS:
            row[key] = evaluate.format_m_sd([r.get(key) for r in kept])
        rows.append(row)
        summary[_lam_tag(lam)] = {"seeds": per_seed, "row": row}
    _write_json(out / "metrics.json", summary)
    _atomic(out / "results.csv", lambda p: _write_rows(p, rows))
    write_manifest(out, cfg, "evaluate")
    return rows


def _write_rows(path, rows):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_interpretation(d: Path, params, hp, y, start, end, cfg, names=None, t_labels=None):
    """Attention snapshots, contribution series, residual probe and
    recursive projections for periods [start, end)."""
    d.mkdir(parents=True, exist_ok=True)
    t_labels = np.arange(len(y)) if t_labels is None else t_labels
    recs = interpret.attention_records(params, hp, y, start, end)
    _atomic(d / "attn_state_snapshot.csv",
            lambda p: interpret.write_state_snapshot(p, recs[-1].state_matrix))
    _atomic(d / "attn_measure_snapshot.csv",
            lambda p: interpret.write_state_snapshot(p, recs[-1].measurement_matrix))
    var, lag_s, lag_m = interpret.contribution_series(recs)
    t = [t_labels[r.t] for r in recs]
    for fname, mat, prefix in (("attn_vars.csv", var, "var"),
                               ("attn_lags_state.csv", lag_s, "lag"),
                               ("attn_lags_measure.csv", lag_m, "lag")):
        _atomic(d / fname, lambda p, m=mat, pr=prefix: interpret.write_series(p, t, m, pr))
        sm = interpret.smooth(mat, cfg.smooth_alpha, two_way=True)
        _atomic(d / fname.replace(".csv", "_smooth.csv"),
                lambda p, m=sm, pr=prefix: interpret.write_series(p, t, m, pr))
    idx = np.arange(end - hp.P, end)
    trace = net.forward(y[idx][None], params, hp)
    probe = interpret.residual_probe(trace, params["W_factor"])
    _atomic(d / "residual_stream.csv", lambda p: interpret.write_residual_stream(p, probe))
    t0 = np.arange(start, end, cfg.tentacle_every)
    xs, ys = interpret.project(params, hp, y, t0, cfg.tentacle_steps)
    _atomic(d / "tentacles.csv",
            lambda p: interpret.write_tentacles(p, [t_labels[i] for i in t0], xs, ys))
    if names is not None:
        _write_json(d / "variables.json", {"var_" + str(i + 1): n for i, n in enumerate(names)})


def cmd_interpret(cfg, out: Path, jobs: int = 1):
    _require_simulate(cfg)
    for seed in cfg.seeds:
        ds = load_dataset(out, seed)
        for lam in cfg.lam:
            d = out / f"seed_{seed}" / _lam_tag(lam)
            ens = json.loads((d / "ensemble.json").read_text()) \
                if (d / "ensemble.json").exists() else None
            if ens is None:
                raise DataError(f"no trained ensemble under {d}; run train first")
            params, hp = net.TransformerParams.load(_run_dir(d, ens["best_run"]) / "checkpoint.npz")
            hp = replace(hp, dropout=0.0)
            start = max(ds.split.test[0], hp.P - 1)
            write_interpretation(d / "interpret", params, hp, ds.y, start, ds.split.test[1], cfg)
    write_manifest(out, cfg, "interpret")


# --------------------------------------------------------------------------
# empirical application


def load_empirical(cfg):
    if cfg.data_dir:
        dd = Path(cfg.data_dir)
        series = [dataio.load_csv(dd / f"{n}.csv", n) for n in dataio.SERIES]
    else:
        series, _, _ = dataio.load_fixtures()
    split_path = Path(cfg.split_file) if cfg.split_file else dataio.fixture_path("split.csv")
    rec_path = (Path(cfg.recessions_file) if cfg.recessions_file
                else dataio.fixture_path("recessions.csv"))
    return (dataio.transform(series), dataio.SplitSpec.from_csv(split_path),
            dataio.load_recessions(rec_path))


def cmd_coincident(cfg, out: Path, jobs: int = 1):
    if cfg.mode != "empirical":
        raise ConfigError("coincident needs mode = empirical")
    tr, split, bands = load_empirical(cfg)
    masks = dataio.apply_split(tr.dates, split)
    covered = np.nonzero(masks.train | masks.val)[0]
    xk, res = kalman_baseline(tr.y, (int(covered[0]), int(covered[-1]) + 1),
                              cfg.shared_sigma_y)
    d = out / "coincident"
    _atomic(d / "kalman_params.txt", lambda p: p.write_text(res.params.to_text()))
    data = train.TrainData(tr.y, masks.train_segments, masks.val_segments, xk)
    hp = cfg.hyper(tr.y.shape[1])
    lam = cfg.lam[0]
    seed = cfg.seeds[0]
    ens = train_resumable(data, hp, cfg.train_config(lam, seed), d, jobs)
    sc = evaluate.fit_scaling(ens.mean, xk)
    rec = dataio.recession_flags(tr.dates, bands)
    dates = [str(x) for x in tr.dates]
    extra = {"x_kalman": xk, "x_transformer_scaled": sc.apply(ens.mean),
             "recession": rec.astype(float)}
    _write_ensemble(d, ens, dates, extra)
    shutil.copyfile(rec_path_of(cfg), d / "recessions.csv")
    params = ens.params[ens.best_run]
    hp_i = replace(hp, dropout=0.0)
    cfg_i = replace(cfg, values=dict(cfg.values, tentacle_steps=cfg.projection_steps))
    write_interpretation(d / "interpret", params, hp_i, tr.y, hp.P - 1, len(tr.y), cfg_i,
                         names=tr.names, t_labels=np.array(dates))
    ok = np.isfinite(ens.mean)
    report = {"corr_kalman": float(np.corrcoef(ens.mean[ok], xk[ok])[0, 1]),
              "scaling": {"gamma0": sc.gamma0, "gamma1": sc.gamma1},
              "periods": len(tr.y), "first": dates[0], "last": dates[-1],
              "degenerate_series": tr.degenerate, "lam": lam}
    _write_json(d / "metrics.json", report)
    write_manifest(out, cfg, "coincident", {"jobs": jobs})
    return report


def rec_path_of(cfg) -> Path:
    return Path(cfg.recessions_file) if cfg.recessions_file else dataio.fixture_path(
        "recessions.csv")


def cmd_fetch(cfg, out: Path, jobs: int = 1, allow_network: bool = False):
    d = out / "data"
    d.mkdir(parents=True, exist_ok=True)
    for name, fid in dataio.FRED_IDS.items():
        dataio.fetch_remote(dataio.FRED_URL.format(fid), d / f"{name}.csv", allow_network)
    write_manifest(out, cfg, "fetch")


def cmd_run(cfg, out: Path, jobs: int = 1):
    if cfg.mode == "empirical":
        return cmd_coincident(cfg, out, jobs)
    for step in (cmd_simulate, cmd_baselines, cmd_train, cmd_evaluate, cmd_interpret):
        step(cfg, out, jobs)
    write_manifest(out, cfg, "run", {"jobs": jobs})


COMMANDS = {"simulate": cmd_simulate, "baselines": cmd_baselines, "train": cmd_train,
            "evaluate": cmd_evaluate, "interpret": cmd_interpret,
            "coincident": cmd_coincident, "fetch": cmd_fetch, "run": cmd_run}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="factorformer", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--preset", action="append", default=[],
                    help="bundled preset applied before --config (repeatable)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, help="single seed overriding the config's seeds")
    ap.add_argument("--jobs", type=int, default=1, help="parallel training runs")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    ap.add_argument("--allow-network", action="store_true",
                    help="permit downloads (fetch only)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        overrides = {}
        for item in args.set:
            k, sep, v = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[k.strip()] = v.strip()
        if args.seed is not None:
            overrides["seeds"] = str(args.seed)
        cfg = load_config(args.config, args.preset, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "fetch":
            cmd_fetch(cfg, out, args.jobs, args.allow_network)
        else:
            COMMANDS[args.command](cfg, out, args.jobs)
    except (FactorFormerError, OSError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
