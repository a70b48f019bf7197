"""Monthly macro series: CSV ingestion, log-difference and standardization
transforms, hand-specified train/validation segments, recession bands."""
from __future__ import annotations

import csv
import datetime as dt
import os
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, NetworkError

SERIES = ("production", "sales", "income", "hours")
FRED_IDS = {"production": "INDPRO", "sales": "CMRMTSPL", "income": "W875RX1",
            "hours": "AWHMAN"}
FRED_URL = "https://fred.stlouisfed.org/graph/fredgraph.csv?id={}"


def parse_month(text: str) -> np.datetime64:
    """ISO date or year-month -> month precision."""
    s = text.strip()
    try:
        if len(s) == 7:
            d = dt.datetime.strptime(s, "%Y-%m")
        else:
            d = dt.date.fromisoformat(s)
    except ValueError as e:
        raise DataError(f"cannot parse date {text!r}") from e
    return np.datetime64(f"{d.year:04d}-{d.month:02d}", "M")


@dataclass
class MacroSeries:
    name: str
    dates: np.ndarray      # datetime64[M], strictly increasing
    values: np.ndarray

    def __len__(self):
        return len(self.dates)


def load_csv(path, name: Optional[str] = None) -> MacroSeries:
    """Two columns ``date,value`` with a header row (any header names)."""
    path = Path(path)
    name = name or path.stem
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    dates, vals = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) < 2:
            raise DataError(f"{path}:{ln}: expected two columns")
        d = parse_month(row[0])
        try:
            v = float(row[1])
        except ValueError as e:
            raise DataError(f"{path}:{ln}: cannot parse value {row[1]!r}") from e
        if dates:
            if d == dates[-1]:
                raise DataError(f"{path}: duplicate date {d}")
            if d < dates[-1]:
                raise DataError(f"{path}: dates not increasing at {d}")
        dates.append(d)
        vals.append(v)
    return MacroSeries(name, np.array(dates, dtype="datetime64[M]"), np.array(vals))


def align(series: Sequence[MacroSeries]):
    """Inner join on months; the common index must have no gaps."""
    if not series:
        raise DataError("no series")
    common = series[0].dates
    for s in series[1:]:
        common = np.intersect1d(common, s.dates)
    if len(common) < 2:
        raise DataError("series share fewer than two months")
    steps = np.diff(common).astype(int)
    if (steps != 1).any():
        gap = common[int(np.argmax(steps != 1))]
        raise DataError(f"aligned series have a gap after {gap}")
    cols = [s.values[np.searchsorted(s.dates, common)] for s in series]
    return common, np.column_stack(cols)


@dataclass
class Transformed:
    y: np.ndarray              # N x k standardized log differences
    dates: np.ndarray          # month of each row (the later month of the difference)
    names: list
    mean: np.ndarray
    sd: np.ndarray
    degenerate: list           # names of columns with zero variance


def transform(series: Sequence[MacroSeries]) -> Transformed:
    """Log differences, then column standardization with population sd."""
    dates, levels = align(series)
    for j, s in enumerate(series):
        bad = np.nonzero(~(levels[:, j] > 0))[0]
        if len(bad):
            raise DataError(f"series {s.name!r} has nonpositive level at {dates[bad[0]]}")
    d = np.diff(np.log(levels), axis=0)
    mean = d.mean(axis=0)
    c = d - mean
    sd = np.sqrt((c * c).mean(axis=0))
    degenerate = [s.name for s, v in zip(series, sd) if v == 0]
    if degenerate:
        warnings.warn(f"zero-variance series after differencing: {degenerate}", RuntimeWarning)
    z = c / np.where(sd > 0, sd, 1.0)
    z -= z.mean(axis=0)
    return Transformed(z, dates[1:], [s.name for s in series], mean, sd, degenerate)


# --------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class SplitSpec:
    intervals: tuple           # ((label, start_month, end_month), ...) inclusive

    def __post_init__(self):
        for lab, a, b in self.intervals:
            if lab not in ("train", "val"):
                raise ConfigError(f"interval label must be train or val, got {lab!r}")
            if b < a:
                raise ConfigError(f"interval {a}..{b} ends before it starts")
        iv = sorted(self.intervals, key=lambda r: r[1])
        for (_, _, b1), (_, a2, _) in zip(iv, iv[1:]):
            if a2 <= b1:
                raise ConfigError(f"intervals overlap at {a2}")

    @classmethod
    def from_csv(cls, path) -> "SplitSpec":
        """CSV ``label,start,end`` with inclusive year-month bounds."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple((r["label"].strip(), parse_month(r["start"]), parse_month(r["end"]))
                         for r in rows))

    @classmethod
    def from_validation(cls, dates, val: Sequence) -> "SplitSpec":
        """Validation intervals as given; everything else in ``dates`` trains."""
        val = sorted((parse_month(a), parse_month(b)) for a, b in val)
        out, cur = [], dates[0]
        for a, b in val:
            if a > cur:
                out.append(("train", cur, a - 1))
            out.append(("val", a, b))
            cur = b + 1
        if cur <= dates[-1]:
            out.append(("train", cur, dates[-1]))
        return cls(tuple(out))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "start", "end"])
            for lab, a, b in self.intervals:
                w.writerow([lab, str(a), str(b)])


@dataclass
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    train_segments: list       # [(start, end)) row ranges
    val_segments: list


def apply_split(dates, spec: SplitSpec) -> SplitMasks:
    """Row masks and contiguous row ranges for each labeled interval."""
    dates = np.asarray(dates, dtype="datetime64[M]")
    masks = {"train": np.zeros(len(dates), bool), "val": np.zeros(len(dates), bool)}
    segs = {"train": [], "val": []}
    for lab, a, b in sorted(spec.intervals, key=lambda r: r[1]):
        sel = (dates >= a) & (dates <= b)
        if not sel.any():
            raise ConfigError(f"{lab} interval {a}..{b} lies outside the data")
        idx = np.nonzero(sel)[0]
        masks[lab] |= sel
        segs[lab].append((int(idx[0]), int(idx[-1]) + 1))
    if not segs["train"] or not segs["val"]:
        raise ConfigError("split needs both training and validation intervals")
    return SplitMasks(masks["train"], masks["val"], segs["train"], segs["val"])


# --------------------------------------------------------------------------
# recessions and remote data


def load_recessions(path):
    """CSV ``start,end`` year-months -> list of (start, end) datetime64[M]."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{path}: no recession rows")
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) < 2:
            raise DataError(f"{path}:{ln}: expected start,end")
        a, b = parse_month(row[0]), parse_month(row[1])
        if b < a:
            raise DataError(f"{path}:{ln}: recession ends {b} before it starts {a}")
        out.append((a, b))
    return out


def recession_flags(dates, bands) -> np.ndarray:
    dates = np.asarray(dates, dtype="datetime64[M]")
    flag = np.zeros(len(dates), dtype=int)
    for a, b in bands:
        flag[(dates >= a) & (dates <= b)] = 1
    return flag


def fetch_remote(url: str, dest, allow_network: bool = False, timeout: float = 30.0) -> Path:
    """Download ``url`` to ``dest``.  Refuses unless ``allow_network``."""
    if not allow_network:
        raise NetworkError("network access not enabled (pass --allow-network)")
    dest = Path(dest)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as r:
            body = r.read()
    except urllib.error.HTTPError as e:
        raise NetworkError(f"HTTP {e.code} for {url}") from e
    except (urllib.error.URLError, OSError) as e:
        raise NetworkError(f"cannot reach {url}: {e}") from e
    if not body:
        raise NetworkError(f"empty response from {url}")
    tmp = dest.with_suffix(dest.suffix + ".part")
    tmp.write_bytes(body)
    os.replace(tmp, dest)
    return dest


# --------------------------------------------------------------------------
# bundled fixtures


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("factorformer") / "data" / name))


def load_fixtures():
    """The bundled synthetic stand-ins for the four coincident series."""
    series = [load_csv(fixture_path(f"{n}.csv"), n) for n in SERIES]
    return series, load_recessions(fixture_path("recessions.csv")), \
        SplitSpec.from_csv(fixture_path("split.csv"))


NBER_RECESSIONS = (("1969-12", "1970-11"), ("1973-11", "1975-03"), ("1980-01", "1980-07"),
                   ("1981-07", "1982-11"), ("1990-07", "1991-03"), ("2001-03", "2001-11"),
                   ("2007-12", "2009-06"), ("2020-02", "2020-04"))
DEFAULT_VALIDATION = (("1979-01", "1984-12"), ("2005-01", "2010-12"))


def synthetic_macro(n_months: int = 671, start: str = "1967-01", seed: int = 20240):
    """Four level series driven by one AR(1) growth factor that drops during
    the recession bands.  Used only to build the bundled test fixtures."""
    rng = np.random.default_rng(seed)
    dates = np.arange(np.datetime64(start, "M"), np.datetime64(start, "M") + n_months)
    rec = recession_flags(dates, [(parse_month(a), parse_month(b)) for a, b in NBER_RECESSIONS])
    f = np.zeros(n_months)
    for t in range(1, n_months):
        f[t] = 0.5 * f[t - 1] - 1.2 * rec[t] + 0.6 * rng.standard_normal()
    load = np.array([0.008, 0.007, 0.004, 0.003])
    drift = np.array([0.002, 0.0025, 0.0022, 0.0])
    noise = np.array([0.006, 0.008, 0.004, 0.004])
    g = drift + f[:, None] * load + noise * rng.standard_normal((n_months, 4))
    base = np.array([40.0, 700000.0, 5000.0, 40.0])
    levels = base * np.exp(np.cumsum(g, axis=0))
    return dates, levels


def write_fixtures(directory, seed: int = 20240) -> None:
    directory = Path(directory)
    dates, levels = synthetic_macro(seed=seed)
    for j, name in enumerate(SERIES):
        with open(directory / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "value"])
            for d, v in zip(dates, levels[:, j]):
                w.writerow([f"{d}-01", f"{v:.6f}"])
    with open(directory / "recessions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "end"])
        w.writerows(NBER_RECESSIONS)
    SplitSpec.from_validation(dates[1:], DEFAULT_VALIDATION).to_csv(directory / "split.csv")
