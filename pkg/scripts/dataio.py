"""
Dataset ingestion, chronological splits, windowing, standardisation, few-shot
subsampling, synthetic coupled-channel data and missing-value simulation
"""
import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ContractError, LoadError

logger = logging.getLogger(__name__)

COUPLINGS = ("independent", "lagged_copy", "mixture")
MISSING_TOKENS = ("", "nan", "na", "null")


@dataclass(frozen=True)
class RawDataset:
    name: str
    values: np.ndarray
    channel_names: Tuple[str, ...]
    task: str = "forecast"

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray, name: Optional[str] = None) -> "RawDataset":
        return replace(self, values=values, name=name or self.name)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test fractions, or exact row counts when given"""
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    counts: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if self.counts is not None:
            if len(self.counts) != 3 or any(int(c) < 0 for c in self.counts):
                raise ContractError(f"split counts must be three non-negative ints, got {self.counts}")
            return
        fractions = (self.train, self.val, self.test)
        if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must be positive and sum to 1, got {fractions}")

    def lengths(self, rows: int) -> Tuple[int, int, int]:
        if self.counts is not None:
            n_train, n_val, n_test = (int(c) for c in self.counts)
            if n_train + n_val + n_test > rows:
                raise ContractError(f"split counts {self.counts} exceed {rows} rows")
            return n_train, n_val, n_test
        n_train = int(math.floor(rows * self.train + 1e-9))
        n_test = int(math.floor(rows * self.test + 1e-9))
        return n_train, rows - n_train - n_test, n_test


@dataclass(frozen=True)
class Scaler:
    """Per-channel standardisation statistics of a training split"""
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass(frozen=True)
class WindowedSet:
    """
    Supervised (lookback, horizon) pairs carved from one split.

    x is N x L x C, y is N x H x C; offsets[i] is where window i starts in the split.
    """
    name: str
    x: np.ndarray
    y: np.ndarray
    offsets: np.ndarray
    lookback: int
    horizon: int
    scaler: Optional[Scaler] = None

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def channels(self) -> int:
        return self.x.shape[2]

    def subset(self, index) -> "WindowedSet":
        return replace(self, x=self.x[index], y=self.y[index], offsets=self.offsets[index])

    def reassemble(self) -> np.ndarray:
        """Rebuild the covered stretch of the split from the windows and their offsets"""
        if len(self) == 0:
            return np.zeros((0, self.channels))
        span = int(self.offsets.max()) + self.lookback + self.horizon
        out = np.full((span, self.channels), np.nan)
        for off, x, y in zip(self.offsets, self.x, self.y):
            out[off:off + self.lookback] = x
            out[off + self.lookback:off + self.lookback + self.horizon] = y
        return out


# --- Loading ---

def _ragged_row(err: Exception) -> int:
    match = re.search(r"line (\d+)", str(err))
    return int(match.group(1)) if match else 0


def load_csv(path: str, allow_missing: bool = False, name: Optional[str] = None,
             task: str = "forecast") -> RawDataset:
    """
    Read a numeric CSV into a float64 T x C matrix.

    A header row is detected when it holds non-numeric cells; a leading column that
    parses as timestamps is dropped. Row numbers in errors are 1-based file lines.
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False,
                            skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise LoadError(path, 1, "file is empty")
    except pd.errors.ParserError as e:
        raise LoadError(path, _ragged_row(e), "row has a different number of columns")

    cells = frame.fillna("\0").apply(lambda col: col.str.strip())
    ragged = (cells == "\0").any(axis=1).to_numpy()
    if ragged.any():
        raise LoadError(path, int(np.argmax(ragged)) + 1, "row has a different number of columns")

    numeric = cells.apply(pd.to_numeric, errors="coerce")
    is_num = numeric.notna().to_numpy()

    has_header = False
    if len(cells) > 1:
        first_rest_numeric = is_num[0, 1:].all() if cells.shape[1] > 1 else True
        has_header = not first_rest_numeric or (not is_num[0, 0] and is_num[1, 0])
    elif len(cells) == 1:
        has_header = not is_num[0].all()

    header = [str(c) for c in cells.iloc[0]] if has_header else None
    first_line = 2 if has_header else 1
    body = cells.iloc[1:] if has_header else cells
    body_num = numeric.iloc[1:] if has_header else numeric
    if len(body) == 0:
        raise LoadError(path, first_line, "no data rows")

    first_col = body.iloc[:, 0]
    if body_num.iloc[:, 0].isna().all():
        stamps = pd.to_datetime(first_col, errors="coerce")
        if stamps.notna().all():
            logger.info("%s: dropping timestamp column %r", path,
                        header[0] if header else 0)
            body, body_num = body.iloc[:, 1:], body_num.iloc[:, 1:]
            header = header[1:] if header else None

    if body.shape[1] == 0:
        raise LoadError(path, first_line, "no numeric columns")

    missing = body.apply(lambda col: col.str.lower().isin(MISSING_TOKENS)).to_numpy()
    bad = body_num.isna().to_numpy() & ~(missing & allow_missing)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        cell = body.iat[r, c]
        raise LoadError(path, first_line + int(r), f"cannot parse {cell!r} as a number")

    values = body_num.to_numpy(dtype=np.float64)
    names = tuple(header) if header else tuple(f"c{i}" for i in range(values.shape[1]))
    dataset_name = name or re.sub(r"\.csv$", "", path.replace("\\", "/").rsplit("/", 1)[-1])
    return RawDataset(dataset_name, values, names, task)


# --- Splits and windows ---

def chrono_split(ds: RawDataset, spec: SplitSpec = SplitSpec()) -> Tuple[RawDataset, RawDataset, RawDataset]:
    n_train, n_val, n_test = spec.lengths(ds.rows)
    v = ds.values
    return (ds.with_values(v[:n_train], f"{ds.name}:train"),
            ds.with_values(v[n_train:n_train + n_val], f"{ds.name}:val"),
            ds.with_values(v[n_train + n_val:n_train + n_val + n_test], f"{ds.name}:test"))


def make_windows(split: RawDataset, lookback: int, horizon: int) -> WindowedSet:
    if lookback < 1 or horizon < 1:
        raise ContractError(f"lookback and horizon must be >= 1, got {lookback}, {horizon}")
    count = split.rows - lookback - horizon + 1
    if count <= 0:
        raise ContractError(
            f"split {split.name} has {split.rows} rows, needs at least {lookback + horizon}")
    windows = np.lib.stride_tricks.sliding_window_view(split.values, lookback + horizon, axis=0)
    # sliding_window_view puts the window axis last: N x C x (L+H)
    windows = np.transpose(windows, (0, 2, 1))
    return WindowedSet(split.name, windows[:, :lookback].copy(), windows[:, lookback:].copy(),
                       np.arange(count), lookback, horizon)


def fit_scaler(train: RawDataset) -> Scaler:
    mean = train.values.mean(axis=0, keepdims=True)
    std = train.values.std(axis=0, keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return Scaler(mean, std)


def standardize(ws: WindowedSet, scaler: Scaler) -> WindowedSet:
    """Standardise with training-split statistics (never the split's own)"""
    return replace(ws, x=scaler.transform(ws.x), y=scaler.transform(ws.y), scaler=scaler)


def subsample_fraction(train: RawDataset, ratio: float, min_rows: int = 1) -> RawDataset:
    """Chronological prefix holding ceil(ratio * rows) training rows"""
    if not 0 < ratio <= 1:
        raise ContractError(f"data ratio must be in (0, 1], got {ratio}")
    rows = int(math.ceil(round(ratio * train.rows, 9)))
    if rows < min_rows:
        raise ContractError(
            f"data ratio {ratio} leaves {rows} training rows, need at least {min_rows}")
    return train.with_values(train.values[:rows])


# --- Synthetic data ---

@dataclass(frozen=True)
class SynthSpec:
    channels: int = 4
    length: int = 2000
    coupling: str = "lagged_copy"
    lag: int = 3
    noise: float = 0.1
    weights: Tuple[float, ...] = field(default=())
    seed: int = 7
    phi: float = 0.9
    period: int = 24

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        """Parse "coupling:key=value,..." e.g. "lagged_copy:C=4,T=2000,tau=3,sigma=0.1,seed=7"."""
        aliases = {"c": "channels", "t": "length", "tau": "lag", "sigma": "noise"}
        coupling, _, rest = text.partition(":")
        kwargs: Dict = {"coupling": coupling.strip()}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            key, _, value = item.partition("=")
            key = aliases.get(key.strip().lower(), key.strip().lower())
            if key == "weights":
                kwargs[key] = tuple(float(w) for w in value.split("/"))
            elif key in ("channels", "length", "lag", "seed", "period"):
                kwargs[key] = int(value)
            elif key in ("noise", "phi"):
                kwargs[key] = float(value)
            else:
                raise ContractError(f"unknown synthetic spec key {key!r}")
        return cls(**kwargs)

    @classmethod
    def from_dict(cls, raw: Dict) -> "SynthSpec":
        raw = dict(raw)
        if "weights" in raw:
            raw["weights"] = tuple(raw["weights"])
        return cls(**raw)

    @property
    def name(self) -> str:
        return f"synth-{self.coupling}-C{self.channels}-T{self.length}-s{self.seed}"


def _ar_sinusoid(rng: np.random.Generator, n: int, phi: float, period: int) -> np.ndarray:
    shocks = rng.normal(0.0, math.sqrt(1.0 - phi ** 2), n)
    ar = np.zeros(n)
    for t in range(1, n):
        ar[t] = phi * ar[t - 1] + shocks[t]
    return ar + np.sin(2.0 * np.pi * np.arange(n) / period)


def synth_generate(spec: SynthSpec) -> RawDataset:
    """Deterministic multichannel series with known cross-channel dependence"""
    C, T = spec.channels, spec.length
    if C < 1 or T < 2:
        raise ContractError(f"synthetic data needs C >= 1 and T >= 2, got C={C}, T={T}")
    if spec.noise < 0:
        raise ContractError(f"noise must be >= 0, got {spec.noise}")
    if not 0 <= spec.phi < 1 or spec.period < 1:
        raise ContractError(f"invalid AR/sinusoid settings phi={spec.phi}, period={spec.period}")
    rng = np.random.default_rng(spec.seed)

    if spec.coupling == "independent":
        if spec.noise <= 0:
            raise ContractError("independent channels need noise > 0")
        values = rng.normal(0.0, spec.noise, (T, C))
    elif spec.coupling == "lagged_copy":
        if spec.lag < 0 or T <= spec.lag:
            raise ContractError(f"lagged_copy needs 0 <= tau < T, got tau={spec.lag}, T={T}")
        shift = (C - 1) * spec.lag
        base = _ar_sinusoid(rng, T + shift, spec.phi, spec.period)
        values = np.empty((T, C))
        for k in range(C):
            start = shift - k * spec.lag
            values[:, k] = base[start:start + T]
            if k > 0:
                values[:, k] += rng.normal(0.0, spec.noise, T) if spec.noise > 0 else 0.0
    elif spec.coupling == "mixture":
        weights = np.asarray(spec.weights, dtype=np.float64)
        if weights.shape != (C,) or ((weights < 0) | (weights > 1)).any():
            raise ContractError(f"mixture needs {C} weights in [0, 1], got {spec.weights}")
        shared = _ar_sinusoid(rng, T, spec.phi, spec.period)
        values = np.empty((T, C))
        for k in range(C):
            own = _ar_sinusoid(rng, T, spec.phi, spec.period)
            values[:, k] = weights[k] * shared + (1.0 - weights[k]) * own
        if spec.noise > 0:
            values += rng.normal(0.0, spec.noise, (T, C))
    else:
        raise ContractError(f"unknown coupling {spec.coupling!r}; choose from {', '.join(COUPLINGS)}")

    return RawDataset(spec.name, values, tuple(f"c{i}" for i in range(C)))


# --- Missing values ---

def corrupt_missing(ds: RawDataset, ratio: float, seed: int = 0) -> RawDataset:
    """Mark round(ratio * T * C) uniformly chosen cells as NaN"""
    if not 0 <= ratio < 1:
        raise ContractError(f"missing ratio must be in [0, 1), got {ratio}")
    values = ds.values.copy()
    count = int(round(ratio * values.size))
    if count:
        rng = np.random.default_rng(seed)
        cells = rng.choice(values.size, size=count, replace=False)
        values.flat[cells] = np.nan
    empty = np.isnan(values).all(axis=0)
    if empty.any():
        raise ContractError(f"channels {np.flatnonzero(empty).tolist()} are fully missing")
    return ds.with_values(values)


def linear_interpolate(ds: RawDataset) -> RawDataset:
    """Fill gaps per channel from the nearest present neighbours; edges copy the nearest value"""
    values = ds.values.copy()
    t = np.arange(values.shape[0])
    for c in range(values.shape[1]):
        gaps = np.isnan(values[:, c])
        if not gaps.any():
            continue
        if gaps.all():
            raise ContractError(f"channel {ds.channel_names[c]} is fully missing")
        values[gaps, c] = np.interp(t[gaps], t[~gaps], values[~gaps, c])
    return ds.with_values(values)


# --- Pipeline ---

@dataclass
class Prepared:
    """Splits, scaler and standardised windows of one dataset"""
    dataset: RawDataset
    train: RawDataset
    val: RawDataset
    test: RawDataset
    scaler: Scaler
    train_ws: WindowedSet
    val_ws: Optional[WindowedSet]
    test_ws: WindowedSet

    @property
    def train_values(self) -> np.ndarray:
        """Standardised training rows, the input of the correlation matrix"""
        return self.scaler.transform(self.train.values)


def prepare(ds: RawDataset, lookback: int, horizon: int,
            split: SplitSpec = SplitSpec(), data_ratio: float = 1.0) -> Prepared:
    if np.isnan(ds.values).any():
        raise ContractError(f"{ds.name} has missing values; run linear_interpolate first")
    train, val, test = chrono_split(ds, split)
    if data_ratio < 1.0:
        train = subsample_fraction(train, data_ratio, min_rows=lookback + horizon)
    scaler = fit_scaler(train)
    train_ws = standardize(make_windows(train, lookback, horizon), scaler)
    test_ws = standardize(make_windows(test, lookback, horizon), scaler)
    try:
        val_ws: Optional[WindowedSet] = standardize(make_windows(val, lookback, horizon), scaler)
    except ContractError as e:
        logger.warning("no validation windows (%s); model selection uses training loss", e)
        val_ws = None
    return Prepared(ds, train, val, test, scaler, train_ws, val_ws, test_ws)
