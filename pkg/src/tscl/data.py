"""Dataset ingestion, chronological splitting, z-scoring and sliding windows.

Series are held as plain numpy arrays; tensors are only created at batch
time so the same splits can feed both torch training and closed-form heads.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import (
    EmptySeries,
    IrregularSampling,
    MalformedFile,
    MissingValues,
    NonMonotonicTimestamps,
    SeriesTooShort,
    SplitTooSmall,
)

ETT_COLUMNS = ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT")
ECL_MIN_CLIENTS = 300
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
DATASET_KINDS = ("ETT", "ECL", "custom")


@dataclass
class RawSeries:
    timestamps: np.ndarray  # datetime64[ns], shape (N,)
    values: np.ndarray  # float64, shape (N, m)
    feature_names: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[ns]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.timestamps) != len(self.values):
            raise MalformedFile(
                f"{len(self.timestamps)} timestamps but {len(self.values)} value rows")
        if self.values.shape[1] != len(self.feature_names):
            raise MalformedFile(
                f"{self.values.shape[1]} value columns but {len(self.feature_names)} names")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > np.timedelta64(0)):
            raise NonMonotonicTimestamps("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.values)

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(self.timestamps[start:stop], self.values[start:stop],
                         list(self.feature_names), dict(self.metadata))


def load_csv(path, schema: str = "ETT", forward_fill: bool = False) -> RawSeries:
    """Read an ETT/ECL-style CSV: a datetime column followed by numeric columns.

    ``schema`` is one of ``ETT`` (exactly the seven ETT columns ending in OT),
    ``ECL`` (at least 300 client columns; the count is kept in metadata) or
    ``custom`` (any number of numeric columns).
    Missing entries are rejected unless ``forward_fill`` is set.
    """
    if schema not in DATASET_KINDS:
        raise ValueError(f"unknown schema {schema!r}; expected one of {DATASET_KINDS}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise MalformedFile(f"{path}: no header row") from exc
    except pd.errors.ParserError as exc:
        raise MalformedFile(f"{path}: {exc}") from exc

    columns = [c.strip() for c in frame.columns]
    if len(columns) < 2:
        raise MalformedFile(f"{path}: need a date column and at least one feature column")
    features = columns[1:]
    if schema == "ETT" and tuple(features) != ETT_COLUMNS:
        raise MalformedFile(f"{path}: ETT header must be date,{','.join(ETT_COLUMNS)}; got {columns}")
    if schema == "ECL" and len(features) < ECL_MIN_CLIENTS:
        raise MalformedFile(f"{path}: ECL needs >= {ECL_MIN_CLIENTS} client columns, got {len(features)}")
    if len(frame) == 0:
        raise EmptySeries(f"{path}: no data rows")

    try:
        stamps = pd.to_datetime(frame.iloc[:, 0].str.strip(), format=TIMESTAMP_FORMAT)
    except (ValueError, TypeError) as exc:
        raise MalformedFile(f"{path}: unparseable timestamp ({exc})") from exc

    raw = frame.iloc[:, 1:].apply(lambda col: col.str.strip())
    values = raw.replace("", np.nan).apply(pd.to_numeric, errors="coerce")
    bad = values.isna() & (raw != "")
    if bad.to_numpy().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        raise MalformedFile(f"{path}: non-numeric entry at row {row + 1}, column {features[col]!r}")
    if values.isna().to_numpy().any():
        if not forward_fill:
            row = int(np.argwhere(values.isna().to_numpy())[0][0])
            raise MissingValues(f"{path}: missing value in data row {row + 1}")
        values = values.ffill()
        if values.isna().to_numpy().any():
            raise MissingValues(f"{path}: leading missing values cannot be forward-filled")

    meta = {"source": os.fspath(path), "schema": schema, "num_features": len(features)}
    return RawSeries(stamps.to_numpy(), values.to_numpy(dtype=np.float64), features, meta)


def hourly_aggregate(series: RawSeries) -> RawSeries:
    """Average sub-hourly rows into one row per clock hour.

    The sampling interval must be constant and divide one hour; hourly input
    is returned unchanged.
    """
    if len(series) == 0:
        raise EmptySeries("cannot aggregate an empty series")
    hour = np.timedelta64(3600, "s")
    if len(series) > 1:
        steps = np.unique(np.diff(series.timestamps))
        if len(steps) != 1:
            raise IrregularSampling(f"sampling interval is not constant: {steps[:5]}")
        step = steps[0]
        if hour % step != np.timedelta64(0):
            raise IrregularSampling(f"interval {step} does not divide one hour")
        if step == hour:
            return series.slice(0, len(series))
    buckets = series.timestamps.astype("datetime64[h]")
    keys, inverse = np.unique(buckets, return_inverse=True)
    sums = np.zeros((len(keys), series.num_features))
    np.add.at(sums, inverse, series.values)
    counts = np.bincount(inverse, minlength=len(keys)).astype(np.float64)
    meta = dict(series.metadata, aggregated="hourly-mean")
    return RawSeries(keys.astype("datetime64[ns]"), sums / counts[:, None],
                     list(series.feature_names), meta)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1): {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")

    def boundaries(self, n: int) -> tuple[int, int]:
        """Return (train_end, val_end); the test split takes the remainder."""
        # the epsilon keeps 17420 * 0.6 from flooring to 10451
        n_train = int(math.floor(n * self.train_fraction + 1e-9))
        n_val = int(math.floor(n * self.val_fraction + 1e-9))
        return n_train, n_train + n_val


def split(series: RawSeries, spec: SplitSpec = SplitSpec(), min_rows: int = 1):
    """Chronological train/val/test split; each part must hold ``min_rows`` rows."""
    train_end, val_end = spec.boundaries(len(series))
    parts = (series.slice(0, train_end), series.slice(train_end, val_end),
             series.slice(val_end, len(series)))
    need = max(min_rows, 1)
    short = [f"{name} ({len(part)} rows)" for name, part in zip(("train", "val", "test"), parts)
             if len(part) < need]
    if short:
        raise SplitTooSmall(f"too small for {need} rows: {', '.join(short)}")
    return parts


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.std + self.mean

    def apply_series(self, series: RawSeries) -> RawSeries:
        return RawSeries(series.timestamps, self.apply(series.values),
                         list(series.feature_names), dict(series.metadata))


def fit_normalizer(train: RawSeries | np.ndarray) -> Normalizer:
    values = train.values if isinstance(train, RawSeries) else np.asarray(train, dtype=np.float64)
    if len(values) == 0:
        raise EmptySeries("cannot fit a normalizer on an empty split")
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Normalizer(mean, std)


def default_lookback(horizon: int, cap: int = 336) -> int:
    return min(2 * horizon, cap)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, L, m)
    targets: np.ndarray  # (B, T, m)
    origin_indices: np.ndarray  # (B,)


def window_starts(length: int, lookback: int, horizon: int, stride: int = 1) -> np.ndarray:
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ValueError("lookback, horizon and stride must all be >= 1")
    if length < lookback + horizon:
        raise SeriesTooShort(
            f"series of length {length} is shorter than lookback+horizon={lookback + horizon}")
    return np.arange(0, length - lookback - horizon + 1, stride)


def gather_windows(values: np.ndarray, starts: Sequence[int], lookback: int,
                   horizon: int) -> WindowBatch:
    starts = np.asarray(starts, dtype=np.int64)
    offsets = np.arange(lookback + horizon)
    block = values[starts[:, None] + offsets[None, :]]
    return WindowBatch(block[:, :lookback], block[:, lookback:], starts)


def make_windows(series: RawSeries | np.ndarray, lookback: int, horizon: int,
                 stride: int = 1, batch_size: int | None = None) -> Iterator[WindowBatch]:
    """Yield windows in start order, ``batch_size`` at a time (all at once if None)."""
    values = series.values if isinstance(series, RawSeries) else np.asarray(series)
    starts = window_starts(len(values), lookback, horizon, stride)
    step = len(starts) if batch_size is None else batch_size
    for i in range(0, len(starts), step):
        yield gather_windows(values, starts[i:i + step], lookback, horizon)


@dataclass
class PreparedData:
    """Normalized chronological splits of one dataset plus bookkeeping."""

    name: str
    train: RawSeries
    val: RawSeries
    test: RawSeries
    normalizer: Normalizer
    boundaries: tuple[int, int]
    checksum: str = ""

    @property
    def num_features(self) -> int:
        return self.train.num_features


def prepare(series: RawSeries, name: str = "dataset", spec: SplitSpec = SplitSpec(),
            min_rows: int = 1) -> PreparedData:
    train, val, test = split(series, spec, min_rows=min_rows)
    norm = fit_normalizer(train)
    return PreparedData(name, norm.apply_series(train), norm.apply_series(val),
                        norm.apply_series(test), norm, spec.boundaries(len(series)),
                        series.metadata.get("checksum", ""))


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_prepared(data: PreparedData, out_dir) -> list[str]:
    """Persist normalized splits as CSV plus a JSON sidecar with the statistics."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for part in ("train", "val", "test"):
        series = getattr(data, part)
        frame = pd.DataFrame(series.values, columns=series.feature_names)
        frame.insert(0, "date", pd.to_datetime(series.timestamps).strftime(TIMESTAMP_FORMAT))
        path = os.path.join(out_dir, f"{data.name}_{part}.csv")
        frame.to_csv(path, index=False, float_format="%.10g")
        written.append(path)
    meta = {
        "name": data.name,
        "features": data.train.feature_names,
        "mean": data.normalizer.mean.tolist(),
        "std": data.normalizer.std.tolist(),
        "train_end": data.boundaries[0],
        "val_end": data.boundaries[1],
        "rows": len(data.train) + len(data.val) + len(data.test),
        "source_checksum": data.checksum,
    }
    path = os.path.join(out_dir, f"{data.name}_meta.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2)
    written.append(path)
    return written


def synthetic_series(n: int = 2000, num_features: int = 7, period: int = 24,
                     noise: float = 0.1, seed: int = 0, start: str = "2016-07-01 00:00:00",
                     freq_minutes: int = 60) -> RawSeries:
    """Hourly multivariate series with daily and weekly cycles, drift and noise.

    Stands in for ETT when the real files are unavailable; with seven features
    it carries the ETT column names so it passes the ETT schema check.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    phases = rng.uniform(0, 2 * np.pi, size=num_features)
    amps = rng.uniform(0.5, 1.5, size=num_features)
    weekly = rng.uniform(0.1, 0.4, size=num_features)
    drift = rng.uniform(-1.0, 1.0, size=num_features) / max(n, 1)
    values = (amps * np.sin(2 * np.pi * t[:, None] / period + phases)
              + weekly * np.sin(2 * np.pi * t[:, None] / (7 * period) + 2 * phases)
              + drift * t[:, None]
              + noise * rng.standard_normal((n, num_features)))
    stamps = pd.date_range(start, periods=n, freq=f"{freq_minutes}min").to_numpy()
    names = list(ETT_COLUMNS) if num_features == 7 else [f"x{i}" for i in range(num_features)]
    return RawSeries(stamps, values, names, {"source": "synthetic", "period": period, "seed": seed})


def write_csv(series: RawSeries, path) -> None:
    frame = pd.DataFrame(series.values, columns=series.feature_names)
    frame.insert(0, "date", pd.to_datetime(series.timestamps).strftime(TIMESTAMP_FORMAT))
    frame.to_csv(path, index=False, float_format="%.10g")
