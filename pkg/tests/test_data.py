import json
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tscl.data import (ETT_COLUMNS, RawSeries, SplitSpec, fit_normalizer, hourly_aggregate,
                       load_csv, make_windows, prepare, save_prepared, split, synthetic_series,
                       window_starts, write_csv)
from tscl.errors import (EmptySeries, IrregularSampling, MalformedFile, MissingValues,
                         NonMonotonicTimestamps, SeriesTooShort, SplitTooSmall)

HEADER = "date," + ",".join(ETT_COLUMNS)


def write(tmp_path, text, name="ett.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def series_from(values, freq="h", start="2021-01-01 00:00:00"):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    stamps = pd.date_range(start, periods=len(values), freq=freq).to_numpy()
    return RawSeries(stamps, values, [f"f{i}" for i in range(values.shape[1])], {})


# ----------------------------------------------------------------- load_csv
def test_three_row_file_passes_values_verbatim(tmp_path):
    rows = [[1.5, 2, 3, 4, 5, 6, 30.25], [0, -1, 2.5, 3, 4, 5, 29.0], [7, 8, 9, 10, 11, 12, 28.5]]
    body = "\n".join(f"2016-07-01 0{i}:00:00," + ",".join(str(v) for v in r) for i, r in enumerate(rows))
    s = load_csv(write(tmp_path, HEADER + "\n" + body + "\n"))
    assert s.num_features == 7
    assert s.feature_names == list(ETT_COLUMNS)
    np.testing.assert_array_equal(s.values, np.array(rows))
    assert (np.diff(s.timestamps) > np.timedelta64(0)).all()


def test_empty_file_raises(tmp_path):
    with pytest.raises(EmptySeries):
        load_csv(write(tmp_path, HEADER + "\n"))


def test_header_mismatch(tmp_path):
    with pytest.raises(MalformedFile):
        load_csv(write(tmp_path, "date,a,b\n2016-07-01 00:00:00,1,2\n"))


def test_non_monotonic_timestamps(tmp_path):
    text = HEADER + "\n2016-07-01 01:00:00,1,1,1,1,1,1,1\n2016-07-01 00:00:00,1,1,1,1,1,1,1\n"
    with pytest.raises(NonMonotonicTimestamps):
        load_csv(write(tmp_path, text))


def test_non_numeric_and_bad_timestamp(tmp_path):
    with pytest.raises(MalformedFile):
        load_csv(write(tmp_path, HEADER + "\n2016-07-01 00:00:00,1,x,1,1,1,1,1\n"))
    with pytest.raises(MalformedFile):
        load_csv(write(tmp_path, HEADER + "\nyesterday,1,1,1,1,1,1,1\n"))


def test_missing_values_rejected_or_forward_filled(tmp_path):
    text = HEADER + "\n2016-07-01 00:00:00,1,2,3,4,5,6,7\n2016-07-01 01:00:00,1,,3,4,5,6,7\n"
    path = write(tmp_path, text)
    with pytest.raises(MissingValues):
        load_csv(path)
    s = load_csv(path, forward_fill=True)
    assert s.values[1, 1] == 2.0


def test_ecl_column_arity(tmp_path):
    cols = [f"MT_{i:03d}" for i in range(321)]
    row = ",".join("1" for _ in cols)
    s = load_csv(write(tmp_path, "date," + ",".join(cols) + f"\n2012-01-01 00:00:00,{row}\n"), "ECL")
    assert s.num_features == 321 and s.metadata["num_features"] == 321
    with pytest.raises(MalformedFile):
        load_csv(write(tmp_path, "date,MT_1,MT_2\n2012-01-01 00:00:00,1,2\n", "small.csv"), "ECL")


def test_synthetic_round_trips_through_ett_schema(tmp_path):
    s = synthetic_series(n=50, seed=3)
    write_csv(s, tmp_path / "syn.csv")
    back = load_csv(tmp_path / "syn.csv")
    np.testing.assert_allclose(back.values, s.values, rtol=1e-9)


# ---------------------------------------------------------- hourly_aggregate
def test_hourly_mean_of_quarter_hours():
    out = hourly_aggregate(series_from([1, 2, 3, 4], freq="15min"))
    assert len(out) == 1 and out.values[0, 0] == 2.5
    assert out.timestamps[0] == np.datetime64("2021-01-01T00:00")


def test_hourly_identity_on_hourly_input():
    s = series_from(np.arange(6.0))
    out = hourly_aggregate(s)
    np.testing.assert_array_equal(out.values, s.values)
    np.testing.assert_array_equal(out.timestamps, s.timestamps)


def test_hourly_two_buckets_against_pandas_resample():
    s = series_from(np.arange(8.0), freq="15min")
    out = hourly_aggregate(s)
    oracle = pd.Series(np.arange(8.0), index=pd.DatetimeIndex(s.timestamps)).resample("h").mean()
    np.testing.assert_array_equal(out.values[:, 0], oracle.to_numpy())
    np.testing.assert_array_equal(out.values[:, 0], [1.5, 5.5])


def test_hourly_irregular_interval():
    with pytest.raises(IrregularSampling):
        hourly_aggregate(series_from(np.arange(5.0), freq="7min"))


# -------------------------------------------------------------------- split
def test_split_exact_fractions():
    train, val, test = split(series_from(np.arange(100.0)))
    assert (len(train), len(val), len(test)) == (60, 20, 20)


def test_split_too_small_names_the_split():
    with pytest.raises(SplitTooSmall, match="val"):
        split(series_from(np.arange(10.0)), SplitSpec(), min_rows=9)


def test_split_etth1_length():
    n = 17420
    # exact rational floor as the oracle
    expect_train = int(Fraction(n) * Fraction(3, 5))
    expect_val = int(Fraction(n) * Fraction(1, 5))
    assert (expect_train, expect_val, n - expect_train - expect_val) == (10452, 3484, 3484)
    train, val, test = split(series_from(np.zeros(n)))
    assert (len(train), len(val), len(test)) == (10452, 3484, 3484)


@given(st.integers(3, 5000))
def test_split_is_chronological_and_complete(n):
    s = series_from(np.arange(float(n)))
    try:
        parts = split(s)
    except SplitTooSmall:
        return
    np.testing.assert_array_equal(np.concatenate([p.values for p in parts]), s.values)
    assert parts[0].timestamps[-1] < parts[1].timestamps[0] < parts[2].timestamps[0]


def test_splitspec_rejects_bad_fractions():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.2, 0.2)


# --------------------------------------------------------------- normalizer
def test_normalizer_two_values():
    norm = fit_normalizer(np.array([[0.0], [2.0]]))
    assert norm.mean[0] == 1.0 and norm.std[0] == 1.0
    np.testing.assert_array_equal(norm.apply(np.array([[0.0], [2.0]])), [[-1.0], [1.0]])


def test_constant_feature_unchanged():
    x = np.full((5, 1), 3.0)
    norm = fit_normalizer(x)
    assert norm.std[0] == 1.0
    np.testing.assert_array_equal(norm.apply(x) + norm.mean, x)


def test_normalized_train_statistics(rng):
    x = rng.normal(5.0, 3.0, size=(50, 3))
    z = fit_normalizer(x).apply(x)
    assert np.abs(z.mean(axis=0)).max() < 1e-8
    assert np.abs(z.std(axis=0) - 1.0).max() < 1e-8


@given(arrays(np.float64, (20, 3), elements=st.floats(-1e3, 1e3)))
def test_normalizer_round_trip(x):
    norm = fit_normalizer(x)
    np.testing.assert_allclose(norm.invert(norm.apply(x)), x, rtol=0, atol=1e-10 * max(1.0, np.abs(x).max()))


def test_no_leakage_from_val_and_test(rng):
    s = series_from(rng.normal(size=(100, 2)))
    a = prepare(s)
    mutated = s.values.copy()
    mutated[60:] = 1e6
    b = prepare(RawSeries(s.timestamps, mutated, s.feature_names, {}))
    np.testing.assert_array_equal(a.normalizer.mean, b.normalizer.mean)
    np.testing.assert_array_equal(a.normalizer.std, b.normalizer.std)


def test_save_prepared_sidecar(tmp_path):
    data = prepare(synthetic_series(n=100), "syn")
    paths = save_prepared(data, tmp_path)
    meta = json.loads((tmp_path / "syn_meta.json").read_text())
    assert meta["train_end"] == 60 and meta["val_end"] == 80
    np.testing.assert_allclose(meta["mean"], data.normalizer.mean)
    assert len(paths) == 4


# ------------------------------------------------------------------ windows
def test_window_counts():
    assert len(window_starts(10, 4, 2, 1)) == 5
    assert len(window_starts(6, 4, 2, 1)) == 1
    with pytest.raises(SeriesTooShort):
        window_starts(5, 4, 2, 1)


@given(st.integers(1, 60), st.integers(1, 8), st.integers(1, 8), st.integers(1, 5))
def test_windows_follow_inputs(length, L, T, stride):
    values = np.arange(length, dtype=np.float64)[:, None]
    if length < L + T:
        with pytest.raises(SeriesTooShort):
            list(make_windows(values, L, T, stride))
        return
    batches = list(make_windows(values, L, T, stride, batch_size=3))
    starts = np.concatenate([b.origin_indices for b in batches])
    np.testing.assert_array_equal(starts, np.arange(0, length - L - T + 1, stride))
    for b in batches:
        for i, s in enumerate(b.origin_indices):
            np.testing.assert_array_equal(b.inputs[i, :, 0], np.arange(s, s + L))
            np.testing.assert_array_equal(b.targets[i, :, 0], np.arange(s + L, s + L + T))
