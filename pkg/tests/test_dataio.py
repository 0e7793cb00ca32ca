import math
import logging

import numpy as np
import pytest

from chanstats import pearson_corr
from dataio import (RawDataset, SplitSpec, SynthSpec, chrono_split, corrupt_missing, fit_scaler,
                    linear_interpolate, load_csv, make_windows, prepare, standardize,
                    subsample_fraction, synth_generate)
from errors import ContractError, LoadError


def dataset(values, name="demo"):
    values = np.asarray(values, dtype=np.float64)
    return RawDataset(name, values, tuple(f"c{i}" for i in range(values.shape[1])))


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# --- load_csv ---

def test_load_plain_numeric_file(tmp_path):
    ds = load_csv(write(tmp_path, "1,2\n3,4\n5,6\n"))
    np.testing.assert_array_equal(ds.values, [[1, 2], [3, 4], [5, 6]])
    assert ds.channel_names == ("c0", "c1")
    assert ds.name == "data"
    assert ds.values.dtype == np.float64


def test_load_header_and_timestamp_column(tmp_path, caplog):
    text = "date,OT,HUFL\n2016-07-01 00:00:00,1.5,2\n2016-07-01 01:00:00,2.5,3\n"
    with caplog.at_level(logging.INFO, logger="dataio"):
        ds = load_csv(write(tmp_path, text))
    assert ds.channel_names == ("OT", "HUFL")
    np.testing.assert_array_equal(ds.values, [[1.5, 2], [2.5, 3]])
    assert "timestamp" in caplog.text


def test_load_timestamp_without_header(tmp_path):
    ds = load_csv(write(tmp_path, "2020-01-01,1,2\n2020-01-02,3,4\n"))
    assert ds.channel_names == ("c0", "c1")
    np.testing.assert_array_equal(ds.values, [[1, 2], [3, 4]])


def test_unparseable_cell_cites_its_row(tmp_path):
    rows = ["1,2"] * 6 + ["abc,3"] + ["4,5"]
    with pytest.raises(LoadError) as err:
        load_csv(write(tmp_path, "\n".join(rows) + "\n"))
    assert err.value.row == 7
    assert "row 7" in str(err.value)


def test_ragged_row_is_a_load_error(tmp_path):
    with pytest.raises(LoadError) as err:
        load_csv(write(tmp_path, "1,2\n3,4\n5,6,7\n"))
    assert err.value.row == 3

    with pytest.raises(LoadError) as err:
        load_csv(write(tmp_path, "1,2,3\n4,5\n", "short.csv"))
    assert err.value.row == 2


def test_missing_cells_only_with_allow_missing(tmp_path):
    path = write(tmp_path, "a,b\n1,2\n,4\n5,nan\n")
    with pytest.raises(LoadError):
        load_csv(path)
    ds = load_csv(path, allow_missing=True)
    assert np.isnan(ds.values[1, 0]) and np.isnan(ds.values[2, 1])
    np.testing.assert_array_equal(linear_interpolate(ds).values, [[1, 2], [3, 4], [5, 4]])


def test_empty_file_is_a_load_error(tmp_path):
    with pytest.raises(LoadError):
        load_csv(write(tmp_path, ""))


# --- splits and windows ---

def test_chronological_split_lengths():
    ds = dataset(np.arange(20.0).reshape(10, 2))
    train, val, test = chrono_split(ds, SplitSpec())
    assert (train.rows, val.rows, test.rows) == (7, 1, 2)
    np.testing.assert_array_equal(np.vstack([train.values, val.values, test.values]), ds.values)


def test_split_counts_and_invalid_fractions():
    ds = dataset(np.zeros((100, 1)))
    train, val, test = chrono_split(ds, SplitSpec(counts=(60, 20, 20)))
    assert (train.rows, val.rows, test.rows) == (60, 20, 20)
    with pytest.raises(ContractError):
        SplitSpec(0.7, 0.2, 0.2)
    with pytest.raises(ContractError):
        SplitSpec(0.9, 0.0, 0.1)


def test_window_count_arithmetic():
    split = dataset(np.zeros((140, 3)))
    ws = make_windows(split, 96, 8)
    assert len(ws) == 37
    assert ws.x.shape == (37, 96, 3) and ws.y.shape == (37, 8, 3)


def test_windows_do_not_straddle_and_reassemble(rng):
    split = dataset(rng.normal(size=(30, 2)))
    ws = make_windows(split, 5, 3)
    np.testing.assert_array_equal(ws.x[4], split.values[4:9])
    np.testing.assert_array_equal(ws.y[4], split.values[9:12])
    np.testing.assert_array_equal(ws.reassemble(), split.values)


def test_short_split_names_the_split():
    _, val, _ = chrono_split(dataset(np.zeros((100, 2))))
    with pytest.raises(ContractError, match="val"):
        make_windows(val, 8, 4)


def test_standardised_train_split_has_unit_scale(rng):
    ds = dataset(rng.normal(3.0, 5.0, size=(300, 3)))
    train, _, _ = chrono_split(ds)
    scaler = fit_scaler(train)
    z = scaler.transform(train.values)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-10)

    ws = standardize(make_windows(train, 10, 5), scaler)
    np.testing.assert_allclose(ws.reassemble(), z, atol=1e-12)


def test_val_and_test_rows_never_leak_into_training_statistics(rng):
    values = rng.normal(size=(300, 3))
    altered = values.copy()
    altered[250:] *= 100.0
    a = prepare(dataset(values), 20, 5)
    b = prepare(dataset(altered), 20, 5)
    np.testing.assert_array_equal(a.scaler.mean, b.scaler.mean)
    np.testing.assert_array_equal(a.scaler.std, b.scaler.std)
    np.testing.assert_array_equal(pearson_corr(a.train_values).R, pearson_corr(b.train_values).R)


def test_prepare_without_validation_windows(rng, caplog):
    with caplog.at_level(logging.WARNING, logger="dataio"):
        prep = prepare(dataset(rng.normal(size=(100, 2))), 8, 4)
    assert prep.val_ws is None
    assert len(prep.test_ws) == 20 - 12 + 1


# --- few-shot ---

def test_subsample_fraction_prefixes():
    train = dataset(np.arange(1000.0).reshape(1000, 1))
    assert subsample_fraction(train, 1.0).rows == 1000
    assert subsample_fraction(train, 0.05).rows == 50
    small = dataset(np.arange(100.0).reshape(100, 1))
    np.testing.assert_array_equal(subsample_fraction(small, 0.2).values, small.values[:20])


def test_subsample_fraction_errors():
    train = dataset(np.zeros((100, 1)))
    with pytest.raises(ContractError):
        subsample_fraction(train, 0.0)
    with pytest.raises(ContractError):
        subsample_fraction(train, 1.5)
    with pytest.raises(ContractError):
        subsample_fraction(train, 0.05, min_rows=10)


# --- synthetic data ---

def test_independent_channels_are_uncorrelated():
    ds = synth_generate(SynthSpec(channels=4, length=2000, coupling="independent", noise=1.0, seed=7))
    R = pearson_corr(ds.values).R
    off = ~np.eye(4, dtype=bool)
    assert np.abs(R[off]).max() < 0.2


def test_lagged_copy_without_lag_or_noise_is_identical():
    ds = synth_generate(SynthSpec(channels=3, length=200, coupling="lagged_copy", lag=0, noise=0.0))
    np.testing.assert_allclose(pearson_corr(ds.values).R, 1.0, atol=1e-12)


def test_lagged_copy_shifts_channels_by_the_lag():
    ds = synth_generate(SynthSpec(channels=3, length=100, coupling="lagged_copy", lag=3, noise=0.0))
    np.testing.assert_array_equal(ds.values[3:, 1], ds.values[:-3, 0])
    np.testing.assert_array_equal(ds.values[6:, 2], ds.values[:-6, 0])


def test_synthetic_data_is_deterministic():
    spec = SynthSpec(channels=4, length=2000, coupling="lagged_copy", lag=3, noise=0.1, seed=7)
    np.testing.assert_array_equal(synth_generate(spec).values, synth_generate(spec).values)
    other = synth_generate(SynthSpec(channels=4, length=2000, lag=3, noise=0.1, seed=8))
    assert not np.array_equal(synth_generate(spec).values, other.values)


def test_mixture_weights_control_coupling():
    ds = synth_generate(SynthSpec(channels=3, length=2000, coupling="mixture",
                                  weights=(1.0, 1.0, 0.0), noise=0.0, seed=2))
    R = pearson_corr(ds.values).R_abs
    assert R[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert R[0, 2] < R[0, 1]


def test_synth_spec_parsing():
    spec = SynthSpec.parse("lagged_copy:C=4,T=2000,tau=3,sigma=0.1,seed=7")
    assert spec == SynthSpec(channels=4, length=2000, coupling="lagged_copy", lag=3, noise=0.1, seed=7)
    assert SynthSpec.parse("mixture:C=2,weights=0.5/1").weights == (0.5, 1.0)
    with pytest.raises(ContractError):
        SynthSpec.parse("lagged_copy:colour=red")


def test_invalid_synthetic_specs():
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(length=3, lag=3))
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(coupling="mixture", channels=2, weights=(0.5,)))
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(coupling="seasonal"))
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(noise=-1.0))


# --- missing values ---

def test_corrupt_zero_ratio_is_identity(rng):
    ds = dataset(rng.normal(size=(50, 3)))
    np.testing.assert_array_equal(corrupt_missing(ds, 0.0, seed=1).values, ds.values)


def test_corrupt_marks_the_requested_number_of_cells(rng):
    ds = dataset(rng.normal(size=(40, 5)))
    gaps = corrupt_missing(ds, 0.25, seed=3)
    assert int(np.isnan(gaps.values).sum()) == 50
    np.testing.assert_array_equal(np.isnan(corrupt_missing(ds, 0.25, seed=3).values),
                                  np.isnan(gaps.values))


def test_corrupt_rejects_bad_ratio_and_empty_channel():
    ds = dataset(np.ones((1, 2)))
    with pytest.raises(ContractError):
        corrupt_missing(ds, 1.0)
    with pytest.raises(ContractError):
        corrupt_missing(ds, 0.5, seed=0)


def test_interpolation_midpoint_and_edges():
    ds = dataset([[np.nan], [1.0], [np.nan], [3.0], [np.nan]])
    np.testing.assert_array_equal(linear_interpolate(ds).values[:, 0], [1.0, 1.0, 2.0, 3.0, 3.0])
    with pytest.raises(ContractError):
        linear_interpolate(dataset([[np.nan, 1.0], [np.nan, 2.0]]))


def test_quarter_missing_barely_moves_the_cd_ratio():
    ds = synth_generate(SynthSpec(channels=4, length=2000, coupling="lagged_copy", lag=3,
                                  noise=0.1, seed=7))
    clean = pearson_corr(ds.values).r_abs
    filled = linear_interpolate(corrupt_missing(ds, 0.25, seed=0))
    assert abs(pearson_corr(filled.values).r_abs - clean) <= 0.05
    assert math.isfinite(clean)
