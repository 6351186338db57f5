import numpy as np
import pytest

from chansplit import data
from chansplit.data import DataError, Scaler


class TestLoadCsv:
    def test_reads_column(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("Date,Open,Close\n1,2.0,3.5\n2,2.1,3.6\n3,2.2,3.7\n")
        np.testing.assert_array_equal(data.load_csv(p, "Close"), [3.5, 3.6, 3.7])

    def test_missing_column_lists_available(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("Date,Open\n1,2\n")
        with pytest.raises(DataError, match="Open"):
            data.load_csv(p, "Close")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            data.load_csv(tmp_path / "nope.csv", "x")

    def test_non_numeric_names_row(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("v\n1\nabc\n3\n")
        with pytest.raises(DataError, match="row 3"):
            data.load_csv(p, "v")

    def test_delimiter(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("a;v\n0;1.5\n1;2.5\n")
        np.testing.assert_array_equal(data.load_csv(p, "v", delimiter=";"), [1.5, 2.5])


class TestWindow:
    def test_instance_count(self):
        X, y = data.window(np.arange(6516.0), 30)
        assert X.shape == (6486, 30) and y.shape == (6486,)

    def test_boundary(self):
        X, y = data.window(np.arange(31.0), 30)
        assert X.shape == (1, 30)
        np.testing.assert_array_equal(X[0], np.arange(30.0))
        assert y[0] == 30.0

    def test_features_strictly_precede_label(self):
        s = np.arange(100.0)
        X, y = data.window(s, 30)
        np.testing.assert_array_equal(X[:, -1] + 1, y)

    def test_too_short(self):
        with pytest.raises(DataError):
            data.window(np.arange(30.0), 30)


class TestScaler:
    def test_endpoints(self):
        s = Scaler.fit([2.0, 4.0, 6.0])
        np.testing.assert_array_equal(s.transform([2.0, 4.0, 6.0]), [-1.0, 0.0, 1.0])

    def test_round_trip(self, rng):
        x = rng.normal(size=100) * 7 + 3
        s = Scaler.fit(x)
        np.testing.assert_allclose(s.inverse(s.transform(x)), x, atol=1e-12)

    def test_constant_rejected(self):
        with pytest.raises(DataError):
            Scaler.fit([1.0, 1.0])

    def test_out_of_range_ok(self):
        norm, _ = data.normalize(np.array([0.0, 1.0, 5.0]), fit_range=(0, 2))
        assert norm[2] == 9.0

    def test_mse_to_raw(self):
        s = Scaler(0.0, 4.0)
        x, y = np.array([0.0, 1.0]), np.array([0.5, 3.0])
        raw_mse = np.mean((x - y) ** 2)
        assert s.mse_to_raw(np.mean((s.transform(x) - s.transform(y)) ** 2)) == pytest.approx(raw_mse)


class TestSplit:
    def test_counts_use_case_one(self):
        assert data.split_counts(6486, (0.6, 0.1, 0.3)) == (3892, 648, 1946)

    def test_small(self):
        assert data.split_counts(10, (0.7, 0.0, 0.3)) == (7, 0, 3)

    def test_exhaustive(self):
        for n in (1, 7, 100, 6486, 3234):
            assert sum(data.split_counts(n, (0.6, 0.1, 0.3))) == n

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            data.split_counts(10, (0.5, 0.6))

    def test_dataset_counts_and_scaling(self):
        raw = data.synth_series("ar1", 6516, seed=0)
        ds = data.split(raw)
        assert ds.counts == (3892, 648, 1946)
        b = ds.bounds
        assert b[0] < b[1] < b[2] < b[3]
        train_vals = np.concatenate([ds.train[0].ravel(), ds.train[1]])
        assert train_vals.min() == pytest.approx(-1.0) and train_vals.max() == pytest.approx(1.0)

    def test_two_way_split_carves_validation(self):
        ds = data.split(data.synth_series("ar1", 3264, seed=0), (0.7, 0.3), val_from_train=0.1)
        # 3234 instances; 70/30 -> 2264/970; last 10% of training (226) validates
        assert ds.counts == (2038, 226, 970)

    def test_splits_chronological(self):
        ds = data.split(np.arange(200.0), (0.6, 0.1, 0.3), N=30)
        tr, va, te = (ds.scaler.inverse(p[1]) for p in (ds.train, ds.val, ds.test))
        assert tr.max() < va.min() and va.max() < te.min()


class TestSynth:
    def test_deterministic(self):
        assert data.synth_series("ar1", 500, seed=3).tobytes() == data.synth_series("ar1", 500, seed=3).tobytes()

    def test_geometric_decay(self):
        x = data.synth_series("ar1", 100, noise_std=0.0, x0=1.0)
        np.testing.assert_allclose(x, 0.95 ** np.arange(100), rtol=1e-12)

    def test_autocorrelation(self):
        x = data.synth_series("ar1", 100_000, seed=1)
        r = np.corrcoef(x[:-1], x[1:])[0, 1]
        assert abs(r - 0.95) < 0.01

    def test_sine_noise(self):
        x = data.synth_series("sine_noise", 5000, seed=0)
        resid = x - np.sin(2 * np.pi * np.arange(5000) / 50)
        assert abs(resid.std() - 0.1) < 0.005

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            data.synth_series("walk", 100)

    def test_csv_round_trip(self, tmp_path):
        x = data.synth_series("ar1", 64, seed=2)
        data.write_series_csv(tmp_path / "s.csv", x)
        np.testing.assert_array_equal(data.load_csv(tmp_path / "s.csv", "value"), x)


def test_device_partition_blocks():
    parts = data.device_partition(300, 2, block=64)
    np.testing.assert_array_equal(parts[0][:64], np.arange(64))
    np.testing.assert_array_equal(parts[1][:64], np.arange(64, 128))
    assert sorted(np.concatenate(parts).tolist()) == list(range(300))
