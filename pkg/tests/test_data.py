import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapshield.data import (Dataset, NormStats, gen_images, gen_tabular,
                             load_dataset, save_dataset, standardize,
                             unstandardize)


class TestGenTabular:
    def test_seed_reproducibility(self):
        a = gen_tabular(200, 10, seed=3)
        b = gen_tabular(200, 10, seed=3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.train_idx, b.train_idx)

    def test_supports_62_features(self):
        ds = gen_tabular(400, 62, seed=1)
        assert ds.features.shape == (400, 62)

    def test_label_balance(self):
        ds = gen_tabular(2000, 12, seed=5)
        frac = ds.labels.mean()
        assert abs(frac - 0.5) <= 0.05

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ValueError):
            gen_tabular(50, 10, seed=0)
        with pytest.raises(ValueError):
            gen_tabular(200, 3, seed=0)

    def test_majority_of_dims_are_noise(self):
        ds = gen_tabular(1000, 40, seed=2)
        # informative dims have class-conditional mean gaps; count them
        mu1 = ds.features[ds.labels == 1].mean(axis=0)
        mu0 = ds.features[ds.labels == 0].mean(axis=0)
        informative = np.abs(mu1 - mu0) > 0.5
        assert informative.sum() <= 20


class TestGenImages:
    def test_pixels_in_unit_interval(self):
        ds = gen_images(120, 20, 1, seed=0)
        assert ds.features.min() >= 0.0
        assert ds.features.max() <= 1.0

    def test_seed_reproducibility(self):
        a = gen_images(120, 16, 1, seed=9)
        b = gen_images(120, 16, 1, seed=9)
        assert np.array_equal(a.features, b.features)

    def test_blob_core_class_gap(self):
        ds = gen_images(600, 28, 1, seed=4)
        side = 28
        organ = 0.36 * side
        sigma = side / 7.0
        yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        core = ((yy - organ) ** 2 + (xx - organ) ** 2) <= (sigma / 2.0) ** 2
        gap = (ds.features[ds.labels == 1][:, :, core].mean()
               - ds.features[ds.labels == 0][:, :, core].mean())
        assert gap >= 0.2

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ValueError):
            gen_images(120, 8, 1, seed=0)
        with pytest.raises(ValueError):
            gen_images(50, 28, 1, seed=0)


class TestSplit:
    @given(st.integers(min_value=100, max_value=3000))
    @settings(max_examples=20, deadline=None)
    def test_split_ratio_and_disjointness(self, n):
        ds = gen_tabular(n, 6, seed=11)
        assert len(set(ds.train_idx) & set(ds.test_idx)) == 0
        assert len(ds.train_idx) + len(ds.test_idx) == n
        assert abs(len(ds.test_idx) - 0.2 * n) <= 1.0

    def test_norm_stats_from_train_only(self):
        ds = gen_tabular(500, 8, seed=13)
        train = ds.features[ds.train_idx]
        assert np.allclose(ds.norm_stats.mean, train.mean(axis=0))
        assert np.allclose(ds.norm_stats.std, train.std(axis=0))


class TestStandardize:
    def test_train_set_becomes_zero_mean_unit_var(self):
        ds = gen_tabular(800, 10, seed=7)
        z = standardize(ds.features[ds.train_idx], ds.norm_stats)
        assert np.max(np.abs(z.mean(axis=0))) <= 1e-9
        assert np.max(np.abs(z.var(axis=0) - 1.0)) <= 1e-6

    def test_constant_feature_maps_to_zero(self):
        x = np.ones((5, 3))
        x[:, 1] = 7.0
        stats = NormStats(mean=x.mean(axis=0), std=x.std(axis=0))
        z = standardize(x, stats)
        assert np.array_equal(z, np.zeros((5, 3)))

    def test_hand_computed_example(self):
        x = np.array([[1.0], [3.0]])
        stats = NormStats(mean=np.array([2.0]), std=np.array([1.0]))
        assert np.array_equal(standardize(x, stats), [[-1.0], [1.0]])

    @given(st.integers(min_value=0, max_value=10 ** 6))
    @settings(max_examples=15, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((20, 5)) * rng.uniform(0.5, 3.0, size=5)
        stats = NormStats(mean=x.mean(axis=0), std=x.std(axis=0))
        back = unstandardize(standardize(x, stats), stats)
        assert np.max(np.abs(back - x)) <= 1e-9


class TestExportImport:
    def test_tabular_csv_round_trip(self, tmp_path):
        ds = gen_tabular(150, 5, seed=2)
        path = tmp_path / "ds.csv"
        save_dataset(ds, path)
        back = load_dataset(path, "tabular")
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.train_idx, ds.train_idx)
        assert np.array_equal(back.test_idx, ds.test_idx)

    def test_raster_round_trip(self, tmp_path):
        ds = gen_images(120, 16, 1, seed=2)
        path = tmp_path / "ds.ras"
        save_dataset(ds, path)
        back = load_dataset(path, "image")
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.test_idx, ds.test_idx)
