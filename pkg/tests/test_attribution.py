import numpy as np
import pytest

from shapshield import nn
from shapshield.attribution import (AttributionCache, AttributionMap,
                                    BackgroundSet, ModelFunction, exact_shap,
                                    gradient_shap, loo_attribution, sampling_shap)
from shapshield.harness import spearman_correlation
from shapshield.nn import Dense, ReLU, Sequential, frozen
from shapshield.tensor import Tensor, backward
from shapshield import tensor as T


def linear_model(w):
    w = np.asarray(w, dtype=np.float64)
    return ModelFunction(lambda X: X @ w,
                         grad=lambda X: np.tile(w, (len(X), 1)),
                         input_shape=(len(w),), model_id="linear")


def mlp_model(m, seed, zero_dim=None):
    rng = np.random.default_rng(seed)
    net = Sequential([Dense(m, 12, rng), ReLU(), Dense(12, 1, rng)])
    if zero_dim is not None:
        net.layers[0].weight.data[:, zero_dim] = 0.0

    def fn(X):
        return net(Tensor(X)).data.reshape(-1)

    def grad(X):
        with frozen(net):
            xt = Tensor(X, requires_grad=True)
            backward(T.tensor_sum(net(xt)))
        return xt.grad

    return ModelFunction(fn, grad=grad, input_shape=(m,), model_id=f"mlp{seed}")


class TestExactShap:
    def test_linear_closed_form(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(7)
        x = rng.standard_normal(7)
        bg = BackgroundSet(rng.standard_normal((12, 7)))
        amap = exact_shap(linear_model(w), x, bg)
        expected = w * (x - bg.samples.mean(axis=0))
        assert np.max(np.abs(amap.values - expected)) <= 1e-9

    def test_efficiency_axiom(self):
        f = mlp_model(8, seed=3)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(8)
        bg = BackgroundSet(rng.standard_normal((6, 8)))
        amap = exact_shap(f, x, bg)
        fx = f(x[None, :])[0]
        assert abs(amap.values.sum() - (fx - amap.base_value)) <= 1e-9

    def test_dummy_axiom(self):
        f = mlp_model(8, seed=5, zero_dim=2)
        rng = np.random.default_rng(2)
        x = rng.standard_normal(8)
        bg = BackgroundSet(rng.standard_normal((6, 8)))
        amap = exact_shap(f, x, bg)
        assert abs(amap.values[2]) <= 1e-9

    def test_feature_cap(self):
        f = linear_model(np.ones(16))
        bg = BackgroundSet(np.zeros((2, 16)))
        with pytest.raises(ValueError, match="sampling_shap"):
            exact_shap(f, np.ones(16), bg)


class TestSamplingShap:
    def test_matches_exact_within_tolerance(self):
        f = mlp_model(10, seed=7)
        rng = np.random.default_rng(3)
        x = rng.standard_normal(10)
        bg = BackgroundSet(rng.standard_normal((8, 10)))
        exact = exact_shap(f, x, bg).values
        approx = sampling_shap(f, x, bg, n_permutations=200, seed=0).values
        assert np.mean(np.abs(approx - exact)) <= 0.05 * np.max(np.abs(exact))

    def test_seed_determinism(self):
        f = mlp_model(6, seed=9)
        rng = np.random.default_rng(4)
        x = rng.standard_normal(6)
        bg = BackgroundSet(rng.standard_normal((5, 6)))
        a = sampling_shap(f, x, bg, n_permutations=20, seed=5).values
        b = sampling_shap(f, x, bg, n_permutations=20, seed=5).values
        assert np.array_equal(a, b)

    def test_symmetry(self):
        f = linear_model(np.array([1.0, 1.0]))
        bg = BackgroundSet(np.array([[0.3, 0.3], [-0.3, -0.3]]))
        amap = sampling_shap(f, np.array([1.0, 1.0]), bg, n_permutations=50, seed=1)
        assert abs(amap.values[0] - amap.values[1]) <= 1e-9


class TestGradientShap:
    def test_zero_path_when_background_is_input(self):
        f = mlp_model(5, seed=11)
        x = np.random.default_rng(5).standard_normal(5)
        bg = BackgroundSet(x[None, :].copy())
        amap = gradient_shap(f, x, bg, n_path_samples=8, seed=0)
        assert np.max(np.abs(amap.values)) <= 1e-12

    def test_linear_exact_for_any_path_count(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal(6)
        x = rng.standard_normal(6)
        bg = BackgroundSet(rng.standard_normal((7, 6)))
        expected = w * (x - bg.samples.mean(axis=0))
        for n_path in (1, 3):
            amap = gradient_shap(linear_model(w), x, bg, n_path, seed=2)
            assert np.max(np.abs(amap.values - expected)) <= 1e-9

    def test_completeness_on_smooth_model(self):
        f = mlp_model(8, seed=13)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(8)
        bg = BackgroundSet(rng.standard_normal((8, 8)))
        amap = gradient_shap(f, x, bg, n_path_samples=64, seed=3)
        fx = f(x[None, :])[0]
        target = fx - f(bg.flat).mean()
        assert abs(amap.values.sum() - target) <= 0.05 * abs(target)

    def test_batch_matches_single(self):
        from shapshield.attribution import gradient_shap_batch
        f = mlp_model(6, seed=15)
        rng = np.random.default_rng(8)
        xs = rng.standard_normal((3, 6))
        bg = BackgroundSet(rng.standard_normal((5, 6)))
        singles = [gradient_shap(f, x, bg, 4, seed=4).values for x in xs]
        batch = [m.values for m in gradient_shap_batch(f, xs, bg, 4, seed=4)]
        for a, b in zip(singles, batch):
            assert np.array_equal(a, b)


class TestLoo:
    def test_constant_model_gives_zeros(self):
        f = ModelFunction(lambda X: np.full(len(X), 3.0), input_shape=(4,))
        amap = loo_attribution(f, np.ones(4))
        assert np.array_equal(amap.values, np.zeros(4))

    def test_single_coordinate_model(self):
        f = ModelFunction(lambda X: X[:, 0], input_shape=(3,))
        amap = loo_attribution(f, np.array([2.5, 1.0, -1.0]), baseline_value=0.0)
        assert np.allclose(amap.values, [2.5, 0.0, 0.0])

    def test_cost_is_m_plus_one_rows(self):
        f = ModelFunction(lambda X: X.sum(axis=1), input_shape=(9,))
        loo_attribution(f, np.ones(9))
        assert f.calls == 10


def test_estimator_agreement_with_oracle():
    rhos_s, rhos_g = [], []
    for seed in range(4):
        f = mlp_model(10, seed=100 + seed)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(10)
        bg = BackgroundSet(rng.standard_normal((8, 10)))
        exact = exact_shap(f, x, bg).values
        rhos_s.append(spearman_correlation(
            exact, sampling_shap(f, x, bg, 200, seed=seed).values))
        rhos_g.append(spearman_correlation(
            exact, gradient_shap(f, x, bg, 64, seed=seed).values))
    assert np.mean(rhos_s) >= 0.9
    assert np.mean(rhos_g) >= 0.9


class TestCache:
    def test_round_trip(self, tmp_path):
        cache = AttributionCache(tmp_path / "maps")
        amap = AttributionMap(values=np.arange(6.0).reshape(2, 3), base_value=0.25,
                              estimator="gradient", background_id="abc",
                              params={"n_path_samples": 4, "seed": 1})
        key = cache.key("model", amap.values, "gradient", 1,
                        {"n_path_samples": 4})
        assert cache.load(key) is None
        cache.store(key, amap)
        back = cache.load(key)
        assert np.array_equal(back.values, amap.values)
        assert back.base_value == amap.base_value
        assert back.estimator == "gradient"

    def test_key_sensitivity(self, tmp_path):
        cache = AttributionCache(tmp_path)
        x = np.ones(4)
        k1 = cache.key("m", x, "gradient", 1, {})
        assert k1 != cache.key("m", x, "gradient", 2, {})
        assert k1 != cache.key("m", x + 1e-12, "gradient", 1, {})
        assert k1 != cache.key("other", x, "gradient", 1, {})
