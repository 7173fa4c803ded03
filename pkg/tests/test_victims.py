import numpy as np
import pytest

from shapshield.data import gen_images, gen_tabular
from shapshield.victims import (VictimConfig, VictimModel, accuracy,
                                hidden_features, load_victim, model_space,
                                predict, predict_labels, save_victim,
                                train_victim)


@pytest.fixture(scope="module")
def tabular_setup():
    ds = gen_tabular(2000, 62, seed=7)
    victim = train_victim(ds, VictimConfig(seed=1, lr=0.01, target_accuracy=0.85))
    return ds, victim


@pytest.fixture(scope="module")
def image_setup():
    ds = gen_images(700, 28, 1, seed=7)
    victim = train_victim(ds, VictimConfig(seed=1, lr=0.005, target_accuracy=0.90))
    return ds, victim


class TestTraining:
    def test_tabular_victim_reaches_target(self, tabular_setup):
        ds, victim = tabular_setup
        x = model_space(ds)
        assert accuracy(victim, x[ds.test_idx], ds.test_labels()) >= 0.85

    def test_image_victim_reaches_target(self, image_setup):
        ds, victim = image_setup
        x = model_space(ds)
        assert accuracy(victim, x[ds.test_idx], ds.test_labels()) >= 0.90

    def test_retrain_same_seed_identical_parameters(self):
        ds = gen_tabular(400, 10, seed=3)
        cfg = VictimConfig(seed=5, epochs=10, target_accuracy=0.85)
        a = train_victim(ds, cfg)
        b = train_victim(ds, cfg)
        for pa, pb in zip(a.net.parameters(), b.net.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_single_class_train_split_rejected(self):
        ds = gen_tabular(200, 6, seed=1)
        ds.labels[:] = 1
        with pytest.raises(ValueError, match="both classes"):
            train_victim(ds, VictimConfig(seed=0))

    def test_unreachable_target_raises_with_advice(self):
        ds = gen_tabular(200, 6, seed=1)
        cfg = VictimConfig(seed=0, epochs=1, min_epochs=1, target_accuracy=0.999)
        with pytest.raises(RuntimeError, match="epoch budget|learning rate"):
            train_victim(ds, cfg)


class TestPredict:
    def test_boundary_probability_rule(self, tabular_setup):
        _, victim = tabular_setup
        # force a zero logit by zeroing the final layer
        clone_w = victim.net.layers[-1].weight.data.copy()
        clone_b = victim.net.layers[-1].bias.data.copy()
        victim.net.layers[-1].weight.data = np.zeros_like(clone_w)
        victim.net.layers[-1].bias.data = np.zeros_like(clone_b)
        logit, prob, label = predict(victim, np.zeros(62))
        victim.net.layers[-1].weight.data = clone_w
        victim.net.layers[-1].bias.data = clone_b
        assert logit == 0.0
        assert prob == 0.5
        assert label == 1           # ties classify as positive

    def test_large_logit_probability(self, tabular_setup):
        _, victim = tabular_setup
        clone_b = victim.net.layers[-1].bias.data.copy()
        victim.net.layers[-1].bias.data = clone_b + 10.0
        _, prob, label = predict(victim, np.zeros(62))
        victim.net.layers[-1].bias.data = clone_b
        assert prob > 0.9999 or prob > 0.99   # bias shift dominates
        assert label == 1

    def test_batch_equals_per_sample(self, tabular_setup):
        ds, victim = tabular_setup
        x = model_space(ds)[ds.test_idx][:16]
        logits, probs, labels = predict(victim, x)
        for i in range(len(x)):
            l1, p1, y1 = predict(victim, x[i])
            assert np.isclose(l1, logits[i])
            assert np.isclose(p1, probs[i])
            assert y1 == labels[i]

    def test_label_probability_consistency(self, image_setup):
        ds, victim = image_setup
        x = model_space(ds)[ds.test_idx][:50]
        _, probs, labels = predict(victim, x)
        assert np.array_equal(labels, (probs >= 0.5).astype(np.int64))

    def test_shape_mismatch_rejected(self, tabular_setup):
        _, victim = tabular_setup
        with pytest.raises(ValueError):
            predict(victim, np.zeros((2, 2, 2, 2, 2)))


class TestHiddenFeatures:
    def test_width_matches_tap_layer(self, tabular_setup):
        ds, victim = tabular_setup
        x = model_space(ds)[ds.test_idx][:4]
        feats = hidden_features(victim, x)
        assert feats.shape == (4, victim.net.layers[victim.feature_tap - 1].out_features)

    def test_deterministic(self, image_setup):
        ds, victim = image_setup
        x = model_space(ds)[ds.test_idx][:3]
        assert np.array_equal(hidden_features(victim, x), hidden_features(victim, x))

    def test_sensitive_to_input_change(self, tabular_setup):
        ds, victim = tabular_setup
        x = model_space(ds)[ds.test_idx][0]
        base = hidden_features(victim, x)
        bumped = x.copy()
        bumped[np.argmax(np.abs(victim.net.layers[0].weight.data).sum(axis=0))] += 0.5
        assert not np.array_equal(base, hidden_features(victim, bumped))

    def test_invalid_tap_rejected(self, tabular_setup):
        ds, victim = tabular_setup
        broken = VictimModel(net=victim.net, task=victim.task, feature_tap=99)
        with pytest.raises(ValueError, match="tap"):
            hidden_features(broken, model_space(ds)[:1])


class TestCheckpoint:
    def test_victim_round_trip(self, tabular_setup, tmp_path):
        ds, victim = tabular_setup
        path = tmp_path / "victim.ssb"
        save_victim(victim, path)
        back = load_victim(path)
        assert back.task == victim.task
        assert back.feature_tap == victim.feature_tap
        x = model_space(ds)[ds.test_idx][:8]
        assert np.array_equal(predict_labels(victim, x), predict_labels(back, x))
        assert np.allclose(back.input_stats.mean, victim.input_stats.mean)
