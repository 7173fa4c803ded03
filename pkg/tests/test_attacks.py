import numpy as np
import pytest

from shapshield import nn
from shapshield.attacks import (AttackConfig, AttackResult, cw_attack,
                                cw_attack_batch, load_attack_set, pgd_attack,
                                pgd_attack_batch, run_attack_batch,
                                saliency_sparse_attack,
                                saliency_sparse_attack_batch, save_attack_set)
from shapshield.data import gen_images, gen_tabular
from shapshield.nn import Dense, Sequential
from shapshield.tensor import Tensor
from shapshield.victims import (VictimConfig, VictimModel, model_space,
                                predict_labels, train_victim)


def linear_victim(w, bias=0.0):
    layer = Dense(len(w), 1)
    layer.weight.data = np.asarray(w, dtype=np.float64).reshape(1, -1)
    layer.bias.data = np.array([bias])
    return VictimModel(net=Sequential([layer]), task="tabular", feature_tap=0)


@pytest.fixture(scope="module")
def image_victim():
    ds = gen_images(700, 28, 1, seed=7)
    victim = train_victim(ds, VictimConfig(seed=1, lr=0.005, target_accuracy=0.90))
    x = model_space(ds)
    x_test, y_test = x[ds.test_idx], ds.test_labels()
    keep = predict_labels(victim, x_test) == y_test
    return victim, x_test[keep][:100], y_test[keep][:100]


@pytest.fixture(scope="module")
def tabular_victim():
    ds = gen_tabular(1200, 62, seed=7)
    victim = train_victim(ds, VictimConfig(seed=1, lr=0.01, target_accuracy=0.85))
    x = model_space(ds)
    x_test, y_test = x[ds.test_idx], ds.test_labels()
    keep = predict_labels(victim, x_test) == y_test
    return victim, x_test[keep], y_test[keep]


class TestPgd:
    def test_zero_epsilon_changes_nothing(self, tabular_victim):
        victim, x, y = tabular_victim
        cfg = AttackConfig(method="pgd", epsilon=0.0, clamp=(-6, 6))
        r = pgd_attack(victim, x[0], y[0], cfg)
        assert np.array_equal(r.adversarial, r.original)
        assert not r.success
        assert r.l2_norm == 0.0

    def test_linear_victim_one_step_sign_pattern(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(6)
        victim = linear_victim(w)
        cfg = AttackConfig(method="pgd", epsilon=10.0, step_size=0.5, max_iters=1,
                           clamp=(-100, 100))
        for y in (0, 1):
            x = (0.3 if y == 1 else -0.3) * w / np.linalg.norm(w) ** 2 * 10
            r = pgd_attack(victim, x, y, cfg)
            step = r.adversarial - r.original
            expected = 0.5 * -(2 * y - 1) * np.sign(w)
            assert np.allclose(step, expected)

    def test_linf_budget_and_clamp(self, image_victim):
        victim, x, y = image_victim
        cfg = AttackConfig(method="pgd", epsilon=0.05, clamp=(0, 1))
        results = pgd_attack_batch(victim, x[:24], y[:24], cfg)
        for r in results:
            assert r.linf_norm <= 0.05 + 1e-9
            assert r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0

    def test_success_flips_label(self, image_victim):
        victim, x, y = image_victim
        cfg = AttackConfig(method="pgd", epsilon=0.1, clamp=(0, 1))
        results = pgd_attack_batch(victim, x[:32], y[:32], cfg)
        assert any(r.success for r in results)
        for r in results:
            if r.success:
                a = predict_labels(victim, r.adversarial[None, ...])[0]
                o = predict_labels(victim, r.original[None, ...])[0]
                assert a != o

    def test_high_success_at_default_epsilon(self, image_victim):
        victim, x, y = image_victim
        cfg = AttackConfig(method="pgd", epsilon=0.1, clamp=(0, 1))
        results = pgd_attack_batch(victim, x, y, cfg)
        assert np.mean([r.success for r in results]) >= 0.95

    def test_monotone_in_epsilon(self, image_victim):
        victim, x, y = image_victim
        rates = []
        for eps in (0.02, 0.05, 0.1):
            cfg = AttackConfig(method="pgd", epsilon=eps, clamp=(0, 1))
            results = pgd_attack_batch(victim, x[:60], y[:60], cfg)
            rates.append(np.mean([r.success for r in results]))
        assert rates[0] <= rates[1] <= rates[2]


class TestCw:
    def test_l2_norm_self_consistency(self, image_victim):
        victim, x, y = image_victim
        cfg = AttackConfig(method="cw", max_iters=60, binary_search_steps=3,
                           clamp=(0, 1))
        results = cw_attack_batch(victim, x[:12], y[:12], cfg)
        for r in results:
            recomputed = float(np.sqrt(((r.adversarial - r.original) ** 2).sum()))
            assert abs(r.l2_norm - recomputed) <= 1e-9

    def test_already_misclassified_input_keeps_zero_perturbation(self):
        victim = linear_victim(np.array([1.0, 1.0]))
        # logit of x is negative, so the victim says 0; attack target label 1
        x = np.array([-2.0, -1.0])
        cfg = AttackConfig(method="cw", max_iters=40, binary_search_steps=2,
                           clamp=(-10, 10))
        r = cw_attack(victim, x, 1, cfg)
        assert r.l2_norm <= 1e-6

    def test_cw_l2_below_pgd_l2(self, image_victim):
        victim, x, y = image_victim
        pgd = pgd_attack_batch(victim, x, y,
                               AttackConfig(method="pgd", epsilon=0.1, clamp=(0, 1)))
        cw = cw_attack_batch(victim, x, y,
                             AttackConfig(method="cw", clamp=(0, 1)))
        pgd_l2 = np.median([r.l2_norm for r in pgd if r.success])
        cw_l2 = np.median([r.l2_norm for r in cw if r.success])
        assert cw_l2 < pgd_l2


class TestSaliencySparse:
    def test_budget_respected(self, tabular_victim):
        victim, x, y = tabular_victim
        cfg = AttackConfig(method="saliency_sparse", max_perturbed_features=5,
                           clamp=(-6, 6))
        results = saliency_sparse_attack_batch(victim, x[:60], y[:60], cfg)
        for r in results:
            assert np.sum(r.adversarial != r.original) <= 5

    def test_zero_gradient_model_fails_cleanly(self):
        victim = linear_victim(np.zeros(5), bias=1.0)
        cfg = AttackConfig(method="saliency_sparse", max_perturbed_features=3,
                           clamp=(-6, 6))
        r = saliency_sparse_attack(victim, np.ones(5), 1, cfg)
        assert not r.success
        assert np.array_equal(r.adversarial, r.original)

    def test_success_rate_and_accuracy_drop(self, tabular_victim):
        victim, x, y = tabular_victim
        cfg = AttackConfig(method="saliency_sparse", max_perturbed_features=5,
                           clamp=(-6, 6))
        results = saliency_sparse_attack_batch(victim, x, y, cfg)
        rate = np.mean([r.success for r in results])
        assert rate >= 0.40
        # successful adversarials swapped into the test set crush accuracy
        post = np.where([r.success for r in results], 0.0, 1.0).mean()
        assert post < 0.55

    def test_image_task_rejected(self, image_victim):
        victim, x, y = image_victim
        cfg = AttackConfig(method="saliency_sparse", clamp=(0, 1))
        with pytest.raises(ValueError, match="tabular"):
            saliency_sparse_attack(victim, x[0], y[0], cfg)


class TestPersistence:
    def test_attack_set_round_trip(self, tabular_victim, tmp_path):
        victim, x, y = tabular_victim
        cfg = AttackConfig(method="saliency_sparse", max_perturbed_features=4,
                           clamp=(-6, 6))
        results = run_attack_batch(victim, x[:20], y[:20], cfg)
        path = tmp_path / "attacks.ssb"
        save_attack_set(path, results, cfg, y[:20])
        back, cfg2, labels = load_attack_set(path)
        assert cfg2.method == cfg.method
        assert cfg2.clamp == cfg.clamp
        assert np.array_equal(labels, y[:20])
        for a, b in zip(results, back):
            assert np.array_equal(a.adversarial, b.adversarial)
            assert a.success == b.success
            assert a.iterations_used == b.iterations_used

    def test_unknown_method_rejected(self, tabular_victim):
        victim, x, y = tabular_victim
        with pytest.raises(ValueError, match="unknown attack"):
            run_attack_batch(victim, x[:2], y[:2], AttackConfig(method="fgsm"))
