import numpy as np
import pytest

from shapshield import nn
from shapshield import tensor as T
from shapshield.nn import (AdamState, Dense, Conv2d, Dropout, Flatten, MaxPool2d,
                           ReLU, Sequential, Sigmoid, adam_step, forward,
                           load_model, loss_bce, loss_bce_logits, loss_kl_gaussian,
                           loss_mse, save_model)
from shapshield.tensor import Tensor, backward


def finite_diff_grad(fn, x0, h=1e-4):
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    xf = x0.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy(); xp[i] += h
        xm = xf.copy(); xm[i] -= h
        flat[i] = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))) / (2 * h)
    return g


def max_rel_err(a, b):
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


class TestForward:
    def test_relu_values(self):
        out = forward(ReLU(), np.array([[-1.0, 0.0, 2.0]]))
        assert np.array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_dense_identity(self):
        layer = Dense(3, 3)
        layer.weight.data = np.eye(3)
        x = np.array([[0.5, -1.5, 2.0]])
        assert np.array_equal(forward(layer, x).data, x)

    def test_conv_all_ones(self):
        conv = Conv2d(1, 1, 3)
        conv.weight.data = np.ones((1, 1, 3, 3))
        out = forward(conv, np.ones((1, 1, 5, 5)))
        assert out.data.shape == (1, 1, 3, 3)
        assert np.allclose(out.data, 9.0)

    def test_dense_shape_mismatch_message(self):
        with pytest.raises(ValueError, match="dense"):
            forward(Dense(4, 2), np.ones((1, 5)))

    def test_conv_channel_mismatch_message(self):
        with pytest.raises(ValueError, match="conv2d"):
            forward(Conv2d(3, 4, 3), np.ones((1, 1, 8, 8)))

    def test_dropout_eval_is_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 6))
        out = forward(Dropout(0.5), x, training=False)
        assert np.array_equal(out.data, x)

    def test_dropout_train_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            forward(Dropout(0.5), np.ones((2, 2)), training=True)

    def test_dropout_probability_range(self):
        with pytest.raises(ValueError):
            Dropout(1.0)

    def test_sequential_composition(self):
        rng = np.random.default_rng(3)
        a = Dense(5, 4, rng)
        b = Dense(4, 2, rng)
        x = rng.standard_normal((3, 5))
        seq = Sequential([a, b])
        lhs = forward(seq, x).data
        rhs = forward(b, forward(a, x)).data
        assert np.array_equal(lhs, rhs)

    def test_forward_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        net = Sequential([Dense(6, 6, rng), ReLU(), Dropout(0.3), Dense(6, 1, rng)])
        x = rng.standard_normal((4, 6))
        out1 = net(Tensor(x), training=True, rng=np.random.default_rng(9)).data
        out2 = net(Tensor(x), training=True, rng=np.random.default_rng(9)).data
        assert np.array_equal(out1, out2)

    def test_all_outputs_finite(self):
        rng = np.random.default_rng(11)
        net = Sequential([Conv2d(1, 4, 3, rng=rng), ReLU(), MaxPool2d(2),
                          Flatten(), Dense(4 * 3 * 3, 1, rng), Sigmoid()])
        out = net(Tensor(rng.standard_normal((2, 1, 8, 8))))
        assert np.all(np.isfinite(out.data))


class TestBackward:
    def test_square_rule(self):
        x = Tensor(3.0, requires_grad=True)
        backward(T.square(x))
        assert np.isclose(x.grad, 6.0)

    def test_sigmoid_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        backward(T.sigmoid(x))
        assert np.isclose(x.grad, 0.25)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(T.square(x))

    def test_empty_tape_rejected(self):
        with pytest.raises(ValueError):
            backward(Tensor(1.0, requires_grad=True))

    def test_grads_accumulate_until_cleared(self):
        x = Tensor(2.0, requires_grad=True)
        backward(T.square(x))
        backward(T.square(x))
        assert np.isclose(x.grad, 8.0)
        x.zero_grad()
        backward(T.square(x))
        assert np.isclose(x.grad, 4.0)

    def test_two_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        net = Sequential([Dense(5, 4, rng), ReLU(), Dense(4, 1, rng), Sigmoid()])
        x0 = rng.standard_normal((2, 5))

        def loss_of(x):
            return T.tensor_sum(T.square(net(Tensor(x)))).item()

        xt = Tensor(x0, requires_grad=True)
        backward(T.tensor_sum(T.square(net(xt))))
        fd = finite_diff_grad(loss_of, x0)
        assert max_rel_err(xt.grad, fd) <= 1e-4


@pytest.mark.parametrize("make_net,shape", [
    (lambda rng: Sequential([Dense(6, 4, rng), ReLU(), Dense(4, 1, rng)]), (3, 6)),
    (lambda rng: Sequential([Dense(6, 4, rng), Sigmoid(), Dense(4, 1, rng)]), (3, 6)),
    (lambda rng: Sequential([Conv2d(2, 3, 3, rng=rng), ReLU(), Flatten(),
                             Dense(3 * 6 * 6, 1, rng)]), (2, 2, 8, 8)),
    (lambda rng: Sequential([Conv2d(1, 2, 3, rng=rng), MaxPool2d(2), Flatten(),
                             Dense(2 * 3 * 3, 1, rng)]), (2, 1, 8, 8)),
])
def test_gradient_check_every_layer_kind(make_net, shape):
    # central differences at h=1e-4; inputs drawn away from ReLU kinks and
    # pool ties by construction (continuous random values)
    rng = np.random.default_rng(42)
    net = make_net(rng)
    x0 = rng.standard_normal(shape)

    def loss_of(x):
        return T.tensor_sum(T.square(net(Tensor(x)))).item()

    xt = Tensor(x0, requires_grad=True)
    backward(T.tensor_sum(T.square(net(xt))))
    fd = finite_diff_grad(loss_of, x0)
    assert max_rel_err(xt.grad, fd) <= 1e-4


def test_maxpool_tie_routes_to_first_element():
    x0 = np.zeros((1, 1, 2, 2))          # all equal: 4-way tie
    xt = Tensor(x0, requires_grad=True)
    backward(T.tensor_sum(T.maxpool2d(xt, 2)))
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0           # first element in row-major order
    assert np.array_equal(xt.grad, expected)


class TestLosses:
    def test_mse_identical_inputs(self):
        x = np.array([1.0, 2.0, 3.0])
        assert loss_mse(Tensor(x), x).item() == 0.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_mse(Tensor(np.ones(3)), np.ones(4))

    def test_bce_half(self):
        val = loss_bce(Tensor([0.5]), np.array([1.0])).item()
        assert np.isclose(val, np.log(2.0))

    def test_bce_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            loss_bce(Tensor([1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            loss_bce(Tensor([0.0]), np.array([0.0]))

    def test_bce_logits_matches_bce(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal(6)
        t = rng.uniform(0.1, 0.9, size=6)
        p = 1.0 / (1.0 + np.exp(-z))
        assert np.isclose(loss_bce_logits(Tensor(z), t).item(),
                          loss_bce(Tensor(p), t).item())

    def test_kl_identical_gaussians(self):
        z = np.zeros(5)
        assert loss_kl_gaussian(Tensor(z), Tensor(z)).item() == 0.0

    def test_kl_closed_form(self):
        mu = np.array([0.5, -0.3])
        logvar = np.array([0.2, -0.1])
        expected = -0.5 * np.sum(1 + logvar - mu ** 2 - np.exp(logvar))
        assert np.isclose(loss_kl_gaussian(Tensor(mu), Tensor(logvar)).item(), expected)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        st = AdamState([p], lr=0.01)
        adam_step(st, [p])
        assert np.array_equal(p.data, [1.0, -2.0])
        assert st.step == 1

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        p.grad = np.array([0.3, -7.0])
        st = AdamState([p], lr=0.01)
        adam_step(st, [p])
        assert np.allclose(p.data, [-0.01, 0.01], atol=1e-6)
        assert p.grad is None   # cleared by the step

    def test_missing_grad_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError, match="gradient"):
            adam_step(AdamState([p]), [p])

    def test_quadratic_bowl_converges(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        st = AdamState([p], lr=0.01)
        for _ in range(500):
            loss = T.square(p).sum()
            p.grad = None
            backward(loss)
            adam_step(st, [p])
        assert abs(p.data[0]) < 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        net = Sequential([Conv2d(1, 3, 3, rng=rng), ReLU(), MaxPool2d(2),
                          Flatten(), Dense(3 * 3 * 3, 8, rng), ReLU(),
                          Dropout(0.4), Dense(8, 1, rng), Sigmoid()])
        path = tmp_path / "model.ssb"
        save_model(net, path)
        loaded, _ = load_model(path)
        for p0, p1 in zip(net.parameters(), loaded.parameters()):
            assert np.array_equal(p0.data, p1.data)
        path2 = tmp_path / "model2.ssb"
        save_model(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_forward_identical_after_reload(self, tmp_path):
        rng = np.random.default_rng(3)
        net = Sequential([Dense(4, 6, rng), ReLU(), Dense(6, 1, rng)])
        path = tmp_path / "m.ssb"
        save_model(net, path)
        loaded, _ = load_model(path)
        x = rng.standard_normal((5, 4))
        assert np.array_equal(net(Tensor(x)).data, loaded(Tensor(x)).data)
