"""Neural-network layers, losses, the Adam optimizer and model checkpoints.

Layers are thin wrappers over the autodiff ops in ``tensor``. Inference
(``training=False``) is pure and safe to share across threads; training
mutates parameters and is single-threaded per model. Dropout needs an
``rng`` when training; with ``training=False`` it is the identity.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import storage
from . import tensor as T
from .tensor import Tensor, _from_op


class Module:
    """Base layer. Subclasses implement ``forward(x, training, rng)``."""

    kind = "module"

    def parameters(self) -> list[Tensor]:
        return []

    def hyper(self) -> dict:
        return {}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x, training: bool = False, rng=None):
        return self.forward(x, training=training, rng=rng)

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError


def forward(module: Module, x, training: bool = False, rng=None) -> Tensor:
    """Run a module on a batched input tensor."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return module(x, training=training, rng=rng)


@contextmanager
def frozen(module: Module):
    """Temporarily stop tracking parameter gradients; input-gradient passes
    (attacks, attribution) skip the parameter-gradient work entirely."""
    params = module.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


class Dense(Module):
    """Fully connected layer, weight shaped (out, in)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features))
            b = np.zeros(out_features)
        else:
            k = 1.0 / np.sqrt(in_features)
            w = rng.uniform(-k, k, size=(out_features, in_features))
            b = rng.uniform(-k, k, size=out_features)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x, training=False, rng=None):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """2-D convolution (cross-correlation), no padding."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, rng=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
            b = np.zeros(out_channels)
        else:
            k = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-k, k, size=(out_channels, in_channels,
                                         kernel_size, kernel_size))
            b = rng.uniform(-k, k, size=out_channels)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride}

    def forward(self, x, training=False, rng=None):
        if x.data.ndim != 4 or x.data.shape[1] != self.in_channels:
            raise ValueError(
                f"conv2d layer: input shape {x.data.shape} incompatible, expected "
                f"(n, {self.in_channels}, h, w) with h, w >= {self.kernel_size}")
        if x.data.shape[2] < self.kernel_size or x.data.shape[3] < self.kernel_size:
            raise ValueError(
                f"conv2d layer: spatial dims {x.data.shape[2:]} smaller than "
                f"kernel {self.kernel_size}")
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class MaxPool2d(Module):
    kind = "maxpool2d"

    def __init__(self, kernel_size: int, stride: int | None = None):
        self.kernel_size = kernel_size
        self.stride = kernel_size if stride is None else stride

    def hyper(self):
        return {"kernel_size": self.kernel_size, "stride": self.stride}

    def forward(self, x, training=False, rng=None):
        if x.data.ndim != 4:
            raise ValueError(f"maxpool2d layer: expected (n,c,h,w), got {x.data.shape}")
        return T.maxpool2d(x, self.kernel_size, self.stride)


class ReLU(Module):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        return T.relu(x)


class Sigmoid(Module):
    kind = "sigmoid"

    def forward(self, x, training=False, rng=None):
        return T.sigmoid(x)


class Dropout(Module):
    """Inverted dropout: scales by 1/(1-p) at train time, identity at inference."""

    kind = "dropout"

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def hyper(self):
        return {"p": self.p}

    def forward(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.data.shape) >= self.p) / (1.0 - self.p)
        return T.mul(x, keep)


class Flatten(Module):
    kind = "flatten"

    def forward(self, x, training=False, rng=None):
        return T.reshape(x, (x.data.shape[0], -1))


class Sequential(Module):
    kind = "sequential"

    def __init__(self, layers: list[Module]):
        self.layers = list(layers)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer(x, training=training, rng=rng)
        return x

    def forward_slice(self, x, start: int, stop: int | None = None,
                      training: bool = False, rng=None):
        """Run only layers[start:stop]; used for hidden-feature taps."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for layer in self.layers[start:stop]:
            x = layer(x, training=training, rng=rng)
        return x


# losses ---------------------------------------------------------------------

def loss_mse(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.shape != tgt.shape:
        raise ValueError(f"mse: shape mismatch {pred.data.shape} vs {tgt.shape}")
    return T.tensor_mean(T.square(T.sub(pred, target)))


def loss_bce(pred, target) -> Tensor:
    """Mean binary cross-entropy on probabilities in the open interval (0, 1)."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.shape != tgt.shape:
        raise ValueError(f"bce: shape mismatch {pred.data.shape} vs {tgt.shape}")
    if np.any(pred.data <= 0.0) or np.any(pred.data >= 1.0):
        raise ValueError("bce: predictions must lie strictly inside (0, 1); "
                         "apply a sigmoid first")
    one_minus = T.sub(1.0, pred)
    ll = T.add(T.mul(T.log(pred), tgt), T.mul(T.log(one_minus), 1.0 - tgt))
    return T.mul(T.tensor_mean(ll), -1.0)


def loss_bce_logits(logits, target) -> Tensor:
    """Numerically stable binary cross-entropy taken directly on logits.

    Same gradient as sigmoid followed by loss_bce, but immune to probability
    saturation, so it is the form used by training loops and attacks.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    tgt = np.asarray(target, dtype=np.float64)
    z = logits.data
    if z.shape != tgt.shape:
        raise ValueError(f"bce_logits: shape mismatch {z.shape} vs {tgt.shape}")
    val = np.logaddexp(0.0, z) - z * tgt
    n = val.size

    def grad_fn(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((p - tgt) * (g / n),)

    return _from_op(np.asarray(val.mean()), (logits,), grad_fn)


def loss_kl_gaussian(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) = -0.5 * sum(1 + logvar - mu^2 - exp(logvar)).

    For 2-D inputs the per-sample sums are averaged over the leading batch axis.
    """
    if not isinstance(mu, Tensor):
        mu = Tensor(mu)
    if not isinstance(logvar, Tensor):
        logvar = Tensor(logvar)
    if mu.data.shape != logvar.data.shape:
        raise ValueError(f"kl: shape mismatch {mu.data.shape} vs {logvar.data.shape}")
    term = T.sub(T.add(1.0, logvar), T.add(T.square(mu), T.exp(logvar)))
    batch = mu.data.shape[0] if mu.data.ndim >= 2 else 1
    return T.mul(T.tensor_sum(term), -0.5 / batch)


# optimizer -------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment state for the Adam update."""

    def __init__(self, params: list[Tensor], lr: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(state: AdamState, params: list[Tensor]) -> None:
    """One Adam update with bias correction; clears parameter gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient; "
                             "run backward() first")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None


# checkpointing ---------------------------------------------------------------

_LAYER_BUILDERS = {
    "dense": lambda h: Dense(h["in_features"], h["out_features"]),
    "conv2d": lambda h: Conv2d(h["in_channels"], h["out_channels"],
                               h["kernel_size"], h["stride"]),
    "maxpool2d": lambda h: MaxPool2d(h["kernel_size"], h["stride"]),
    "relu": lambda h: ReLU(),
    "sigmoid": lambda h: Sigmoid(),
    "dropout": lambda h: Dropout(h["p"]),
    "flatten": lambda h: Flatten(),
}


def module_spec(module: Module) -> dict:
    """JSON-able topology tree (kinds and hyper settings, no parameters)."""
    if isinstance(module, Sequential):
        return {"kind": "sequential", "layers": [module_spec(l) for l in module.layers]}
    return {"kind": module.kind, "hyper": module.hyper()}


def module_from_spec(spec: dict) -> Module:
    if spec["kind"] == "sequential":
        return Sequential([module_from_spec(s) for s in spec["layers"]])
    return _LAYER_BUILDERS[spec["kind"]](spec.get("hyper", {}))


def save_model(module: Module, path, extra_meta: dict | None = None) -> None:
    """Write a single-file checkpoint; save -> load round-trips bit-exactly."""
    meta = {"format": "shapshield-model", "version": 1,
            "topology": module_spec(module)}
    if extra_meta:
        meta["extra"] = extra_meta
    arrays = {f"p{i}": p.data for i, p in enumerate(module.parameters())}
    storage.write_blob(path, meta, arrays)


def load_model(path) -> tuple[Module, dict]:
    meta, arrays = storage.read_blob(path)
    if meta.get("format") != "shapshield-model":
        raise ValueError(f"{path}: not a model checkpoint")
    module = module_from_spec(meta["topology"])
    params = module.parameters()
    if len(params) != len(arrays):
        raise ValueError(f"{path}: checkpoint has {len(arrays)} arrays for "
                         f"{len(params)} parameters")
    for i, p in enumerate(params):
        stored = arrays[f"p{i}"]
        if stored.shape != p.data.shape:
            raise ValueError(f"{path}: parameter {i} shape {stored.shape} "
                             f"does not match topology {p.data.shape}")
        p.data = stored
    return module, meta.get("extra", {})
