"""Victim classifiers: an MLP for tabular data and a small CNN for images.

Victims are binary classifiers with a single logit; probability >= 0.5 maps
to label 1 (the boundary tie classifies as positive). Tabular victims
operate on standardized features ("model space"); callers standardize with
the dataset's train-split statistics before prediction or attack. Image
victims consume raw pixels in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, NormStats, standardize
from .nn import Sequential
from .tensor import Tensor, backward


@dataclass
class VictimConfig:
    epochs: int = 40
    min_epochs: int = 8           # finish maturing features before early stop
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    target_accuracy: float = 0.85
    stop_margin: float = 0.03     # train on until target + margin, then stop
    label_smoothing: float = 0.1  # caps confidence so margins stay finite


@dataclass
class VictimModel:
    net: Sequential
    task: str                     # "tabular" | "image"
    feature_tap: int              # index of the final hidden layer in net.layers
    input_stats: NormStats | None = None
    meta: dict = field(default_factory=dict)


def _build_tabular_net(m: int, rng) -> tuple[Sequential, int]:
    net = Sequential([
        nn.Dense(m, 32, rng), nn.ReLU(),
        nn.Dense(32, 16, rng), nn.ReLU(),
        nn.Dense(16, 1, rng),
    ])
    return net, 3   # ReLU after the 16-wide layer


def _build_image_net(channels: int, side: int, rng) -> tuple[Sequential, int]:
    s = (side - 4) // 2
    s = (s - 4) // 2
    flat = 16 * s * s
    net = Sequential([
        nn.Conv2d(channels, 8, 5, rng=rng), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 5, rng=rng), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Dense(flat, 32, rng), nn.ReLU(),
        nn.Dense(32, 1, rng),
    ])
    return net, 8   # ReLU after the 32-wide dense layer


def model_space(ds: Dataset) -> np.ndarray:
    """Features in the space the victim consumes."""
    if ds.kind == "tabular":
        return standardize(ds.features, ds.norm_stats)
    return ds.features


def train_victim(ds: Dataset, cfg: VictimConfig | None = None) -> VictimModel:
    """Train a victim until its test accuracy reaches the configured target.

    Raises if the target is not met within the epoch budget, since every
    downstream experiment assumes an accurate victim.
    """
    cfg = cfg or VictimConfig()
    y_tr = ds.train_labels()
    if len(np.unique(y_tr)) < 2:
        raise ValueError("train_victim: the train split must contain both classes")

    x_all = model_space(ds)
    x_tr, x_te = x_all[ds.train_idx], x_all[ds.test_idx]
    y_te = ds.test_labels()

    rng = np.random.default_rng(cfg.seed)
    if ds.kind == "tabular":
        net, tap = _build_tabular_net(x_tr.shape[1], rng)
    else:
        net, tap = _build_image_net(x_tr.shape[1], x_tr.shape[2], rng)

    model = VictimModel(net=net, task=ds.kind, feature_tap=tap,
                        input_stats=ds.norm_stats if ds.kind == "tabular" else None)
    params = net.parameters()
    opt = nn.AdamState(params, lr=cfg.lr)
    n = x_tr.shape[0]
    s = cfg.label_smoothing
    targets = y_tr.astype(np.float64) * (1.0 - 2.0 * s) + s
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = Tensor(x_tr[idx])
            logits = net(xb, training=True, rng=rng).reshape((-1,))
            loss = nn.loss_bce_logits(logits, targets[idx])
            net.zero_grad()
            backward(loss)
            nn.adam_step(opt, params)
        acc = accuracy(model, x_te, y_te)
        if epoch + 1 >= cfg.min_epochs and acc >= cfg.target_accuracy + cfg.stop_margin:
            break
    final_acc = accuracy(model, x_te, y_te)
    if final_acc < cfg.target_accuracy:
        raise RuntimeError(
            f"train_victim: test accuracy {final_acc:.3f} below target "
            f"{cfg.target_accuracy:.2f} after {cfg.epochs} epochs; increase the "
            f"epoch budget or adjust the learning rate")
    model.meta = {"test_accuracy": final_acc, "seed": cfg.seed, "lr": cfg.lr,
                  "epochs": cfg.epochs}
    return model


def _as_batch(m: VictimModel, x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single_ndim = 1 if m.task == "tabular" else 3
    if arr.ndim == single_ndim:
        return arr[None, ...], True
    if arr.ndim == single_ndim + 1:
        return arr, False
    raise ValueError(f"predict: input shape {arr.shape} does not match the "
                     f"{m.task} task")


def predict(m: VictimModel, x):
    """Return (logit, probability, label); label = 1 iff probability >= 0.5.

    Accepts a single sample or a batch; scalar outputs for a single sample.
    """
    batch, single = _as_batch(m, x)
    logits = m.net(Tensor(batch)).data.reshape(-1)
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = (probs >= 0.5).astype(np.int64)
    if single:
        return float(logits[0]), float(probs[0]), int(labels[0])
    return logits, probs, labels


def predict_labels(m: VictimModel, x) -> np.ndarray:
    batch, _ = _as_batch(m, x)
    logits = m.net(Tensor(batch)).data.reshape(-1)
    return (logits >= 0.0).astype(np.int64)


def accuracy(m: VictimModel, x, y) -> float:
    return float((predict_labels(m, x) == np.asarray(y)).mean())


def hidden_features(m: VictimModel, x) -> np.ndarray:
    """Activations at the victim's final hidden layer (the feature tap)."""
    if not 0 <= m.feature_tap < len(m.net.layers):
        raise ValueError(f"hidden_features: invalid tap {m.feature_tap}")
    batch, single = _as_batch(m, x)
    feats = m.net.forward_slice(Tensor(batch), 0, m.feature_tap + 1).data
    feats = feats.reshape(feats.shape[0], -1)
    return feats[0] if single else feats


def head_from_tap(m: VictimModel, hidden: np.ndarray) -> np.ndarray:
    """Logits produced by running only the layers after the feature tap."""
    out = m.net.forward_slice(Tensor(hidden), m.feature_tap + 1).data
    return out.reshape(-1)


def save_victim(m: VictimModel, path) -> None:
    extra = {"task": m.task, "feature_tap": m.feature_tap, "meta": m.meta}
    if m.input_stats is not None:
        extra["input_mean"] = m.input_stats.mean.tolist()
        extra["input_std"] = m.input_stats.std.tolist()
    nn.save_model(m.net, path, extra_meta=extra)


def load_victim(path) -> VictimModel:
    net, extra = nn.load_model(path)
    stats = None
    if "input_mean" in extra:
        stats = NormStats(mean=np.asarray(extra["input_mean"]),
                          std=np.asarray(extra["input_std"]))
    return VictimModel(net=net, task=extra["task"], feature_tap=extra["feature_tap"],
                       input_stats=stats, meta=extra.get("meta", {}))
