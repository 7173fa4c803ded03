"""Adversarial-sample detectors.

Supervised detectors (an MLP and a CNN) classify standardized attribution
maps directly. Semi-supervised detectors train an autoencoder (plain or
variational) on genuine maps only and hand the per-feature reconstruction
errors to an RBF SVM, which is the only stage that ever sees adversarial
data; this is what lets them generalize to unseen attack types. Two
baselines operate on the victim itself: kernel density of final-hidden-layer
features, and leave-one-out attribution statistics (input and hidden layer)
with a logistic read-out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import storage
from .attribution import AttributionMap, ModelFunction, loo_attribution, victim_probability_fn
from .data import NormStats
from .nn import Module, Sequential
from .svm import SvmModel, smo_train, rbf_kernel
from .tensor import Tensor, backward
from .victims import VictimModel, hidden_features, head_from_tap, predict_labels

SEMI_SUPERVISED_KINDS = {"shap_ae_svm", "shap_vae_svm"}
SUPERVISED_KINDS = {"shap_mlp", "shap_conv"}
BASELINE_KINDS = {"kernel_density", "ml_loo"}


@dataclass
class DetectorModel:
    kind: str
    nets: dict[str, Module]
    svm: SvmModel | None
    norm_stats: NormStats
    threshold: float
    estimator: str                 # attribution provenance for map-based kinds
    input_shape: tuple
    extra: dict = field(default_factory=dict)


@dataclass
class DetectorVerdict:
    score: float                   # higher = more adversarial
    label: str                     # "genuine" | "adversarial"


def _verdict(score: float, threshold: float) -> DetectorVerdict:
    return DetectorVerdict(score=float(score),
                           label="adversarial" if score >= threshold else "genuine")


# shared training loops ---------------------------------------------------------

def _train_binary_net(net: Sequential, x: np.ndarray, y: np.ndarray,
                      lr: float, epochs: int, batch_size: int, rng) -> None:
    params = net.parameters()
    opt = nn.AdamState(params, lr=lr)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = net(Tensor(x[idx]), training=True, rng=rng).reshape((-1,))
            loss = nn.loss_bce_logits(logits, y[idx])
            net.zero_grad()
            backward(loss)
            nn.adam_step(opt, params)


def _stack_maps(maps, expect_shape=None) -> np.ndarray:
    arr = np.stack([m.values if isinstance(m, AttributionMap) else m for m in maps]) \
        if not isinstance(maps, np.ndarray) else maps
    arr = np.asarray(arr, dtype=np.float64)
    if expect_shape is not None and arr.shape[1:] != tuple(expect_shape):
        raise ValueError(f"maps shaped {arr.shape[1:]} do not match detector "
                         f"input {tuple(expect_shape)}")
    return arr


# supervised detectors ------------------------------------------------------------

def train_shap_mlp(genuine_maps, adversarial_maps, hidden_dim: int = 160,
                   lr: float = 0.01, *, epochs: int = 40, batch_size: int = 32,
                   seed: int = 0, norm_stats: NormStats | None = None,
                   estimator: str = "gradient") -> DetectorModel:
    """Single-hidden-layer MLP over flattened standardized attribution maps."""
    xg = _stack_maps(genuine_maps)
    xa = _stack_maps(adversarial_maps)
    if xg.shape[0] == 0 or xa.shape[0] == 0:
        raise ValueError("train_shap_mlp needs both genuine and adversarial maps")
    input_shape = xg.shape[1:]
    xg = xg.reshape(xg.shape[0], -1)
    xa = xa.reshape(xa.shape[0], -1)
    m = xg.shape[1]
    x = np.concatenate([xg, xa])
    y = np.concatenate([np.zeros(len(xg)), np.ones(len(xa))])

    rng = np.random.default_rng(seed)
    net = Sequential([nn.Dense(m, hidden_dim, rng), nn.ReLU(),
                      nn.Dense(hidden_dim, 1, rng)])
    _train_binary_net(net, x, y, lr, epochs, batch_size, rng)
    return DetectorModel(kind="shap_mlp", nets={"classifier": net}, svm=None,
                         norm_stats=norm_stats or NormStats(np.zeros(m), np.ones(m)),
                         threshold=0.5, estimator=estimator, input_shape=input_shape)


def shap_conv_flat_dim(height: int, width: int) -> int:
    """Flattened width after the two conv/pool stages of the CNN detector."""
    h = (height - 4) // 2
    h = (h - 4) // 2
    w = (width - 4) // 2
    w = (w - 4) // 2
    return 32 * h * w


def build_shap_conv_net(channels: int, height: int, width: int, rng) -> Sequential:
    flat = shap_conv_flat_dim(height, width)
    return Sequential([
        nn.Conv2d(channels, 16, 5, rng=rng), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 5, rng=rng), nn.ReLU(), nn.MaxPool2d(2),
        nn.Dropout(0.4),
        nn.Flatten(),
        nn.Dense(flat, 256, rng), nn.ReLU(),
        nn.Dense(256, 84, rng), nn.ReLU(),
        nn.Dropout(0.4),
        nn.Dense(84, 1, rng),
    ])


def train_shap_conv(genuine_maps, adversarial_maps, *, lr: float = 0.005,
                    epochs: int = 30, batch_size: int = 32, seed: int = 0,
                    norm_stats: NormStats | None = None,
                    estimator: str = "gradient") -> DetectorModel:
    """CNN over image-shaped attribution maps: two 5x5 conv/pool stages into
    a 256-84-1 dense head, dropout 0.4 after the second pool and the second
    dense layer."""
    xg = _stack_maps(genuine_maps)
    xa = _stack_maps(adversarial_maps)
    if xg.shape[0] == 0 or xa.shape[0] == 0:
        raise ValueError("train_shap_conv needs both genuine and adversarial maps")
    if xg.ndim != 4:
        raise ValueError(f"train_shap_conv needs image-shaped maps (n, c, h, w), "
                         f"got {xg.shape}")
    input_shape = xg.shape[1:]
    x = np.concatenate([xg, xa])
    y = np.concatenate([np.zeros(len(xg)), np.ones(len(xa))])

    rng = np.random.default_rng(seed)
    net = build_shap_conv_net(input_shape[0], input_shape[1], input_shape[2], rng)
    _train_binary_net(net, x, y, lr, epochs, batch_size, rng)
    flat = shap_conv_flat_dim(input_shape[1], input_shape[2])
    return DetectorModel(kind="shap_conv", nets={"classifier": net}, svm=None,
                         norm_stats=norm_stats or NormStats(np.zeros(flat), np.ones(flat)),
                         threshold=0.5, estimator=estimator, input_shape=input_shape)


# semi-supervised detectors --------------------------------------------------------

def _autoencoder_dims(m: int, code: int) -> tuple[int, int]:
    # geometric interpolation between the input width and the code size
    r = (code / m) ** (1.0 / 3.0)
    h1 = max(code + 1, int(round(m * r)))
    h2 = max(code + 1, int(round(m * r * r)))
    return h1, h2


def train_shap_autoencoder(genuine_maps, variational: bool = False, *,
                           code_size: int | None = None, lr: float = 0.01,
                           epochs: int = 60, batch_size: int = 32, seed: int = 0,
                           norm_stats: NormStats | None = None,
                           estimator: str = "gradient",
                           adversarial_maps=None) -> DetectorModel:
    """Train the reconstruction stage on genuine standardized maps only.

    The returned detector has no SVM yet; attach one with train_recon_svm.
    Passing adversarial maps here is a contract violation and raises.
    """
    if adversarial_maps is not None:
        raise ValueError("the autoencoder stage is semi-supervised and must be "
                         "trained on genuine maps only")
    x = _stack_maps(genuine_maps)
    if x.shape[0] == 0:
        raise ValueError("train_shap_autoencoder needs at least one genuine map")
    input_shape = x.shape[1:]
    x = x.reshape(x.shape[0], -1)
    m = x.shape[1]
    code = code_size if code_size is not None else (5 if variational else 20)
    h1, h2 = _autoencoder_dims(m, code)

    rng = np.random.default_rng(seed)
    enc_out = 2 * code if variational else code
    encoder = Sequential([nn.Dense(m, h1, rng), nn.ReLU(),
                          nn.Dense(h1, h2, rng), nn.ReLU(),
                          nn.Dense(h2, enc_out, rng)])
    decoder = Sequential([nn.Dense(code, h2, rng), nn.ReLU(),
                          nn.Dense(h2, h1, rng), nn.ReLU(),
                          nn.Dense(h1, m, rng)])
    params = encoder.parameters() + decoder.parameters()
    opt = nn.AdamState(params, lr=lr)
    n = x.shape[0]
    from . import tensor as T
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = Tensor(x[idx])
            enc = encoder(xb)
            if variational:
                mu, logvar = _split_heads(enc, code)
                noise = rng.standard_normal((len(idx), code))
                z = T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), noise))
                recon = decoder(z)
                loss = T.add(nn.loss_mse(recon, x[idx]),
                             nn.loss_kl_gaussian(mu, logvar))
            else:
                recon = decoder(enc)
                loss = nn.loss_mse(recon, x[idx])
            encoder.zero_grad()
            decoder.zero_grad()
            backward(loss)
            nn.adam_step(opt, params)

    kind = "shap_vae_svm" if variational else "shap_ae_svm"
    return DetectorModel(kind=kind, nets={"encoder": encoder, "decoder": decoder},
                         svm=None,
                         norm_stats=norm_stats or NormStats(np.zeros(m), np.ones(m)),
                         threshold=0.0, estimator=estimator, input_shape=input_shape,
                         extra={"code_size": code})


def _split_heads(enc, code: int):
    """Split a (n, 2*code) encoding into mean and log-variance tensors."""
    from . import tensor as T
    n = enc.data.shape[0]
    both = T.reshape(enc, (n, 2, code))
    return _slice_head(both, 0, n, code), _slice_head(both, 1, n, code)


def _slice_head(both, head: int, n: int, code: int):
    from .tensor import _from_op

    def grad_fn(g):
        full = np.zeros((n, 2, code))
        full[:, head, :] = g
        return (full,)

    return _from_op(both.data[:, head, :], (both,), grad_fn)


def _encode_mean(det: DetectorModel, x: np.ndarray) -> np.ndarray:
    enc = det.nets["encoder"](Tensor(x)).data
    if det.kind == "shap_vae_svm":
        code = det.extra["code_size"]
        return enc.reshape(len(x), 2, code)[:, 0, :]
    return enc


def reconstruction_features(det: DetectorModel, maps) -> np.ndarray:
    """Per-feature squared reconstruction error; the SVM input space.

    The vector's sum equals feature_count * MSE of the reconstruction.
    """
    if det.kind not in SEMI_SUPERVISED_KINDS:
        raise ValueError(f"reconstruction_features needs an autoencoder "
                         f"detector, got kind {det.kind!r}")
    single = isinstance(maps, AttributionMap) or (
        isinstance(maps, np.ndarray) and maps.shape == tuple(det.input_shape))
    if single:
        maps = [maps]
    x = _stack_maps(maps, det.input_shape).reshape(len(maps), -1)
    z = _encode_mean(det, x)
    recon = det.nets["decoder"](Tensor(z)).data
    err = (x - recon) ** 2
    return err[0] if single else err


def train_svm(features_genuine: np.ndarray, features_adversarial: np.ndarray,
              C: float = 1.0, gamma: float | None = None) -> SvmModel:
    """RBF SVM via SMO; gamma defaults to 1/M over the feature dimension."""
    xg = np.atleast_2d(features_genuine)
    xa = np.atleast_2d(features_adversarial)
    if xg.shape[0] == 0 or xa.shape[0] == 0:
        raise ValueError("train_svm needs both classes nonempty")
    x = np.concatenate([xg, xa])
    y = np.concatenate([-np.ones(len(xg)), np.ones(len(xa))])
    return smo_train(x, y, C=C, gamma=gamma)


def train_recon_svm(det: DetectorModel, genuine_maps, adversarial_maps,
                    C: float = 1.0) -> DetectorModel:
    """Complete a semi-supervised detector: SVM over reconstruction errors.

    The error features are standardized with the genuine set's statistics
    before the SVM sees them (the same mean-0/variance-1 normalization every
    other learned stage gets); raw squared-error scales otherwise saturate
    the RBF kernel and collapse the decision function to its bias.
    """
    feats_g = reconstruction_features(det, genuine_maps)
    feats_a = reconstruction_features(det, adversarial_maps)
    mean = feats_g.mean(axis=0)
    std = feats_g.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    det.extra["recon_mean"] = mean
    det.extra["recon_std"] = std
    det.svm = train_svm((feats_g - mean) / std, (feats_a - mean) / std, C=C)
    return det


def _svm_features(det: DetectorModel, maps) -> np.ndarray:
    feats = np.atleast_2d(reconstruction_features(det, maps))
    if "recon_mean" in det.extra:
        feats = (feats - det.extra["recon_mean"]) / det.extra["recon_std"]
    return feats


# kernel-density baseline -----------------------------------------------------------

def _log_gaussian_kde(points: np.ndarray, queries: np.ndarray,
                      bandwidth: float) -> np.ndarray:
    d = points.shape[1]
    d2 = (np.sum(queries * queries, axis=1)[:, None]
          + np.sum(points * points, axis=1)[None, :]
          - 2.0 * queries @ points.T)
    np.maximum(d2, 0.0, out=d2)
    logk = -d2 / (2.0 * bandwidth ** 2)
    mx = logk.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logk - mx).sum(axis=1))
    norm = -np.log(points.shape[0]) - 0.5 * d * np.log(2.0 * np.pi * bandwidth ** 2)
    return lse + norm


def _fit_logistic(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6,
                  iters: int = 60) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Newton-fit logistic regression on standardized features."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xs = (x - mean) / std
    xb = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)
    w = np.zeros(xb.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(xb @ w)))
        grad = xb.T @ (p - y) / len(y) + ridge * w
        h = (xb * (p * (1 - p))[:, None]).T @ xb / len(y) + ridge * np.eye(len(w))
        step = np.linalg.solve(h, grad)
        w -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    return w[:-1], float(w[-1]), mean, std


def _logistic_prob(x: np.ndarray, w: np.ndarray, b: float,
                   mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    xs = (np.atleast_2d(x) - mean) / std
    return 1.0 / (1.0 + np.exp(-(xs @ w + b)))


def train_kernel_density_detector(victim: VictimModel, genuine_train: np.ndarray,
                                  adversarial_train: np.ndarray,
                                  bandwidth: float = 0.1, *,
                                  reference_samples: np.ndarray | None = None
                                  ) -> DetectorModel:
    """Density baseline: Gaussian KDE per predicted class over hidden-layer
    features of genuine training data, then a logistic read-out on the
    log-density of each sample under its predicted class."""
    if len(genuine_train) == 0 or len(adversarial_train) == 0:
        raise ValueError("train_kernel_density_detector needs both classes nonempty")
    ref = genuine_train if reference_samples is None else reference_samples
    ref_feats = hidden_features(victim, ref)
    ref_pred = predict_labels(victim, ref)
    class_feats = {}
    for cls in (0, 1):
        feats = ref_feats[ref_pred == cls]
        if feats.shape[0] == 0:
            raise ValueError(f"kernel density: no reference samples predicted "
                             f"as class {cls}")
        class_feats[cls] = feats

    def log_density(samples: np.ndarray) -> np.ndarray:
        feats = hidden_features(victim, samples)
        pred = predict_labels(victim, samples)
        out = np.empty(len(samples))
        for cls in (0, 1):
            sel = pred == cls
            if sel.any():
                out[sel] = _log_gaussian_kde(class_feats[cls], feats[sel], bandwidth)
        return out

    dens = np.concatenate([log_density(genuine_train),
                           log_density(adversarial_train)])[:, None]
    y = np.concatenate([np.zeros(len(genuine_train)), np.ones(len(adversarial_train))])
    w, b, mean, std = _fit_logistic(dens, y)
    return DetectorModel(
        kind="kernel_density", nets={"victim": victim.net}, svm=None,
        norm_stats=NormStats(mean=mean, std=std), threshold=0.5,
        estimator="hidden_density", input_shape=genuine_train.shape[1:],
        extra={"bandwidth": bandwidth, "lr_w": w, "lr_b": b,
               "class0_feats": class_feats[0], "class1_feats": class_feats[1],
               "victim_task": victim.task, "victim_tap": victim.feature_tap})


# leave-one-out baseline ---------------------------------------------------------------

MAX_LOO_TAPS = 4096


def _iqr(values: np.ndarray) -> float:
    return float(np.percentile(values, 75) - np.percentile(values, 25))


def _ml_loo_features(victim: VictimModel, samples: np.ndarray,
                     baseline: float) -> np.ndarray:
    """Per-sample [IQR(input LOO map), IQR(hidden LOO map)] features."""
    f = victim_probability_fn(victim, input_shape=samples.shape[1:])
    feats = np.empty((len(samples), 2))
    for i, x in enumerate(samples):
        pred = predict_labels(victim, x[None, ...])[0]
        inp_map = loo_attribution(f, x, baseline_value=baseline).values
        if pred == 0:
            inp_map = -inp_map
        hid = hidden_features(victim, x[None, ...])[0]
        rows = np.tile(hid, (hid.size + 1, 1))
        rows[np.arange(1, hid.size + 1), np.arange(hid.size)] = baseline
        logits = head_from_tap(victim, rows)
        probs = 1.0 / (1.0 + np.exp(-logits))
        if pred == 0:
            probs = 1.0 - probs
        hid_map = probs[0] - probs[1:]
        feats[i] = (_iqr(inp_map.reshape(-1)), _iqr(hid_map))
    return feats


def train_ml_loo_detector(victim: VictimModel, genuine_train: np.ndarray,
                          adversarial_train: np.ndarray, *,
                          baseline_value: float = 0.0) -> DetectorModel:
    """Leave-one-out baseline: inter-quartile range of the input-layer and
    hidden-layer LOO attribution maps, classified by logistic regression."""
    if len(genuine_train) == 0 or len(adversarial_train) == 0:
        raise ValueError("train_ml_loo_detector needs both classes nonempty")
    n_input = int(np.prod(genuine_train.shape[1:]))
    if n_input > MAX_LOO_TAPS:
        raise ValueError(
            f"ml_loo needs one forward pass per tap and {n_input} input taps "
            f"exceed {MAX_LOO_TAPS}; leave-one-out is impractical at this size")
    n_hidden = hidden_features(victim, genuine_train[:1]).shape[1]
    taps = n_input + n_hidden
    if taps > MAX_LOO_TAPS:
        raise ValueError(
            f"ml_loo needs one forward pass per tap and {taps} taps exceed "
            f"{MAX_LOO_TAPS}; leave-one-out is impractical at this input size")
    fg = _ml_loo_features(victim, genuine_train, baseline_value)
    fa = _ml_loo_features(victim, adversarial_train, baseline_value)
    return train_ml_loo_from_features(victim, fg, fa,
                                      baseline_value=baseline_value,
                                      input_shape=genuine_train.shape[1:])


# scoring ------------------------------------------------------------------------------

def _rebuild_victim(det: DetectorModel) -> VictimModel:
    return VictimModel(net=det.nets["victim"], task=det.extra["victim_task"],
                       feature_tap=det.extra["victim_tap"])


def detect(det: DetectorModel, map_or_sample) -> DetectorVerdict:
    """Score one input; label is adversarial iff score >= the detector's
    threshold. Map-based detectors refuse maps from a different attribution
    estimator than they were trained on."""
    if det.kind in SUPERVISED_KINDS or det.kind in SEMI_SUPERVISED_KINDS:
        amap = map_or_sample
        if not isinstance(amap, AttributionMap):
            raise ValueError(f"{det.kind} scores attribution maps, got "
                             f"{type(map_or_sample).__name__}")
        if amap.estimator != det.estimator:
            raise ValueError(f"{det.kind} was trained on {det.estimator!r} maps "
                             f"but received a {amap.estimator!r} map")
        if amap.values.shape != tuple(det.input_shape):
            raise ValueError(f"map shape {amap.values.shape} does not match "
                             f"detector input {tuple(det.input_shape)}")
        if det.kind == "shap_mlp":
            x = amap.values.reshape(1, -1)
            logit = det.nets["classifier"](Tensor(x)).data.reshape(-1)[0]
            return _verdict(1.0 / (1.0 + np.exp(-logit)), det.threshold)
        if det.kind == "shap_conv":
            x = amap.values[None, ...]
            logit = det.nets["classifier"](Tensor(x)).data.reshape(-1)[0]
            return _verdict(1.0 / (1.0 + np.exp(-logit)), det.threshold)
        if det.svm is None:
            raise ValueError(f"{det.kind} has no SVM attached yet; call "
                             f"train_recon_svm first")
        feats = _svm_features(det, amap)
        return _verdict(det.svm.decision(feats)[0], det.threshold)

    if det.kind == "kernel_density":
        sample = np.asarray(map_or_sample, dtype=np.float64)
        if sample.shape != tuple(det.input_shape):
            raise ValueError(f"sample shape {sample.shape} does not match "
                             f"detector input {tuple(det.input_shape)}")
        victim = _rebuild_victim(det)
        feats = hidden_features(victim, sample[None, ...])
        pred = predict_labels(victim, sample[None, ...])[0]
        pts = det.extra["class0_feats"] if pred == 0 else det.extra["class1_feats"]
        dens = _log_gaussian_kde(pts, feats, det.extra["bandwidth"])[:, None]
        prob = _logistic_prob(dens, det.extra["lr_w"], det.extra["lr_b"],
                              det.norm_stats.mean, det.norm_stats.std)[0]
        return _verdict(prob, det.threshold)

    if det.kind == "ml_loo":
        sample = np.asarray(map_or_sample, dtype=np.float64)
        if sample.shape != tuple(det.input_shape):
            raise ValueError(f"sample shape {sample.shape} does not match "
                             f"detector input {tuple(det.input_shape)}")
        victim = _rebuild_victim(det)
        feats = _ml_loo_features(victim, sample[None, ...],
                                 det.extra["baseline_value"])
        prob = _logistic_prob(feats, det.extra["lr_w"], det.extra["lr_b"],
                              det.norm_stats.mean, det.norm_stats.std)[0]
        return _verdict(prob, det.threshold)

    raise ValueError(f"unknown detector kind {det.kind!r}")


def detect_batch(det: DetectorModel, inputs) -> list[DetectorVerdict]:
    """Per-sample scoring; results are independent of batch order."""
    return [detect(det, item) for item in inputs]


# vectorized scoring used by the experiment harness --------------------------------

def score_maps(det: DetectorModel, maps_std: np.ndarray) -> np.ndarray:
    """Scores for a stack of standardized map values; matches detect()."""
    if det.kind not in SUPERVISED_KINDS and det.kind not in SEMI_SUPERVISED_KINDS:
        raise ValueError(f"score_maps does not apply to kind {det.kind!r}")
    x = _stack_maps(maps_std, det.input_shape)
    if det.kind == "shap_mlp":
        logits = det.nets["classifier"](Tensor(x.reshape(len(x), -1))).data.reshape(-1)
        return 1.0 / (1.0 + np.exp(-logits))
    if det.kind == "shap_conv":
        logits = det.nets["classifier"](Tensor(x)).data.reshape(-1)
        return 1.0 / (1.0 + np.exp(-logits))
    if det.svm is None:
        raise ValueError(f"{det.kind} has no SVM attached yet")
    return det.svm.decision(_svm_features(det, x))


def score_kernel_density(det: DetectorModel, samples: np.ndarray) -> np.ndarray:
    victim = _rebuild_victim(det)
    feats = hidden_features(victim, samples)
    pred = predict_labels(victim, samples)
    dens = np.empty(len(samples))
    for cls, key in ((0, "class0_feats"), (1, "class1_feats")):
        sel = pred == cls
        if sel.any():
            dens[sel] = _log_gaussian_kde(det.extra[key], feats[sel],
                                          det.extra["bandwidth"])
    return _logistic_prob(dens[:, None], det.extra["lr_w"], det.extra["lr_b"],
                          det.norm_stats.mean, det.norm_stats.std)


def score_ml_loo_features(det: DetectorModel, feats: np.ndarray) -> np.ndarray:
    return _logistic_prob(feats, det.extra["lr_w"], det.extra["lr_b"],
                          det.norm_stats.mean, det.norm_stats.std)


def train_ml_loo_from_features(victim: VictimModel, features_genuine: np.ndarray,
                               features_adversarial: np.ndarray, *,
                               baseline_value: float = 0.0,
                               input_shape: tuple = ()) -> DetectorModel:
    """ml_loo trainer over precomputed IQR feature tables; lets the harness
    share the expensive leave-one-out passes across seeds and folds."""
    x = np.concatenate([features_genuine, features_adversarial])
    y = np.concatenate([np.zeros(len(features_genuine)),
                        np.ones(len(features_adversarial))])
    w, b, mean, std = _fit_logistic(x, y)
    return DetectorModel(
        kind="ml_loo", nets={"victim": victim.net}, svm=None,
        norm_stats=NormStats(mean=mean, std=std), threshold=0.5,
        estimator="loo_iqr", input_shape=input_shape,
        extra={"baseline_value": baseline_value, "lr_w": w, "lr_b": b,
               "victim_task": victim.task, "victim_tap": victim.feature_tap})


# persistence ---------------------------------------------------------------------------

def save_detector(det: DetectorModel, path) -> None:
    meta = {"format": "shapshield-detector", "version": 1, "kind": det.kind,
            "threshold": det.threshold, "estimator": det.estimator,
            "input_shape": list(det.input_shape),
            "net_names": sorted(det.nets),
            "nets": {name: nn.module_spec(m) for name, m in det.nets.items()},
            "extra_scalars": {k: v for k, v in det.extra.items()
                              if isinstance(v, (int, float, str))}}
    arrays = {"norm_mean": det.norm_stats.mean, "norm_std": det.norm_stats.std}
    for name in sorted(det.nets):
        for i, p in enumerate(det.nets[name].parameters()):
            arrays[f"net.{name}.{i}"] = p.data
    if det.svm is not None:
        meta["svm"] = {"gamma": det.svm.gamma, "C": det.svm.C, "bias": det.svm.bias}
        arrays["svm_sv"] = det.svm.support_vectors
        arrays["svm_coeffs"] = det.svm.dual_coeffs
    for key, val in det.extra.items():
        if isinstance(val, np.ndarray):
            arrays[f"extra.{key}"] = val
    storage.write_blob(path, meta, arrays)


def load_detector(path) -> DetectorModel:
    meta, arrays = storage.read_blob(path)
    if meta.get("format") != "shapshield-detector":
        raise ValueError(f"{path}: not a detector checkpoint")
    nets = {}
    for name in meta["net_names"]:
        module = nn.module_from_spec(meta["nets"][name])
        for i, p in enumerate(module.parameters()):
            p.data = arrays[f"net.{name}.{i}"]
        nets[name] = module
    svm = None
    if "svm" in meta:
        svm = SvmModel(support_vectors=arrays["svm_sv"],
                       dual_coeffs=arrays["svm_coeffs"],
                       bias=meta["svm"]["bias"], gamma=meta["svm"]["gamma"],
                       C=meta["svm"]["C"])
    extra = dict(meta.get("extra_scalars", {}))
    for key, val in arrays.items():
        if key.startswith("extra."):
            extra[key[len("extra."):]] = val
    return DetectorModel(kind=meta["kind"], nets=nets, svm=svm,
                         norm_stats=NormStats(mean=arrays["norm_mean"],
                                              std=arrays["norm_std"]),
                         threshold=meta["threshold"], estimator=meta["estimator"],
                         input_shape=tuple(meta["input_shape"]), extra=extra)
