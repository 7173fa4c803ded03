"""Adversarial sample generation against a trained victim.

Three attacks with different perturbation geometry:

* ``pgd``            iterated signed-gradient ascent projected into an
                     L-infinity ball around the original, clamped to the
                     valid input range, stopping at the first label flip.
* ``cw``             L2-minimizing optimization attack: the adversarial is
                     parameterized through tanh so it always stays inside
                     the clamp range, a margin term drives misclassification,
                     and the trade-off constant is binary-searched.
* ``saliency_sparse`` greedy tabular attack that repeatedly moves the single
                     most loss-salient feature, touching at most a fixed
                     budget of distinct features.

Failed attacks are valid results with ``success=False`` and an unchanged
sample. Attacks on distinct samples are independent; the batch entry points
vectorize across samples without changing per-sample results.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import storage
from . import tensor as T
from .nn import AdamState, adam_step, frozen, loss_bce_logits
from .tensor import Tensor, backward
from .victims import VictimModel, predict_labels

_BIG = 1e10


@dataclass
class AttackConfig:
    method: str = "pgd"                     # pgd | cw | saliency_sparse
    epsilon: float = 0.1                    # pgd L-inf budget
    step_size: float | None = None          # pgd (default epsilon/4) and saliency step
    max_iters: int | None = None            # pgd iters / cw adam steps / saliency rounds
    c_init: float = 1e-2                    # cw trade-off constant
    binary_search_steps: int = 5            # cw
    kappa: float = 0.0                      # cw margin
    cw_lr: float = 0.05                     # cw adam learning rate
    max_perturbed_features: int = 5         # saliency budget
    clamp: tuple[float, float] = (0.0, 1.0)
    random_start: bool = False              # pgd: random init inside the ball
    abort_early: bool = True                # cw: stop stagnant optimizer rounds
    seed: int = 0

    def __post_init__(self):
        if self.method == "pgd" and self.epsilon < 0:
            raise ValueError("pgd epsilon must be >= 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def resolved_iters(self) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return {"pgd": 40, "cw": 200,
                "saliency_sparse": 12 * self.max_perturbed_features}[self.method]

    def resolved_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / 4.0 if self.method == "pgd" else 0.5


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray
    success: bool
    l2_norm: float
    linf_norm: float
    iterations_used: int


def _norms(orig: np.ndarray, adv: np.ndarray) -> tuple[float, float]:
    delta = (adv - orig).reshape(-1)
    return float(np.sqrt(np.sum(delta * delta))), float(np.max(np.abs(delta)) if delta.size else 0.0)


def _input_grad(m: VictimModel, x_batch: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the classification loss with respect to the inputs."""
    with frozen(m.net):
        xt = Tensor(x_batch, requires_grad=True)
        logits = m.net(xt).reshape((-1,))
        loss = loss_bce_logits(logits, y.astype(np.float64))
        backward(loss)
    return xt.grad


def _results_from_batch(x0, adv, success, iters) -> list[AttackResult]:
    out = []
    for i in range(x0.shape[0]):
        l2, linf = _norms(x0[i], adv[i])
        out.append(AttackResult(original=x0[i].copy(), adversarial=adv[i].copy(),
                                success=bool(success[i]), l2_norm=l2,
                                linf_norm=linf, iterations_used=int(iters[i])))
    return out


# PGD -------------------------------------------------------------------------

def pgd_attack_batch(m: VictimModel, x: np.ndarray, y: np.ndarray,
                     cfg: AttackConfig) -> list[AttackResult]:
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    lo, hi = cfg.clamp
    eps = cfg.epsilon
    alpha = cfg.resolved_step()
    iters = cfg.resolved_iters()
    orig_labels = predict_labels(m, x0)

    adv = x0.copy()
    if cfg.random_start and eps > 0:
        rng = np.random.default_rng(cfg.seed)
        adv = np.clip(adv + rng.uniform(-eps, eps, size=adv.shape), lo, hi)
    active = np.ones(x0.shape[0], dtype=bool)
    success = np.zeros(x0.shape[0], dtype=bool)
    iters_used = np.zeros(x0.shape[0], dtype=np.int64)

    for t in range(iters):
        if not active.any():
            break
        idx = np.where(active)[0]
        g = _input_grad(m, adv[idx], y[idx])
        stepped = adv[idx] + alpha * np.sign(g)
        stepped = np.minimum(np.maximum(stepped, x0[idx] - eps), x0[idx] + eps)
        stepped = np.clip(stepped, lo, hi)
        adv[idx] = stepped
        flipped = predict_labels(m, stepped) != orig_labels[idx]
        iters_used[idx] = t + 1
        success[idx[flipped]] = True
        active[idx[flipped]] = False
    return _results_from_batch(x0, adv, success, iters_used)


def pgd_attack(m: VictimModel, x, y, cfg: AttackConfig) -> AttackResult:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return pgd_attack_batch(m, arr[None, ...], np.asarray([y]), cfg)[0]


# Carlini-Wagner L2 -----------------------------------------------------------

def _atanh(u: np.ndarray) -> np.ndarray:
    return 0.5 * np.log((1.0 + u) / (1.0 - u))


def cw_attack_batch(m: VictimModel, x: np.ndarray, y: np.ndarray,
                    cfg: AttackConfig) -> list[AttackResult]:
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x0.shape[0]
    lo, hi = cfg.clamp
    scale = hi - lo
    steps = cfg.resolved_iters()
    orig_labels = predict_labels(m, x0)
    label_sign = (2.0 * y - 1.0)            # margin > 0 while still classified as y

    u = np.clip((x0 - lo) / scale, 1e-6, 1.0 - 1e-6)
    w_init = _atanh(2.0 * u - 1.0)

    c = np.full(n, cfg.c_init)
    c_lo = np.zeros(n)
    c_hi = np.full(n, _BIG)
    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    best_iter = np.zeros(n, dtype=np.int64)
    total = 0

    feat_axes = tuple(range(1, x0.ndim))
    with frozen(m.net):
        for _ in range(cfg.binary_search_steps):
            w = Tensor(w_init.copy(), requires_grad=True)
            opt = AdamState([w], lr=cfg.cw_lr)
            round_success = np.zeros(n, dtype=bool)
            prev_obj = np.inf
            for step in range(steps):
                total += 1
                adv_t = T.add(T.mul(T.mul(T.add(T.tanh(w), 1.0), 0.5), scale), lo)
                logits = m.net(adv_t).reshape((-1,))
                margin = T.mul(logits, label_sign)
                dist2 = T.tensor_sum(T.square(T.sub(adv_t, x0)), axis=feat_axes)
                obj = T.tensor_sum(T.add(dist2,
                                         T.mul(T.clamp_min(margin, -cfg.kappa), c)))
                w.grad = None
                backward(obj)
                adv_now = adv_t.data
                flipped = (logits.data * label_sign < 0)
                if flipped.any():
                    l2_now = np.sqrt(dist2.data)
                    better = flipped & (l2_now < best_l2)
                    if better.any():
                        best_adv[better] = adv_now[better]
                        best_l2[better] = l2_now[better]
                        best_iter[better] = total
                    round_success |= flipped
                adam_step(opt, [w])
                # abort a stagnant round; saves most of the budget when the
                # trade-off constant is too small to make progress
                if cfg.abort_early and step % 10 == 9:
                    now = float(obj.data)
                    if now > prev_obj * (1.0 - 1e-4):
                        break
                    prev_obj = now
            c_hi[round_success] = np.minimum(c_hi[round_success], c[round_success])
            c_lo[~round_success] = np.maximum(c_lo[~round_success], c[~round_success])
            searchable = c_hi < _BIG
            c = np.where(searchable, 0.5 * (c_lo + c_hi), c * 10.0)

    success = np.isfinite(best_l2)
    adv = np.where(success.reshape((-1,) + (1,) * (x0.ndim - 1)), best_adv, x0)
    # success means the victim's label flipped relative to the original
    final_flip = predict_labels(m, adv) != orig_labels
    success &= final_flip
    return _results_from_batch(x0, adv, success, best_iter)


def cw_attack(m: VictimModel, x, y, cfg: AttackConfig) -> AttackResult:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return cw_attack_batch(m, arr[None, ...], np.asarray([y]), cfg)[0]


# greedy saliency-guided sparse attack -----------------------------------------

def saliency_sparse_attack_batch(m: VictimModel, x: np.ndarray, y: np.ndarray,
                                 cfg: AttackConfig) -> list[AttackResult]:
    if m.task != "tabular":
        raise ValueError("saliency_sparse_attack supports tabular victims only")
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n, mdim = x0.shape
    lo, hi = cfg.clamp
    step = cfg.resolved_step()
    budget = cfg.max_perturbed_features
    rounds = cfg.resolved_iters()
    orig_labels = predict_labels(m, x0)

    adv = x0.copy()
    active = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    iters_used = np.zeros(n, dtype=np.int64)
    saturated = np.zeros((n, mdim), dtype=bool)

    for t in range(rounds):
        if not active.any():
            break
        idx = np.where(active)[0]
        g = _input_grad(m, adv[idx], y[idx])
        score = np.abs(g)
        score[saturated[idx]] = -1.0
        perturbed = adv[idx] != x0[idx]
        exhausted = perturbed.sum(axis=1) >= budget
        # once the budget of distinct features is spent, only revisit them
        score[exhausted[:, None] & ~perturbed] = -1.0
        j = score.argmax(axis=1)
        best = score[np.arange(len(idx)), j]
        movable = best > 0.0
        if not movable.any():
            active[idx] = False
            break
        rows = idx[movable]
        cols = j[movable]
        before = adv[rows, cols].copy()
        direction = np.sign(g[movable, cols])
        adv[rows, cols] = np.clip(before + step * direction, lo, hi)
        stuck = adv[rows, cols] == before
        saturated[rows[stuck], cols[stuck]] = True
        active[idx[~movable]] = False
        flipped = predict_labels(m, adv[rows]) != orig_labels[rows]
        iters_used[rows] = t + 1
        success[rows[flipped]] = True
        active[rows[flipped]] = False
    return _results_from_batch(x0, adv, success, iters_used)


def saliency_sparse_attack(m: VictimModel, x, y, cfg: AttackConfig) -> AttackResult:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return saliency_sparse_attack_batch(m, arr[None, ...], np.asarray([y]), cfg)[0]


# dispatch and persistence ------------------------------------------------------

_BATCH_ATTACKS = {
    "pgd": pgd_attack_batch,
    "cw": cw_attack_batch,
    "saliency_sparse": saliency_sparse_attack_batch,
}


def run_attack_batch(m: VictimModel, x: np.ndarray, y: np.ndarray,
                     cfg: AttackConfig) -> list[AttackResult]:
    try:
        fn = _BATCH_ATTACKS[cfg.method]
    except KeyError:
        raise ValueError(f"unknown attack method {cfg.method!r}") from None
    return fn(m, x, y, cfg)


def save_attack_set(path, results: list[AttackResult], cfg: AttackConfig,
                    labels: np.ndarray) -> None:
    meta = {"format": "shapshield-attacks", "version": 1,
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in asdict(cfg).items()}}
    storage.write_blob(path, meta, {
        "originals": np.stack([r.original for r in results]),
        "adversarials": np.stack([r.adversarial for r in results]),
        "success": np.asarray([r.success for r in results], dtype=bool),
        "l2": np.asarray([r.l2_norm for r in results]),
        "linf": np.asarray([r.linf_norm for r in results]),
        "iterations": np.asarray([r.iterations_used for r in results], dtype=np.int64),
        "labels": np.asarray(labels, dtype=np.int64),
    })


def load_attack_set(path) -> tuple[list[AttackResult], AttackConfig, np.ndarray]:
    meta, arrays = storage.read_blob(path)
    if meta.get("format") != "shapshield-attacks":
        raise ValueError(f"{path}: not an attack-set file")
    raw = dict(meta["config"])
    raw["clamp"] = tuple(raw["clamp"])
    cfg = AttackConfig(**raw)
    results = []
    for i in range(arrays["originals"].shape[0]):
        results.append(AttackResult(
            original=arrays["originals"][i], adversarial=arrays["adversarials"][i],
            success=bool(arrays["success"][i]), l2_norm=float(arrays["l2"][i]),
            linf_norm=float(arrays["linf"][i]),
            iterations_used=int(arrays["iterations"][i])))
    return results, cfg, arrays["labels"]
