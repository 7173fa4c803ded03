"""Per-feature importance estimators.

Four estimators share one interventional value function: a coalition's
value is the mean model output over a background set with the features
outside the coalition replaced by the background sample's values.

* ``exact_shap``     brute-force enumeration of all feature coalitions;
                     exact but limited to small feature counts. Serves as
                     the oracle the approximations are checked against.
* ``sampling_shap``  Monte-Carlo average of marginal contributions over
                     random feature permutations.
* ``gradient_shap``  expected-gradients path estimator: input gradients
                     sampled along straight paths from background samples
                     to the input. The production estimator; scales to
                     image inputs.
* ``loo_attribution`` leave-one-out deltas against a fixed baseline value.

All estimators are pure functions of immutable models; per-sample calls
are independent.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .tensor import Tensor, backward
from .victims import VictimModel

MAX_EXACT_FEATURES = 15


class ModelFunction:
    """Batched scalar-output model with an optional input-gradient route.

    ``fn`` maps an (n, *input_shape) array to n outputs; ``grad`` (when
    present) returns the per-row gradient of the output, same shape as the
    input batch. ``calls`` counts rows evaluated, which makes estimator
    cost measurable.
    """

    def __init__(self, fn, grad=None, input_shape=None, model_id="anon"):
        self._fn = fn
        self._grad = grad
        self.input_shape = tuple(input_shape) if input_shape else None
        self.model_id = model_id
        self.calls = 0

    def __call__(self, flat_batch: np.ndarray) -> np.ndarray:
        batch = self._shaped(flat_batch)
        self.calls += batch.shape[0]
        return np.asarray(self._fn(batch), dtype=np.float64).reshape(-1)

    def grad(self, flat_batch: np.ndarray) -> np.ndarray:
        if self._grad is None:
            raise ValueError("this model function does not expose input gradients")
        batch = self._shaped(flat_batch)
        self.calls += batch.shape[0]
        return np.asarray(self._grad(batch), dtype=np.float64).reshape(flat_batch.shape)

    def _shaped(self, flat_batch: np.ndarray) -> np.ndarray:
        if self.input_shape is None:
            return flat_batch
        return flat_batch.reshape((-1,) + self.input_shape)


def victim_probability_fn(m: VictimModel, input_shape=None,
                          model_id: str = "victim") -> ModelFunction:
    """Wrap a victim so estimators attribute its positive-class probability.

    ``input_shape`` is required for image victims (their (c, h, w) shape);
    tabular victims infer it from the first dense layer.
    """
    from . import tensor as T
    from .nn import frozen

    def fn(batch):
        logits = m.net(Tensor(batch)).data.reshape(-1)
        return 1.0 / (1.0 + np.exp(-logits))

    def grad(batch):
        with frozen(m.net):
            xt = Tensor(batch, requires_grad=True)
            probs = T.sigmoid(m.net(xt).reshape((-1,)))
            backward(T.tensor_sum(probs))
        return xt.grad

    return ModelFunction(fn, grad=grad,
                         input_shape=_victim_shape(m, input_shape),
                         model_id=model_id)


def victim_logit_fn(m: VictimModel, input_shape=None,
                    model_id: str = "victim") -> ModelFunction:
    """Wrap a victim so estimators attribute its log-odds output.

    The attribution pipelines use the logit rather than the probability:
    the sigmoid's derivative rescales every feature of a map by the sample's
    confidence, which swamps the spatial structure the detectors rely on.
    """
    from . import tensor as T
    from .nn import frozen

    def fn(batch):
        return m.net(Tensor(batch)).data.reshape(-1)

    def grad(batch):
        with frozen(m.net):
            xt = Tensor(batch, requires_grad=True)
            backward(T.tensor_sum(m.net(xt).reshape((-1,))))
        return xt.grad

    return ModelFunction(fn, grad=grad,
                         input_shape=_victim_shape(m, input_shape),
                         model_id=model_id)


def _victim_shape(m: VictimModel, input_shape):
    if input_shape is not None:
        return input_shape
    if m.task != "tabular":
        raise ValueError("image victims need an explicit input_shape")
    return (m.net.layers[0].in_features,)


@dataclass
class BackgroundSet:
    """Reference samples defining the expectation baseline; drawn from the
    genuine training split only."""
    samples: np.ndarray

    def __post_init__(self):
        if self.samples.shape[0] == 0:
            raise ValueError("background set must be nonempty")

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(self.samples.shape[0], -1)

    @property
    def ident(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.samples).tobytes()).hexdigest()[:16]

    @classmethod
    def from_dataset(cls, ds, size: int, seed: int) -> "BackgroundSet":
        rng = np.random.default_rng(seed)
        take = min(size, len(ds.train_idx))
        rows = rng.choice(ds.train_idx, size=take, replace=False)
        return cls(samples=ds.features[np.sort(rows)])


@dataclass
class AttributionMap:
    values: np.ndarray            # shaped like the input
    base_value: float             # expected model output over the background set
    estimator: str                # exact | sampling | gradient | loo
    background_id: str
    params: dict = field(default_factory=dict)


def _flat_x(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return arr, arr.reshape(-1)


def _coalition_value_inputs(x_flat: np.ndarray, bg_flat: np.ndarray,
                            masks: np.ndarray) -> np.ndarray:
    """Rows for v(S): one per (mask, background sample); features inside the
    coalition come from x, the rest from the background sample."""
    nmask = masks.shape[0]
    b = bg_flat.shape[0]
    out = np.broadcast_to(bg_flat[None, :, :], (nmask, b, bg_flat.shape[1])).copy()
    xsel = np.broadcast_to(x_flat[None, None, :], out.shape)
    np.copyto(out, xsel, where=masks[:, None, :])
    return out.reshape(nmask * b, -1)


def exact_shap(f: ModelFunction, x, bg: BackgroundSet) -> AttributionMap:
    """Brute-force Shapley values over every feature coalition.

    Satisfies the efficiency and dummy axioms to floating-point accuracy.
    """
    shaped, x_flat = _flat_x(x)
    m = x_flat.size
    if m > MAX_EXACT_FEATURES:
        raise ValueError(f"exact_shap enumerates 2^M coalitions and M={m} is "
                         f"too large; use sampling_shap instead")
    bg_flat = bg.flat
    n_masks = 1 << m
    ids = np.arange(n_masks, dtype=np.int64)
    bits = (ids[:, None] >> np.arange(m)) & 1
    masks = bits.astype(bool)

    rows = _coalition_value_inputs(x_flat, bg_flat, masks)
    v = f(rows).reshape(n_masks, bg.size).mean(axis=1)

    sizes = bits.sum(axis=1)
    fact = np.array([float(math.factorial(k)) for k in range(m + 1)])
    weight_by_size = fact[:m] * fact[m - 1 - np.arange(m)] / fact[m]

    phi = np.zeros(m)
    for i in range(m):
        without = ids[(ids >> i) & 1 == 0]
        w = weight_by_size[sizes[without]]
        phi[i] = np.sum(w * (v[without | (1 << i)] - v[without]))
    return AttributionMap(values=phi.reshape(shaped.shape), base_value=float(v[0]),
                          estimator="exact", background_id=bg.ident)


def sampling_shap(f: ModelFunction, x, bg: BackgroundSet,
                  n_permutations: int, seed: int) -> AttributionMap:
    """Permutation-sampling Shapley estimate; deterministic given the seed."""
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    shaped, x_flat = _flat_x(x)
    m = x_flat.size
    bg_flat = bg.flat
    rng = np.random.default_rng(seed)

    phi = np.zeros(m)
    for _ in range(n_permutations):
        perm = rng.permutation(m)
        masks = np.zeros((m + 1, m), dtype=bool)
        for pos, j in enumerate(perm):
            masks[pos + 1] = masks[pos]
            masks[pos + 1, j] = True
        rows = _coalition_value_inputs(x_flat, bg_flat, masks)
        v = f(rows).reshape(m + 1, bg.size).mean(axis=1)
        phi[perm] += np.diff(v)
    phi /= n_permutations
    base = f(bg_flat).mean()
    return AttributionMap(values=phi.reshape(shaped.shape), base_value=float(base),
                          estimator="sampling", background_id=bg.ident,
                          params={"n_permutations": n_permutations, "seed": seed})


def gradient_shap(f: ModelFunction, x, bg: BackgroundSet,
                  n_path_samples: int, seed: int,
                  chunk_rows: int = 1024) -> AttributionMap:
    """Expected-gradients estimate of Shapley values.

    For each background sample, ``n_path_samples`` points are drawn uniformly
    on the straight path from it to x; the attribution is the mean of
    (x - background) times the input gradient at those points.
    """
    return gradient_shap_batch(f, [x], bg, n_path_samples, seed,
                               chunk_rows=chunk_rows)[0]


def gradient_shap_batch(f: ModelFunction, xs, bg: BackgroundSet,
                        n_path_samples: int, seed: int,
                        chunk_rows: int = 1024) -> list[AttributionMap]:
    """Expected-gradients maps for many samples; the same alpha draws are
    shared across samples, so each element matches the single-sample call."""
    if n_path_samples < 1:
        raise ValueError("n_path_samples must be >= 1")
    shapes, flats = [], []
    for x in xs:
        shaped, x_flat = _flat_x(x)
        shapes.append(shaped.shape)
        flats.append(x_flat)
    bg_flat = bg.flat
    b = bg.size
    m = bg_flat.shape[1]
    rng = np.random.default_rng(seed)
    # stratified-jittered path positions: each draw is marginally uniform on
    # (0,1) but jointly covers the path evenly, cutting estimator variance
    strata = np.stack([rng.permutation(n_path_samples) for _ in range(b)], axis=1)
    alphas = (strata + rng.random((n_path_samples, b))) / n_path_samples
    base = float(f(bg_flat).mean())

    rows_per_sample = n_path_samples * b
    out: list[AttributionMap] = []
    group = max(1, chunk_rows // rows_per_sample)
    for start in range(0, len(flats), group):
        members = flats[start:start + group]
        diffs = np.stack(members)[:, None, :] - bg_flat[None, :, :]   # (g, b, m)
        points = bg_flat[None, None, :, :] + alphas[None, :, :, None] * diffs[:, None, :, :]
        points = points.reshape(-1, m)
        grads = np.empty_like(points)
        for cs in range(0, points.shape[0], chunk_rows):
            grads[cs:cs + chunk_rows] = f.grad(points[cs:cs + chunk_rows])
        grads = grads.reshape(len(members), n_path_samples, b, m)
        phi = (grads * diffs[:, None, :, :]).mean(axis=(1, 2))
        for k, x_flat in enumerate(members):
            idx = start + k
            out.append(AttributionMap(
                values=phi[k].reshape(shapes[idx]), base_value=base,
                estimator="gradient", background_id=bg.ident,
                params={"n_path_samples": n_path_samples, "seed": seed}))
    return out


def loo_attribution(f: ModelFunction, x, baseline_value: float = 0.0) -> AttributionMap:
    """Leave-one-out importance: output drop when one feature is replaced by
    the baseline value. Costs exactly M+1 model-row evaluations."""
    shaped, x_flat = _flat_x(x)
    m = x_flat.size
    rows = np.tile(x_flat, (m + 1, 1))
    rows[np.arange(1, m + 1), np.arange(m)] = baseline_value
    out = f(rows)
    phi = out[0] - out[1:]
    return AttributionMap(values=phi.reshape(shaped.shape), base_value=float(out[0]),
                          estimator="loo", background_id="baseline",
                          params={"baseline_value": baseline_value})


# disk cache --------------------------------------------------------------------

class AttributionCache:
    """Attribution maps persisted to disk, keyed by model, sample, estimator
    and seed, so repeated experiment runs skip recomputation."""

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)

    @staticmethod
    def key(model_id: str, sample: np.ndarray, estimator: str, seed,
            params: dict | None = None) -> str:
        h = hashlib.sha256()
        h.update(model_id.encode())
        h.update(np.ascontiguousarray(sample, dtype=np.float64).tobytes())
        h.update(estimator.encode())
        h.update(repr(seed).encode())
        h.update(repr(sorted((params or {}).items())).encode())
        return h.hexdigest()

    def _path(self, key: str) -> str:
        return os.path.join(self.root, key + ".ssb")

    def load(self, key: str) -> AttributionMap | None:
        path = self._path(key)
        if not os.path.exists(path):
            return None
        meta, arrays = storage.read_blob(path)
        return AttributionMap(values=arrays["values"],
                              base_value=meta["base_value"],
                              estimator=meta["estimator"],
                              background_id=meta["background_id"],
                              params=meta.get("params", {}))

    def store(self, key: str, amap: AttributionMap) -> None:
        meta = {"base_value": amap.base_value, "estimator": amap.estimator,
                "background_id": amap.background_id, "params": amap.params}
        storage.write_blob(self._path(key), meta, {"values": amap.values})
