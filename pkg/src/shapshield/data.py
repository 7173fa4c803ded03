"""Synthetic dataset generation, normalization and train/test splitting.

Two desk-scale generators stand in for restricted clinical corpora: a
sparse-signal tabular task (most dimensions are pure noise) and a
two-class image task with class-dependent blob geometry. Both generators
self-check that the classes are actually learnable before returning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import storage

TEST_FRACTION = 0.20


@dataclass
class NormStats:
    """Per-feature mean and population (1/n) standard deviation."""
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Dataset:
    features: np.ndarray          # (n, m) tabular or (n, c, h, w) image
    labels: np.ndarray            # (n,) in {0, 1}
    kind: str                     # "tabular" | "image"
    train_idx: np.ndarray
    test_idx: np.ndarray
    norm_stats: NormStats         # computed on the train split only

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def train_features(self) -> np.ndarray:
        return self.features[self.train_idx]

    def test_features(self) -> np.ndarray:
        return self.features[self.test_idx]

    def train_labels(self) -> np.ndarray:
        return self.labels[self.train_idx]

    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_idx]


def _split_indices(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = int(round(TEST_FRACTION * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _feature_stats(rows: np.ndarray) -> NormStats:
    flat = rows.reshape(rows.shape[0], -1)
    return NormStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    return labels[rng.permutation(n)]


def gen_tabular(n: int, m: int, seed: int) -> Dataset:
    """Two-class Gaussian mixture with sparse informative dimensions.

    At least half of the m dimensions carry no signal. A closed-form linear
    probe on the informative dimensions must reach 85% test accuracy,
    otherwise generation fails loudly.
    """
    if n < 100 or m < 4:
        raise ValueError(f"gen_tabular needs n >= 100 and m >= 4, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, rng)
    n_info = max(2, min(m // 2, int(round(m * 0.15))))
    info_dims = np.sort(rng.choice(m, size=n_info, replace=False))
    # per-dimension class offsets are individually weak; accuracy comes from
    # aggregating them, which keeps decision margins small in any single
    # feature and leaves room for sparse low-visibility attacks
    offsets = rng.uniform(0.5, 0.8, size=n_info)

    features = rng.standard_normal((n, m))
    signs = 2.0 * labels - 1.0
    features[:, info_dims] += signs[:, None] * offsets[None, :]

    train_idx, test_idx = _split_indices(n, rng)
    ds = Dataset(features=features, labels=labels, kind="tabular",
                 train_idx=train_idx, test_idx=test_idx,
                 norm_stats=_feature_stats(features[train_idx]))

    acc = _linear_probe_accuracy(ds, info_dims)
    if acc < 0.85:
        raise RuntimeError(f"gen_tabular self-check failed: linear probe "
                           f"accuracy {acc:.3f} < 0.85")
    return ds


def _linear_probe_accuracy(ds: Dataset, info_dims: np.ndarray) -> float:
    """Closed-form class-mean discriminant on the informative dimensions."""
    x_tr = ds.features[ds.train_idx][:, info_dims]
    y_tr = ds.labels[ds.train_idx]
    mu0 = x_tr[y_tr == 0].mean(axis=0)
    mu1 = x_tr[y_tr == 1].mean(axis=0)
    var = x_tr.var(axis=0) + 1e-12
    w = (mu1 - mu0) / var
    b = -0.5 * (mu1 + mu0) @ w
    x_te = ds.features[ds.test_idx][:, info_dims]
    pred = (x_te @ w + b >= 0).astype(np.int64)
    return float((pred == ds.labels[ds.test_idx]).mean())


def gen_images(n: int, side: int, channels: int, seed: int) -> Dataset:
    """Two-class images: class 1 carries a faint Gaussian blob inside a fixed
    off-center region (a synthetic finding in an organ zone); class 0 is
    background only. Backgrounds vary per image in brightness and vignetting
    over uniform pixel noise, so genuine samples span a range of acquisition
    styles. Pixels lie in [0, 1].

    The blob is kept weak relative to the noise so a trained classifier is
    accurate but not unattackably confident; the class-conditional pixel
    means in the blob core must still differ by at least 0.2.
    """
    if n < 100:
        raise ValueError(f"gen_images needs n >= 100, got {n}")
    if side < 16:
        raise ValueError(f"gen_images needs side >= 16, got {side}")
    if channels < 1:
        raise ValueError(f"gen_images needs channels >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, rng)

    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    organ = 0.36 * side
    jit = side / 14.0
    sigma = side / 7.0

    base = rng.uniform(0.0, 0.15, size=n)
    vignette = rng.uniform(-0.15, 0.15, size=n)
    radial = ((yy - side / 2.0) ** 2 + (xx - side / 2.0) ** 2) / ((side / 2.0) ** 2)
    images = rng.uniform(0.0, 0.45, size=(n, channels, side, side))
    images += base[:, None, None, None]
    images += vignette[:, None, None, None] * radial[None, None, :, :]
    centers = rng.uniform(organ - jit, organ + jit, size=(n, 2))
    intensity = rng.uniform(0.22, 0.35, size=n)
    for i in range(n):
        if labels[i] == 1:
            d2 = (yy - centers[i, 0]) ** 2 + (xx - centers[i, 1]) ** 2
            images[i] += intensity[i] * np.exp(-d2 / (2.0 * sigma ** 2))
    np.clip(images, 0.0, 1.0, out=images)

    train_idx, test_idx = _split_indices(n, rng)
    ds = Dataset(features=images, labels=labels, kind="image",
                 train_idx=train_idx, test_idx=test_idx,
                 norm_stats=_feature_stats(images[train_idx]))

    gap = _blob_region_gap(ds, organ, sigma)
    if gap < 0.2:
        raise RuntimeError(f"gen_images self-check failed: class-conditional "
                           f"blob-core mean gap {gap:.3f} < 0.2")
    return ds


def _blob_region_gap(ds: Dataset, organ: float, sigma: float) -> float:
    """Class-conditional mean difference inside the blob core, the disk of
    radius sigma/2 around the organ-zone center."""
    side = ds.features.shape[-1]
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    region = ((yy - organ) ** 2 + (xx - organ) ** 2) <= (sigma / 2.0) ** 2
    own = ds.features[ds.labels == 1][:, :, region].mean()
    other = ds.features[ds.labels == 0][:, :, region].mean()
    return float(own - other)


def standardize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean) / std per feature; features with std < 1e-12 map to 0."""
    flat = values.reshape(values.shape[0], -1)
    degenerate = stats.std < 1e-12
    out = (flat - stats.mean) / np.where(degenerate, 1.0, stats.std)
    out[:, degenerate] = 0.0
    return out.reshape(values.shape)


def unstandardize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of standardize on non-degenerate features."""
    flat = values.reshape(values.shape[0], -1)
    out = flat * np.where(stats.std < 1e-12, 1.0, stats.std) + stats.mean
    return out.reshape(values.shape)


# export / import --------------------------------------------------------------

def _split_flags(ds: Dataset) -> np.ndarray:
    flags = np.zeros(ds.n_samples, dtype=np.uint8)
    flags[ds.test_idx] = 1
    return flags


def save_dataset(ds: Dataset, path) -> None:
    """CSV for tabular data, the flat binary raster format for images."""
    if ds.kind == "tabular":
        storage.write_tabular_csv(path, ds.features, ds.labels, _split_flags(ds))
    else:
        storage.write_raster(path, ds.features, ds.labels, _split_flags(ds))


def load_dataset(path, kind: str) -> Dataset:
    if kind == "tabular":
        features, labels, flags = storage.read_tabular_csv(path)
    elif kind == "image":
        features, labels, flags = storage.read_raster(path)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    train_idx = np.where(flags == 0)[0]
    test_idx = np.where(flags == 1)[0]
    return Dataset(features=features, labels=labels.astype(np.int64), kind=kind,
                   train_idx=train_idx, test_idx=test_idx,
                   norm_stats=_feature_stats(features[train_idx]))
