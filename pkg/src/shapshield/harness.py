"""End-to-end experiment orchestration.

Pipeline: train a victim, attack the correctly-classified test samples,
attribute genuine and adversarial samples, train every configured detector
on the train fold of the maps, and score the test fold, including the
cross-attack cells where a detector trained against one attack is evaluated
on another. Every stage is explicitly seeded; rerunning with the same
config reproduces all output files bit-exactly. Stage failures abort with a
stage-tagged error.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import detectors as det_mod
from . import storage
from .attacks import AttackConfig, AttackResult, run_attack_batch, save_attack_set
from .attribution import AttributionCache, AttributionMap, BackgroundSet, \
    gradient_shap, victim_probability_fn
from .data import Dataset, NormStats, gen_images, gen_tabular, save_dataset, standardize
from .victims import VictimConfig, VictimModel, model_space, predict_labels, \
    save_victim, train_victim


class StageError(RuntimeError):
    """Failure inside one pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, err: Exception):
        super().__init__(f"[stage:{stage}] {err}")
        self.stage = stage


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as err:
        raise StageError(name, err) from err
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


@dataclass
class ExperimentConfig:
    task: str = "image"
    n_samples: int = 1000
    feature_count: int = 62
    side: int = 28
    channels: int = 1
    data_seed: int = 7
    victim_seed: int = 11
    attack_seed: int = 13
    attribution_seed: int = 17
    detector_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    victim_epochs: int = 40
    victim_batch: int = 32
    victim_lr: float | None = None
    victim_target_accuracy: float | None = None
    attacks: list[AttackConfig] = field(default_factory=list)
    attribution_estimator: str = "gradient"
    n_path_samples: int = 4
    background_size: int = 64
    detectors: list[str] = field(default_factory=lambda: ["shap_mlp", "shap_vae_svm"])
    n_attack_candidates: int = 160
    svm_c: float = 1.0
    mlp_hidden_dim: int = 160
    detector_epochs: int = 40
    conv_epochs: int = 20
    ae_epochs: int = 60
    kd_reference_size: int = 400
    out_dir: str = "runs/experiment"
    cache_dir: str | None = None

    def resolved_victim_cfg(self) -> VictimConfig:
        lr = self.victim_lr if self.victim_lr is not None else \
            (0.005 if self.task == "image" else 0.01)
        target = self.victim_target_accuracy if self.victim_target_accuracy is not None \
            else (0.90 if self.task == "image" else 0.85)
        return VictimConfig(epochs=self.victim_epochs, batch_size=self.victim_batch,
                            lr=lr, seed=self.victim_seed, target_accuracy=target)


@dataclass
class CellResult:
    accuracies: list[float]
    precisions: list[float]
    recalls: list[float]
    n_genuine: int
    n_adversarial: int

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def precision(self) -> float:
        return float(np.mean(self.precisions))

    @property
    def recall(self) -> float:
        return float(np.mean(self.recalls))


@dataclass
class ResultsMatrix:
    detectors: list[str]
    pairs: list[tuple[str, str]]
    cells: dict
    analysis: dict = field(default_factory=dict)

    def cell(self, detector: str, train_attack: str, test_attack: str) -> CellResult:
        return self.cells[(detector, train_attack, test_attack)]


def spearman_correlation(a, b) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"spearman needs two equal-length vectors, got "
                         f"{a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("spearman needs at least 2 values")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("rank correlation is undefined for a constant vector")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _model_hash(net) -> str:
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]


def _compute_maps(f, samples: np.ndarray, bg: BackgroundSet,
                  cfg: ExperimentConfig, cache: AttributionCache | None
                  ) -> list[AttributionMap]:
    maps = []
    params = {"n_path_samples": cfg.n_path_samples, "background": bg.ident}
    for x in samples:
        key = None
        if cache is not None:
            key = cache.key(f.model_id, x, cfg.attribution_estimator,
                            cfg.attribution_seed, params)
            hit = cache.load(key)
            if hit is not None:
                maps.append(hit)
                continue
        amap = gradient_shap(f, x, bg, cfg.n_path_samples, cfg.attribution_seed)
        if cache is not None:
            cache.store(key, amap)
        maps.append(amap)
    return maps


def _standardized_values(maps: list[AttributionMap], stats: NormStats) -> np.ndarray:
    raw = np.stack([m.values for m in maps])
    return standardize(raw, stats)


def _cell_metrics(scores_gen: np.ndarray, scores_adv: np.ndarray,
                  threshold: float) -> tuple[float, float, float]:
    pred_gen = scores_gen >= threshold
    pred_adv = scores_adv >= threshold
    tp = float(pred_adv.sum())
    fp = float(pred_gen.sum())
    fn = float(len(scores_adv) - tp)
    acc = ((len(scores_gen) - fp) + tp) / (len(scores_gen) + len(scores_adv))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return float(acc), precision, recall


def run_experiment(cfg: ExperimentConfig) -> ResultsMatrix:
    os.makedirs(cfg.out_dir, exist_ok=True)
    timings: dict[str, float] = {}
    analysis: dict = {}

    with _stage("data", timings):
        if cfg.task == "tabular":
            ds = gen_tabular(cfg.n_samples, cfg.feature_count, cfg.data_seed)
            save_dataset(ds, os.path.join(cfg.out_dir, "dataset.csv"))
        elif cfg.task == "image":
            ds = gen_images(cfg.n_samples, cfg.side, cfg.channels, cfg.data_seed)
            save_dataset(ds, os.path.join(cfg.out_dir, "dataset.ras"))
        else:
            raise ValueError(f"unknown task {cfg.task!r}")

    with _stage("victim", timings):
        victim = train_victim(ds, cfg.resolved_victim_cfg())
        save_victim(victim, os.path.join(cfg.out_dir, "victim.ssb"))
        x_model = model_space(ds)
        analysis["victim_accuracy"] = victim.meta["test_accuracy"]

    with _stage("attack", timings):
        x_test = x_model[ds.test_idx]
        y_test = ds.test_labels()
        correct = predict_labels(victim, x_test) == y_test
        cand_rows = np.where(correct)[0][: cfg.n_attack_candidates]
        if len(cand_rows) < 10:
            raise RuntimeError(f"only {len(cand_rows)} correctly classified test "
                               f"samples; victim too weak to attack")
        x_cand = x_test[cand_rows]
        y_cand = y_test[cand_rows]
        attack_results: dict[str, list[AttackResult]] = {}
        for atk in cfg.attacks:
            results = run_attack_batch(victim, x_cand, y_cand, atk)
            _assert_attack_invariants(victim, results, atk)
            save_attack_set(os.path.join(cfg.out_dir, f"attacks_{atk.method}.ssb"),
                            results, atk, y_cand)
            attack_results[atk.method] = results
        analysis["attack_success_rate"] = {
            m: float(np.mean([r.success for r in res]))
            for m, res in attack_results.items()}

    with _stage("attribution", timings):
        cache = AttributionCache(cfg.cache_dir) if cfg.cache_dir else None
        bg_rng = np.random.default_rng(cfg.attribution_seed)
        take = min(cfg.background_size, len(ds.train_idx))
        bg_rows = np.sort(bg_rng.choice(len(ds.train_idx), size=take, replace=False))
        bg = BackgroundSet(samples=x_model[ds.train_idx][bg_rows])
        f = victim_probability_fn(victim, input_shape=x_cand.shape[1:],
                                  model_id=_model_hash(victim.net))
        genuine_maps = _compute_maps(f, x_cand, bg, cfg, cache)
        adv_maps: dict[str, list[AttributionMap]] = {}
        adv_rows: dict[str, np.ndarray] = {}
        adv_samples: dict[str, np.ndarray] = {}
        for method, results in attack_results.items():
            rows = np.asarray([i for i, r in enumerate(results) if r.success],
                              dtype=np.int64)
            adv_x = np.stack([results[i].adversarial for i in rows])
            adv_maps[method] = _compute_maps(f, adv_x, bg, cfg, cache)
            adv_rows[method] = rows
            adv_samples[method] = adv_x
        _save_maps(os.path.join(cfg.out_dir, "maps_genuine.ssb"), genuine_maps)
        for method, maps in adv_maps.items():
            _save_maps(os.path.join(cfg.out_dir, f"maps_{method}.ssb"), maps)

    with _stage("analysis", timings):
        analysis.update(_distribution_shift_analysis(genuine_maps, adv_maps))

    with _stage("detector", timings):
        methods = [a.method for a in cfg.attacks]
        pairs = [(a, b) for a in methods for b in methods]
        cells = {(d, a, b): CellResult([], [], [], 0, 0)
                 for d in cfg.detectors for a, b in pairs}
        recon_margins = []
        n_cand = len(x_cand)
        kd_ref = x_model[ds.train_idx][: cfg.kd_reference_size]
        ml_loo_table = None
        if "ml_loo" in cfg.detectors:
            ml_loo_table = _ml_loo_tables(victim, x_cand, adv_samples)

        for seed in cfg.detector_seeds:
            fold_rng = np.random.default_rng(seed)
            perm = fold_rng.permutation(n_cand)
            n_test = int(round(0.2 * n_cand))
            test_fold = np.zeros(n_cand, dtype=bool)
            test_fold[perm[:n_test]] = True

            stats = _map_norm_stats(genuine_maps, ~test_fold)
            gen_std = _standardized_values(genuine_maps, stats)
            adv_std = {m: _standardized_values(adv_maps[m], stats)
                       for m in methods}

            _run_seed(cfg, seed, victim, x_cand, adv_samples, adv_rows,
                      gen_std, adv_std, test_fold, stats, kd_ref,
                      ml_loo_table, cells, recon_margins)
        analysis["reconstruction_margins"] = recon_margins
        if recon_margins:
            worst = min(m["margin"] for m in recon_margins)
            if worst <= 0:
                raise RuntimeError(
                    f"reconstruction-error separation violated: held-out genuine "
                    f"maps reconstruct no better than adversarial ones "
                    f"(margin {worst:.3e})")

    matrix = ResultsMatrix(detectors=list(cfg.detectors), pairs=pairs,
                           cells=cells, analysis=analysis)
    with _stage("report", timings):
        emit_reports(matrix, {
            "genuine_maps": genuine_maps,
            "adv_maps": adv_maps,
            "detector_seeds": list(cfg.detector_seeds),
        }, cfg.out_dir)
    analysis["timings"] = timings
    return matrix


def _assert_attack_invariants(victim, results: list[AttackResult],
                              atk: AttackConfig) -> None:
    lo, hi = atk.clamp
    for r in results:
        if r.adversarial.min() < lo - 1e-9 or r.adversarial.max() > hi + 1e-9:
            raise AssertionError(f"{atk.method}: adversarial values escape the "
                                 f"clamp range [{lo}, {hi}]")
        if atk.method == "pgd" and r.linf_norm > atk.epsilon + 1e-9:
            raise AssertionError(f"pgd: L-inf norm {r.linf_norm} exceeds "
                                 f"epsilon {atk.epsilon}")
        if r.success:
            orig_label = predict_labels(victim, r.original[None, ...])[0]
            adv_label = predict_labels(victim, r.adversarial[None, ...])[0]
            if orig_label == adv_label:
                raise AssertionError(f"{atk.method}: success flag set but the "
                                     f"victim label did not flip")


def _map_norm_stats(genuine_maps: list[AttributionMap],
                    train_fold: np.ndarray) -> NormStats:
    raw = np.stack([m.values for m in genuine_maps])[train_fold]
    flat = raw.reshape(raw.shape[0], -1)
    return NormStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def _ml_loo_tables(victim, x_cand, adv_samples) -> dict:
    table = {"genuine": det_mod._ml_loo_features(victim, x_cand, 0.0)}
    for method, adv_x in adv_samples.items():
        table[method] = det_mod._ml_loo_features(victim, adv_x, 0.0)
    return table


def _balanced_eval_rows(rng, n_avail_gen: int, n_avail_adv: int):
    n = min(n_avail_gen, n_avail_adv)
    gi = np.sort(rng.choice(n_avail_gen, size=n, replace=False))
    ai = np.sort(rng.choice(n_avail_adv, size=n, replace=False))
    return gi, ai


def _run_seed(cfg, seed, victim, x_cand, adv_samples, adv_rows, gen_std, adv_std,
              test_fold, stats, kd_ref, ml_loo_table, cells, recon_margins):
    methods = list(adv_std)
    train_fold = ~test_fold
    gen_train_idx = np.where(train_fold)[0]
    gen_test_idx = np.where(test_fold)[0]

    # per-attack fold membership for the successful adversarials
    adv_train: dict[str, np.ndarray] = {}
    adv_test: dict[str, np.ndarray] = {}
    for m in methods:
        in_train = train_fold[adv_rows[m]]
        adv_train[m] = np.where(in_train)[0]
        adv_test[m] = np.where(~in_train)[0]

    balance_rng = np.random.default_rng(seed + 104729)

    for kind in cfg.detectors:
        if kind in ("shap_mlp", "shap_conv", "shap_ae_svm", "shap_vae_svm"):
            _run_map_detector(cfg, kind, seed, methods, gen_std, adv_std,
                              gen_train_idx, gen_test_idx, adv_train, adv_test,
                              stats, balance_rng, cells, recon_margins)
        elif kind == "kernel_density":
            _run_kd(cfg, kind, methods, victim, x_cand, adv_samples,
                    gen_train_idx, gen_test_idx, adv_train, adv_test,
                    kd_ref, balance_rng, cells)
        elif kind == "ml_loo":
            _run_ml_loo(cfg, kind, methods, victim, ml_loo_table,
                        gen_train_idx, gen_test_idx, adv_train, adv_test,
                        balance_rng, cells)
        else:
            raise ValueError(f"unknown detector kind {kind!r}")


def _record(cells, kind, a, b, scores_gen, scores_adv, threshold):
    acc, prec, rec = _cell_metrics(scores_gen, scores_adv, threshold)
    cell = cells[(kind, a, b)]
    cell.accuracies.append(acc)
    cell.precisions.append(prec)
    cell.recalls.append(rec)
    cell.n_genuine = len(scores_gen)
    cell.n_adversarial = len(scores_adv)


def _run_map_detector(cfg, kind, seed, methods, gen_std, adv_std, gen_train_idx,
                      gen_test_idx, adv_train, adv_test, stats, balance_rng,
                      cells, recon_margins):
    estimator = cfg.attribution_estimator
    ae_det = None
    if kind in ("shap_ae_svm", "shap_vae_svm"):
        ae_det = det_mod.train_shap_autoencoder(
            gen_std[gen_train_idx], variational=(kind == "shap_vae_svm"),
            epochs=cfg.ae_epochs, seed=seed, norm_stats=stats, estimator=estimator)
        for m in methods:
            margin = _recon_margin(ae_det, gen_std[gen_test_idx],
                                   adv_std[m][adv_test[m]])
            recon_margins.append({"kind": kind, "seed": seed, "attack": m,
                                  "margin": margin})

    for a in methods:
        tg, ta = _balanced_train(balance_rng, gen_train_idx, adv_train[a])
        if kind == "shap_mlp":
            det = det_mod.train_shap_mlp(
                gen_std[tg], adv_std[a][ta], hidden_dim=cfg.mlp_hidden_dim,
                epochs=cfg.detector_epochs, seed=seed, norm_stats=stats,
                estimator=estimator)
        elif kind == "shap_conv":
            det = det_mod.train_shap_conv(
                gen_std[tg], adv_std[a][ta], epochs=cfg.conv_epochs, seed=seed,
                norm_stats=stats, estimator=estimator)
        else:
            det = det_mod.train_recon_svm(ae_det, gen_std[tg], adv_std[a][ta],
                                          C=cfg.svm_c)
        for b in methods:
            gi, ai = _balanced_eval_rows(balance_rng, len(gen_test_idx),
                                         len(adv_test[b]))
            sg = det_mod.score_maps(det, gen_std[gen_test_idx][gi])
            sa = det_mod.score_maps(det, adv_std[b][adv_test[b]][ai])
            _record(cells, kind, a, b, sg, sa, det.threshold)


def _balanced_train(rng, gen_rows, adv_rows_local):
    n = min(len(gen_rows), len(adv_rows_local))
    gi = np.sort(rng.choice(len(gen_rows), size=n, replace=False))
    ai = np.sort(rng.choice(len(adv_rows_local), size=n, replace=False))
    return gen_rows[gi], adv_rows_local[ai]


def _recon_margin(ae_det, gen_maps_std, adv_maps_std) -> float:
    if len(adv_maps_std) == 0 or len(gen_maps_std) == 0:
        return float("nan")
    eg = det_mod.reconstruction_features(ae_det, gen_maps_std).mean()
    ea = det_mod.reconstruction_features(ae_det, adv_maps_std).mean()
    return float(ea - eg)


def _run_kd(cfg, kind, methods, victim, x_cand, adv_samples, gen_train_idx,
            gen_test_idx, adv_train, adv_test, kd_ref, balance_rng, cells):
    for a in methods:
        tg, ta = _balanced_train(balance_rng, gen_train_idx, adv_train[a])
        det = det_mod.train_kernel_density_detector(
            victim, x_cand[tg], adv_samples[a][ta], reference_samples=kd_ref)
        for b in methods:
            gi, ai = _balanced_eval_rows(balance_rng, len(gen_test_idx),
                                         len(adv_test[b]))
            sg = det_mod.score_kernel_density(det, x_cand[gen_test_idx][gi])
            sa = det_mod.score_kernel_density(
                det, adv_samples[b][adv_test[b]][ai])
            _record(cells, kind, a, b, sg, sa, det.threshold)


def _run_ml_loo(cfg, kind, methods, victim, table, gen_train_idx, gen_test_idx,
                adv_train, adv_test, balance_rng, cells):
    for a in methods:
        tg, ta = _balanced_train(balance_rng, gen_train_idx, adv_train[a])
        det = det_mod.train_ml_loo_from_features(
            victim, table["genuine"][tg], table[a][ta])
        for b in methods:
            gi, ai = _balanced_eval_rows(balance_rng, len(gen_test_idx),
                                         len(adv_test[b]))
            sg = det_mod.score_ml_loo_features(det, table["genuine"][gen_test_idx][gi])
            sa = det_mod.score_ml_loo_features(det, table[b][adv_test[b]][ai])
            _record(cells, kind, a, b, sg, sa, det.threshold)


def _distribution_shift_analysis(genuine_maps, adv_maps) -> dict:
    """Per-feature mean absolute attribution of genuine vs adversarial sets,
    compared by rank correlation. Maps are standardized with the genuine
    set's per-feature statistics first, the same normalization the detector
    pipeline applies to every map."""
    gen = np.stack([m.values for m in genuine_maps])
    gen_flat = gen.reshape(gen.shape[0], -1)
    mu = gen_flat.mean(axis=0)
    sd = gen_flat.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)

    def mean_abs(flat):
        return np.abs((flat - mu) / sd).mean(axis=0)

    half = gen_flat.shape[0] // 2
    rho_halves = spearman_correlation(mean_abs(gen_flat[:half]),
                                      mean_abs(gen_flat[half:]))
    mean_genuine = mean_abs(gen_flat)
    out = {"rho_genuine_halves": rho_halves,
           "mean_abs_genuine": mean_genuine,
           "mean_abs_adv": {}, "rho_genuine_vs_adv": {}}
    for method, maps in adv_maps.items():
        adv = np.stack([m.values for m in maps])
        mean_adv = mean_abs(adv.reshape(adv.shape[0], -1))
        out["mean_abs_adv"][method] = mean_adv
        out["rho_genuine_vs_adv"][method] = spearman_correlation(mean_genuine,
                                                                 mean_adv)
    return out


def _save_maps(path, maps: list[AttributionMap]) -> None:
    meta = {"format": "shapshield-maps", "version": 1,
            "estimator": maps[0].estimator if maps else "none",
            "background_id": maps[0].background_id if maps else "",
            "params": maps[0].params if maps else {}}
    storage.write_blob(path, meta, {
        "values": np.stack([m.values for m in maps]) if maps else np.zeros((0,)),
        "base_values": np.asarray([m.base_value for m in maps]),
    })


def load_maps(path) -> list[AttributionMap]:
    meta, arrays = storage.read_blob(path)
    if meta.get("format") != "shapshield-maps":
        raise ValueError(f"{path}: not an attribution-map file")
    return [AttributionMap(values=arrays["values"][i],
                           base_value=float(arrays["base_values"][i]),
                           estimator=meta["estimator"],
                           background_id=meta["background_id"],
                           params=meta.get("params", {}))
            for i in range(arrays["values"].shape[0])]


# reports -----------------------------------------------------------------------

def emit_reports(matrix: ResultsMatrix, attributions: dict, out_dir) -> None:
    """Write the accuracy matrix, per-feature importance scatter data with
    rank correlations, per-sample heatmap rasters, and per-seed accuracy
    distributions, all as plain text/CSV or rasters."""
    os.makedirs(out_dir, exist_ok=True)
    pairs = matrix.pairs
    headers = ["detector"] + [f"{a}->{b}" for a, b in pairs]

    def write_matrix_csv(name, getter):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(headers) + "\n")
            for d in matrix.detectors:
                row = [d] + [getter(matrix.cells[(d, a, b)]) for a, b in pairs]
                fh.write(",".join(row) + "\n")

    write_matrix_csv("matrix_accuracy.csv", lambda c: f"{c.accuracy:.6f}")
    write_matrix_csv("matrix_precision.csv", lambda c: f"{c.precision:.6f}")
    write_matrix_csv("matrix_recall.csv", lambda c: f"{c.recall:.6f}")
    write_matrix_csv("matrix_counts.csv",
                     lambda c: f"{c.n_genuine}+{c.n_adversarial}")

    seeds = attributions.get("detector_seeds", [])
    with open(os.path.join(out_dir, "boxplot_accuracy.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("detector,train_attack,test_attack," +
                 ",".join(f"seed{s}" for s in seeds) + "\n")
        for d in matrix.detectors:
            for a, b in pairs:
                cell = matrix.cells[(d, a, b)]
                accs = ",".join(f"{v:.6f}" for v in cell.accuracies)
                fh.write(f"{d},{a},{b},{accs}\n")

    genuine_maps = attributions.get("genuine_maps", [])
    adv_maps = attributions.get("adv_maps", {})
    if genuine_maps:
        shift = matrix.analysis if "mean_abs_genuine" in matrix.analysis else \
            _distribution_shift_analysis(genuine_maps, adv_maps)
        methods = sorted(adv_maps)
        with open(os.path.join(out_dir, "feature_importance.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("feature,mean_abs_genuine," +
                     ",".join(f"mean_abs_{m}" for m in methods) + "\n")
            mg = shift["mean_abs_genuine"]
            for j in range(len(mg)):
                row = [str(j), f"{mg[j]:.10g}"]
                row += [f"{shift['mean_abs_adv'][m][j]:.10g}" for m in methods]
                fh.write(",".join(row) + "\n")
        rho = {"genuine_halves": shift["rho_genuine_halves"]}
        rho.update({f"genuine_vs_{m}": shift["rho_genuine_vs_adv"][m]
                    for m in methods})
        with open(os.path.join(out_dir, "spearman.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(rho, fh, sort_keys=True, indent=1)
            fh.write("\n")

        if genuine_maps and genuine_maps[0].values.ndim == 3:
            n_show = min(4, len(genuine_maps))
            _write_heatmaps(out_dir, "heatmap_genuine.ras",
                            [genuine_maps[i] for i in range(n_show)])
            for m in methods:
                n_show_m = min(4, len(adv_maps[m]))
                _write_heatmaps(out_dir, f"heatmap_{m}.ras",
                                [adv_maps[m][i] for i in range(n_show_m)])


def _write_heatmaps(out_dir, name, maps: list[AttributionMap]) -> None:
    values = np.stack([m.values for m in maps])
    labels = np.zeros(len(maps), dtype=np.uint8)
    storage.write_raster(os.path.join(out_dir, name), values, labels, labels)
