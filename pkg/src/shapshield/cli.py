"""Command-line interface.

Subcommands:
    run             full experiment from a key-value config file
    train-victim    train and checkpoint a victim classifier
    attack          generate an adversarial set against a victim
    train-detector  train and checkpoint one detector
    detect          score an attack set with a trained detector

Every command exits nonzero on failure; `run` places all artifacts in a
timestamped directory unless --out is given.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import detectors as det_mod
from .attacks import AttackConfig, load_attack_set, run_attack_batch, save_attack_set
from .attribution import BackgroundSet, gradient_shap, victim_probability_fn
from .data import gen_images, gen_tabular, load_dataset, save_dataset, standardize
from .harness import ExperimentConfig, StageError, run_experiment
from .victims import VictimConfig, load_victim, model_space, predict_labels, \
    save_victim, train_victim

_LIST_FIELDS = {"detector_seeds", "attacks", "detectors"}
_ATTACK_FIELD_TYPES = {
    "epsilon": float, "step_size": float, "max_iters": int, "c_init": float,
    "binary_search_steps": int, "kappa": float, "cw_lr": float,
    "max_perturbed_features": int, "seed": int,
}


def parse_config_file(path) -> ExperimentConfig:
    """Parse the documented `key = value` experiment config format."""
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()

    cfg = ExperimentConfig()
    default_clamp = None
    if "task" in raw:
        cfg.task = raw.pop("task")
    default_clamp = (0.0, 1.0) if cfg.task == "image" else (-6.0, 6.0)
    if "clamp" in raw:
        lo, hi = [float(v) for v in raw.pop("clamp").split(",")]
        default_clamp = (lo, hi)

    attack_names = [v.strip() for v in raw.pop("attacks", "pgd").split(",") if v.strip()]
    attack_overrides: dict[str, dict] = {name: {} for name in attack_names}
    for key in list(raw):
        if "." in key:
            method, field_name = key.split(".", 1)
            if method in attack_overrides:
                if field_name not in _ATTACK_FIELD_TYPES:
                    raise ValueError(f"unknown attack option {key!r}")
                attack_overrides[method][field_name] = \
                    _ATTACK_FIELD_TYPES[field_name](raw.pop(key))
    cfg.attacks = [AttackConfig(method=name, clamp=default_clamp, **attack_overrides[name])
                   for name in attack_names]

    if "detectors" in raw:
        cfg.detectors = [v.strip() for v in raw.pop("detectors").split(",") if v.strip()]
    if "detector_seeds" in raw:
        cfg.detector_seeds = [int(v) for v in raw.pop("detector_seeds").split(",")]

    for key, value in raw.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            setattr(cfg, key, value.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(cfg, key, int(value))
        elif isinstance(current, float) or current is None:
            setattr(cfg, key, float(value))
        else:
            setattr(cfg, key, value)
    return cfg


def _load_model_space(data_path, kind, victim):
    ds = load_dataset(data_path, kind)
    x = model_space(ds)
    if victim.input_stats is not None and ds.kind == "tabular":
        x = standardize(ds.features, victim.input_stats)
    return ds, x


def cmd_run(args) -> int:
    cfg = parse_config_file(args.config)
    if args.out:
        cfg.out_dir = args.out
    elif cfg.out_dir == ExperimentConfig.out_dir:
        cfg.out_dir = os.path.join("runs", time.strftime("%Y%m%d-%H%M%S"))
    matrix = run_experiment(cfg)
    print(f"experiment complete; artifacts in {cfg.out_dir}")
    for (d, a, b), cell in sorted(matrix.cells.items()):
        print(f"  {d:14s} train={a:16s} test={b:16s} "
              f"accuracy={cell.accuracy:.3f} (n={cell.n_genuine}+{cell.n_adversarial})")
    return 0


def cmd_train_victim(args) -> int:
    if args.task == "tabular":
        ds = gen_tabular(args.n, args.features, args.seed)
    else:
        ds = gen_images(args.n, args.side, args.channels, args.seed)
    cfg = VictimConfig(seed=args.seed,
                       lr=0.005 if args.task == "image" else 0.01,
                       target_accuracy=0.90 if args.task == "image" else 0.85)
    victim = train_victim(ds, cfg)
    save_victim(victim, args.out)
    if args.data_out:
        save_dataset(ds, args.data_out)
    print(f"victim test accuracy {victim.meta['test_accuracy']:.3f}; "
          f"checkpoint written to {args.out}")
    return 0


def cmd_attack(args) -> int:
    victim = load_victim(args.victim)
    ds, x = _load_model_space(args.data, victim.task, victim)
    x_test, y_test = x[ds.test_idx], ds.test_labels()
    correct = predict_labels(victim, x_test) == y_test
    x_c, y_c = x_test[correct][: args.limit], y_test[correct][: args.limit]
    clamp = (0.0, 1.0) if victim.task == "image" else (-6.0, 6.0)
    cfg = AttackConfig(method=args.method, epsilon=args.epsilon,
                       max_iters=args.iters, max_perturbed_features=args.budget,
                       clamp=clamp, seed=args.seed)
    results = run_attack_batch(victim, x_c, y_c, cfg)
    save_attack_set(args.out, results, cfg, y_c)
    rate = float(np.mean([r.success for r in results])) if results else 0.0
    print(f"{args.method}: attacked {len(results)} samples, "
          f"success rate {rate:.3f}; attack set written to {args.out}")
    return 0


def _maps_for(victim, samples, data_path, background, n_path, seed):
    ds, x = _load_model_space(data_path, victim.task, victim)
    rng = np.random.default_rng(seed)
    take = min(background, len(ds.train_idx))
    rows = np.sort(rng.choice(len(ds.train_idx), size=take, replace=False))
    bg = BackgroundSet(samples=x[ds.train_idx][rows])
    f = victim_probability_fn(victim, input_shape=samples.shape[1:])
    return [gradient_shap(f, s, bg, n_path, seed) for s in samples]


def cmd_train_detector(args) -> int:
    victim = load_victim(args.victim)
    results, _, _ = load_attack_set(args.attack_set)
    originals = np.stack([r.original for r in results])
    adv = np.stack([r.adversarial for r in results if r.success])
    if args.kind in ("kernel_density", "ml_loo"):
        if args.kind == "kernel_density":
            det = det_mod.train_kernel_density_detector(victim, originals, adv)
        else:
            det = det_mod.train_ml_loo_detector(victim, originals, adv)
    else:
        maps_gen = _maps_for(victim, originals, args.data, args.background,
                             args.path_samples, args.seed)
        maps_adv = _maps_for(victim, adv, args.data, args.background,
                             args.path_samples, args.seed)
        from .data import NormStats
        raw = np.stack([m.values for m in maps_gen])
        flat = raw.reshape(raw.shape[0], -1)
        stats = NormStats(mean=flat.mean(axis=0), std=flat.std(axis=0))
        gen_std = standardize(raw, stats)
        adv_std = standardize(np.stack([m.values for m in maps_adv]), stats)
        if args.kind == "shap_mlp":
            det = det_mod.train_shap_mlp(gen_std, adv_std, seed=args.seed,
                                         norm_stats=stats)
        elif args.kind == "shap_conv":
            det = det_mod.train_shap_conv(gen_std, adv_std, seed=args.seed,
                                          norm_stats=stats)
        elif args.kind in ("shap_ae_svm", "shap_vae_svm"):
            det = det_mod.train_shap_autoencoder(
                gen_std, variational=(args.kind == "shap_vae_svm"),
                seed=args.seed, norm_stats=stats)
            det_mod.train_recon_svm(det, gen_std, adv_std)
        else:
            raise ValueError(f"unknown detector kind {args.kind!r}")
    det_mod.save_detector(det, args.out)
    print(f"{args.kind} detector written to {args.out}")
    return 0


def cmd_detect(args) -> int:
    det = det_mod.load_detector(args.detector)
    victim = load_victim(args.victim)
    results, _, _ = load_attack_set(args.attack_set)
    adv = np.stack([r.adversarial for r in results if r.success])
    if det.kind in ("kernel_density", "ml_loo"):
        verdicts = det_mod.detect_batch(det, adv)
    else:
        maps = _maps_for(victim, adv, args.data, args.background,
                         args.path_samples, args.seed)
        raw = np.stack([m.values for m in maps])
        std = standardize(raw, det.norm_stats)
        for m, v in zip(maps, std):
            m.values = v
        verdicts = det_mod.detect_batch(det, maps)
    flagged = sum(v.label == "adversarial" for v in verdicts)
    print(f"{det.kind}: flagged {flagged}/{len(verdicts)} adversarial samples "
          f"({flagged / max(1, len(verdicts)):.1%} detection rate)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shapshield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run a full experiment from a config file")
    runp.add_argument("--config", required=True)
    runp.add_argument("--out", default=None, help="output directory")
    runp.set_defaults(fn=cmd_run)

    tv = sub.add_parser("train-victim", help="train a victim classifier")
    tv.add_argument("--task", choices=["tabular", "image"], required=True)
    tv.add_argument("--n", type=int, default=2000)
    tv.add_argument("--features", type=int, default=62)
    tv.add_argument("--side", type=int, default=28)
    tv.add_argument("--channels", type=int, default=1)
    tv.add_argument("--seed", type=int, default=0)
    tv.add_argument("--out", required=True)
    tv.add_argument("--data-out", default=None,
                    help="also export the generated dataset")
    tv.set_defaults(fn=cmd_train_victim)

    at = sub.add_parser("attack", help="generate adversarial samples")
    at.add_argument("--victim", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--method", choices=["pgd", "cw", "saliency_sparse"],
                    default="pgd")
    at.add_argument("--epsilon", type=float, default=0.1)
    at.add_argument("--iters", type=int, default=None)
    at.add_argument("--budget", type=int, default=5,
                    help="max perturbed features for saliency_sparse")
    at.add_argument("--limit", type=int, default=200,
                    help="max samples to attack")
    at.add_argument("--seed", type=int, default=0)
    at.add_argument("--out", required=True)
    at.set_defaults(fn=cmd_attack)

    td = sub.add_parser("train-detector", help="train one detector")
    td.add_argument("--kind", required=True)
    td.add_argument("--victim", required=True)
    td.add_argument("--attack-set", required=True)
    td.add_argument("--data", required=True)
    td.add_argument("--background", type=int, default=64)
    td.add_argument("--path-samples", type=int, default=4)
    td.add_argument("--seed", type=int, default=0)
    td.add_argument("--out", required=True)
    td.set_defaults(fn=cmd_train_detector)

    de = sub.add_parser("detect", help="score an attack set with a detector")
    de.add_argument("--detector", required=True)
    de.add_argument("--victim", required=True)
    de.add_argument("--attack-set", required=True)
    de.add_argument("--data", required=True)
    de.add_argument("--background", type=int, default=64)
    de.add_argument("--path-samples", type=int, default=4)
    de.add_argument("--seed", type=int, default=17)
    de.set_defaults(fn=cmd_detect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
