"""Command-line entry point.

    udafeat generate  [--config PATH] [--out DIR] [--seed N] [overrides]
    udafeat train     [--config PATH] --data DIR --out DIR [--ablation LIST] [--seed N]
    udafeat eval      CHECKPOINT --data DIR --out DIR
    udafeat gradcheck [--seed N]
    udafeat diagnose  CKPT_A CKPT_B --data DIR --out DIR

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 I/O error,
4 numeric abort, 5 artifact mismatch.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import gradcheck, metrics, synthdata, trainer
from .config import ConfigError, ExperimentConfig
from .segnet import DOWNSAMPLE_FACTOR, load_checkpoint
from .synthdata import CLASS_NAMES
from .tensor import downsample_nearest_labels
from .trainer import TrainingDivergedError, evaluate

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

ABLATION_MODULES = ("cl", "or", "sp", "em")


class ArtifactMismatchError(RuntimeError):
    pass


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            scene=dataclasses.replace(cfg.scene, seed=seed),
            segnet=dataclasses.replace(cfg.segnet, seed=seed),
            train=dataclasses.replace(cfg.train, seed=seed))
    return cfg


def _apply_ablation(train_cfg, mask):
    """Zero the loss weights outside the comma set; 'none' disables all."""
    parts = [] if mask == "none" else [p for p in mask.split(",") if p]
    unknown = set(parts) - set(ABLATION_MODULES)
    if unknown:
        raise ConfigError(f"unknown ablation modules: {sorted(unknown)}")
    w = train_cfg.weights
    new_w = dataclasses.replace(
        w,
        lambda_cl=w.lambda_cl if "cl" in parts else 0.0,
        lambda_or=w.lambda_or if "or" in parts else 0.0,
        lambda_sp=w.lambda_sp if "sp" in parts else 0.0,
        lambda_em=w.lambda_em if "em" in parts else 0.0)
    return dataclasses.replace(train_cfg, weights=new_w,
                               include_em="em" in parts)


def cmd_generate(args):
    cfg = _load_config(args)
    n_source = args.n_source or cfg.n_source
    n_target = args.n_target or cfg.n_target
    n_val = args.n_val or cfg.n_val
    out = args.out or cfg.out or "dataset"
    manifest = synthdata.generate_split(cfg.scene, cfg.shift, n_source,
                                        n_target, n_val, out)
    print(manifest)
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    train_cfg = cfg.train
    if args.ablation is not None:
        train_cfg = _apply_ablation(train_cfg, args.ablation)
    out = args.out or cfg.out or "run"
    os.makedirs(out, exist_ok=True)
    t = trainer.run_experiment(train_cfg, cfg.segnet, args.data,
                               log_path=os.path.join(out, "metrics.csv"),
                               ckpt_dir=out)
    print(f"best_miou={t.best_miou:.6f}")
    return EXIT_OK


def _val_diagnostics(net, data_dir):
    val = synthdata.load_split(data_dir, "val")
    sample = val[0]
    if sample.image.shape != (3, net.cfg.height, net.cfg.width):
        raise ArtifactMismatchError(
            f"checkpoint expects {net.cfg.height}x{net.cfg.width} input, "
            f"dataset provides {sample.image.shape[1]}x{sample.image.shape[2]}")
    return evaluate(net, val, full=True)


def cmd_eval(args):
    net = load_checkpoint(args.checkpoint)
    bundle = _val_diagnostics(net, args.data)
    out = args.out or "eval"
    os.makedirs(out, exist_ok=True)
    names = CLASS_NAMES[:net.cfg.num_classes]
    metrics.write_iou_csv(os.path.join(out, "iou.csv"),
                          bundle.per_class_iou, bundle.miou, names)
    metrics.write_similarity_csv(os.path.join(out, "similarity.csv"),
                                 bundle.similarity, bundle.similarity_valid,
                                 names)
    metrics.write_sparsity_csv(os.path.join(out, "sparsity.csv"),
                               bundle.sparsity, bundle.sparsity_valid, names)
    metrics.write_histogram_csv(os.path.join(out, "histogram.csv"),
                                bundle.histogram)
    metrics.write_projection_csv(os.path.join(out, "projection.csv"),
                                 bundle.projection, bundle.projection_classes)
    print(f"miou={bundle.miou:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    failed = False
    for seed in range(args.seed, args.seed + args.n_seeds):
        for name, err, ok in gradcheck.run_gradcheck(seed):
            status = "ok" if ok else "FAIL"
            print(f"seed={seed} {name}: max_rel_err={err:.3e} {status}")
            failed = failed or not ok
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_diagnose(args):
    net_a = load_checkpoint(args.checkpoint_a)
    net_b = load_checkpoint(args.checkpoint_b)
    if net_a.cfg != net_b.cfg:
        raise ArtifactMismatchError("checkpoints disagree on SegNetConfig")
    out = args.out or "diagnose"
    os.makedirs(out, exist_ok=True)
    names = CLASS_NAMES[:net_a.cfg.num_classes]
    bundles = {}
    for tag, net in (("a", net_a), ("b", net_b)):
        b = _val_diagnostics(net, args.data)
        bundles[tag] = b
        metrics.write_similarity_csv(
            os.path.join(out, f"similarity_{tag}.csv"),
            b.similarity, b.similarity_valid, names)
        metrics.write_sparsity_csv(os.path.join(out, f"sparsity_{tag}.csv"),
                                   b.sparsity, b.sparsity_valid, names)
        metrics.write_histogram_csv(os.path.join(out, f"histogram_{tag}.csv"),
                                    b.histogram)
    diff = metrics.histogram_difference(bundles["a"].histogram,
                                        bundles["b"].histogram)
    metrics.write_histogram_csv(os.path.join(out, "histogram_diff.csv"), diff)
    _write_intra_similarity_delta(
        os.path.join(out, "similarity_delta.csv"), bundles, names)
    return EXIT_OK


def _write_intra_similarity_delta(path, bundles, names):
    import csv
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "intra_a", "intra_b", "delta"])
        for i, name in enumerate(names):
            a = bundles["a"].similarity[i, i]
            b = bundles["b"].similarity[i, i]
            row = [name]
            for v in (a, b, a - b):
                row.append("" if np.isnan(v) else f"{v:.9f}")
            w.writerow(row)


def build_parser():
    p = argparse.ArgumentParser(prog="udafeat")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic two-domain dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-source", type=int, dest="n_source")
    g.add_argument("--n-target", type=int, dest="n_target")
    g.add_argument("--n-val", type=int, dest="n_val")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="warmup + adaptation training run")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--ablation",
                   help="comma set from {cl,or,sp,em}, or 'none'")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=1, dest="n_seeds")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("diagnose", help="compare two checkpoints")
    d.add_argument("checkpoint_a")
    d.add_argument("checkpoint_b")
    d.add_argument("--data", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactMismatchError as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
