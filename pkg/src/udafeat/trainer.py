"""Two-phase optimization driver: supervised source warm-up, then joint
adaptation with the full objective.

SGD with momentum and weight decay, polynomial learning-rate decay over a
single continuous schedule (warmup + adapt), batch size 1 per domain. All
randomness flows from one root seed through named sub-streams so ablation
runs that differ only in loss weights see identical data order.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses, metrics, synthdata
from .losses import LossReport, LossWeights
from .segnet import DOWNSAMPLE_FACTOR, SegNet, save_checkpoint
from .tensor import Tensor, downsample_nearest_labels

LOG_HEADER = ["step", "lr", "ce", "cl", "or", "sp", "em",
              "total_prime", "total", "val_miou"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, report):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


@dataclass
class TrainConfig:
    base_lr: float = 2.5e-4
    poly_power: float = 0.9
    weight_decay: float = 5e-4
    momentum: float = 0.9
    warmup_steps: int = 2000
    adapt_steps: int = 3000
    batch_size: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    include_em: bool = True
    source_gt_clusters: bool = False
    detach_centroids: bool = False
    distance: str = "L1"
    eval_every: int = 500

    def __post_init__(self):
        if self.base_lr < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("rates must be non-negative")
        if self.warmup_steps + self.adapt_steps < 1:
            raise ValueError("total steps must be >= 1")
        if self.distance not in ("L1", "L2"):
            raise ValueError("distance must be L1 or L2")

    @property
    def total_steps(self):
        return self.warmup_steps + self.adapt_steps

    def lr_at(self, step):
        """Closed-form poly decay; reaches exactly 0 when step == total."""
        return self.base_lr * (1.0 - step / self.total_steps) ** self.poly_power


def benchmark_profile(seed=0, **overrides):
    """Training settings tuned for the 64x64 from-scratch synthetic benchmark.

    The from-scratch network needs a far larger step size than a pretrained
    backbone would, and at that step size the loss weights rebalance: the
    clustering term's centroid-repulsion gradient grows features without
    bound when the centroids stay in the graph, so the profile freezes the
    clustering/orthogonality centroids per step, while the entropy of the
    feature-centroid products starts tiny and needs a larger weight to
    register. Values were selected on a held-out validation split.
    """
    defaults = dict(base_lr=0.05, warmup_steps=2000, adapt_steps=3000,
                    eval_every=500, seed=seed, detach_centroids=True,
                    weights=LossWeights(lambda_cl=0.002, lambda_or=0.75,
                                        lambda_sp=0.01, lambda_em=0.15))
    defaults.update(overrides)
    return TrainConfig(**defaults)


def evaluate(net, samples, full=False):
    """Per-class IoU / mIoU on a labeled split; with full=True also the
    feature-space diagnostics. Pure function of (net params, samples)."""
    if not samples:
        raise ValueError("evaluate requires a non-empty split")
    num_classes = net.cfg.num_classes
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    feats_list, grid_list = [], []

    def one(sample):
        feats, logits = net.forward(Tensor(sample.image))
        return feats.data, logits.data.argmax(axis=0)

    workers = int(os.environ.get("UDAFEAT_THREADS", "1"))
    if workers > 1:
        # independent graphs per image; ordered map keeps reduction order
        # fixed so results stay bit-identical for any worker count
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(s) for s in samples]
    for s, (feats_data, pred) in zip(samples, results):
        cm += metrics.confusion_matrix(s.labels, pred, num_classes)
        if full:
            feats_list.append(feats_data)
            grid_list.append(downsample_nearest_labels(s.labels,
                                                       DOWNSAMPLE_FACTOR))
    per_class, miou = metrics.iou(cm)
    bundle = metrics.DiagnosticsBundle(per_class_iou=per_class, miou=miou)
    if full:
        bundle.similarity, bundle.similarity_valid = \
            metrics.similarity_matrix(feats_list, grid_list, num_classes)
        bundle.sparsity, bundle.sparsity_valid = \
            metrics.sparsity_scores(feats_list, grid_list, num_classes)
        bundle.histogram = metrics.activation_histogram(feats_list)
        coords, classes, _ = metrics.project2d(feats_list, grid_list,
                                               seed=net.cfg.seed)
        bundle.projection, bundle.projection_classes = coords, classes
    return bundle


class Trainer:
    def __init__(self, cfg, net, source, target, val=None,
                 log_path=None, ckpt_dir=None):
        self.cfg = cfg
        self.net = net
        self.source = source
        self.target = target
        self.val = val
        self.log_path = log_path
        self.ckpt_dir = ckpt_dir
        self.step = 0
        self.rows = []
        self.best_miou = -1.0
        self.best_net = None
        self._momentum = {k: np.zeros_like(v.data)
                          for k, v in net.params.items()}
        ss = np.random.SeedSequence
        self._rng_src = np.random.default_rng(ss([cfg.seed, 1]))
        self._rng_tgt = np.random.default_rng(ss([cfg.seed, 2]))
        self._rng_src_aug = np.random.default_rng(ss([cfg.seed, 3]))
        self._rng_tgt_aug = np.random.default_rng(ss([cfg.seed, 4]))

    # -- sampling ----------------------------------------------------------

    def _draw_source(self):
        idx = int(self._rng_src.integers(len(self.source)))
        return synthdata.augment(self.source[idx], self._rng_src_aug)

    def _draw_target(self):
        idx = int(self._rng_tgt.integers(len(self.target)))
        return synthdata.augment(self.target[idx], self._rng_tgt_aug)

    # -- optimization ------------------------------------------------------

    def _apply_update(self, lr):
        cfg = self.cfg
        for name, p in self.net.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self._momentum[name]
            v *= cfg.momentum
            v += g + cfg.weight_decay * p.data
            p.data -= lr * v
            p.grad = None

    def _ce_step(self, sample):
        _, logits = self.net.forward(Tensor(sample.image))
        ce = losses.cross_entropy(logits, sample.labels)
        report = LossReport(ce=ce.item(), total_prime=ce.item(),
                            total=ce.item())
        return report, ce

    def _adapt_step(self):
        cfg = self.cfg
        src = self._draw_source()
        w = cfg.weights
        adaptive = (w.lambda_cl > 0 or w.lambda_or > 0 or w.lambda_sp > 0
                    or (cfg.include_em and w.lambda_em > 0))
        if not adaptive:
            return self._ce_step(src)
        tgt = self._draw_target()
        return losses.total_loss(
            self.net, Tensor(src.image), src.labels, Tensor(tgt.image), w,
            include_em=cfg.include_em,
            source_gt_clusters=cfg.source_gt_clusters,
            detach_centroids=cfg.detach_centroids,
            distance=cfg.distance)

    def _run_step(self, adapt):
        cfg = self.cfg
        lr = cfg.lr_at(self.step)
        if adapt:
            report, total = self._adapt_step()
        else:
            report, total = self._ce_step(self._draw_source())
        if not np.isfinite(report.total):
            raise TrainingDivergedError(self.step, report)
        total.backward()
        self._apply_update(lr)
        val_miou = ""
        done = self.step + 1 == cfg.total_steps
        if self.val and cfg.eval_every > 0 and \
                ((self.step + 1) % cfg.eval_every == 0 or done):
            miou = evaluate(self.net, self.val).miou
            val_miou = f"{miou:.17g}"
            if miou > self.best_miou:
                self.best_miou = miou
                self.best_net = self.net.copy()
            if self.ckpt_dir:
                save_checkpoint(os.path.join(
                    self.ckpt_dir, f"ckpt_{self.step + 1:06d}.bin"), self.net)
                if self.best_net is not None:
                    save_checkpoint(os.path.join(self.ckpt_dir, "best.bin"),
                                    self.best_net)
        self.rows.append([str(self.step), f"{lr:.17g}",
                          f"{report.ce:.17g}", f"{report.cl:.17g}",
                          f"{report.or_:.17g}", f"{report.sp:.17g}",
                          f"{report.em:.17g}", f"{report.total_prime:.17g}",
                          f"{report.total:.17g}", val_miou])
        self.step += 1

    def warmup(self):
        for _ in range(self.cfg.warmup_steps):
            self._run_step(adapt=False)
        return self.net

    def adapt(self):
        for _ in range(self.cfg.adapt_steps):
            self._run_step(adapt=True)
        return self.net

    def run(self):
        try:
            self.warmup()
            self.adapt()
        finally:
            self._flush_log()
        if self.best_net is None:
            self.best_net = self.net.copy()
            if self.val:
                self.best_miou = evaluate(self.net, self.val).miou
        return self.net

    def _flush_log(self):
        if not self.log_path:
            return
        with open(self.log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_HEADER)
            w.writerows(self.rows)


def run_experiment(cfg, segnet_cfg, data_root, log_path=None, ckpt_dir=None):
    """Load a dataset, train warmup + adapt, return the Trainer."""
    source = synthdata.load_split(data_root, "source")
    target = synthdata.load_split(data_root, "target")
    val = synthdata.load_split(data_root, "val")
    net = SegNet(segnet_cfg)
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    trainer = Trainer(cfg, net, source, target, val,
                      log_path=log_path, ckpt_dir=ckpt_dir)
    trainer.run()
    return trainer
