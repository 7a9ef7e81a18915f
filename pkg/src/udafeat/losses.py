"""Adaptation objective stack over encoder features.

Implements the supervised cross-entropy, the discriminative clustering loss
with differentiable class centroids, the feature-centroid orthogonality
(entropy) loss, the centroid sparsity loss, the image-wise class-balanced
max-squares entropy term, and their weighted totals.

All losses are pure functions of Tensor inputs and are differentiable; the
centroids are by default part of the graph so gradients flow into features
both directly and through the class means.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, downsample_nearest_labels

IGNORE_LABEL = 255


class EmptySupervisionError(ValueError):
    """All pixels of a supervised batch carry the ignore label."""


@dataclass
class LossWeights:
    lambda_cl: float = 0.1
    lambda_or: float = 0.1
    lambda_sp: float = 0.05
    lambda_em: float = 0.1

    def __post_init__(self):
        for name in ("lambda_cl", "lambda_or", "lambda_sp", "lambda_em"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
            setattr(self, name, v)


@dataclass
class LossReport:
    ce: float = 0.0
    cl: float = 0.0
    or_: float = 0.0
    sp: float = 0.0
    em: float = 0.0
    total_prime: float = 0.0
    total: float = 0.0


@dataclass
class PseudoLabelGrid:
    labels: np.ndarray  # int map at feature resolution h x w
    domain: str = "source"


@dataclass
class CentroidSet:
    centroids: Tensor  # [|C|, D], zero rows for absent classes
    counts: np.ndarray  # [|C|] ints
    present_mask: np.ndarray  # [|C|] bools

    @property
    def present(self):
        return np.nonzero(self.present_mask)[0]


def features_as_rows(feats):
    """Feature tensor [D,h,w] -> matrix of feature vectors [h*w, D]."""
    d = feats.shape[0]
    return feats.reshape(d, -1).transpose()


def _label_grid(labels):
    return labels.labels if isinstance(labels, PseudoLabelGrid) else np.asarray(labels)


def pseudo_labels(seg_logits, feature_size, domain="source"):
    """Per-pixel argmax of the logits, nearest-downsampled to the feature grid.

    Ties break toward the lowest class index (argmax convention).
    """
    data = seg_logits.data if isinstance(seg_logits, Tensor) else np.asarray(seg_logits)
    _, h_img, w_img = data.shape
    h, w = feature_size
    if h_img % h or w_img % w:
        raise ValueError("image size must be a multiple of the feature grid")
    full = data.argmax(axis=0)
    factor = h_img // h
    return PseudoLabelGrid(downsample_nearest_labels(full, factor), domain)


def compute_centroids(features, labels, num_classes, detach=False):
    """Per-class mean feature vectors over a joint source+target batch.

    Absent classes get a zero vector and present_mask False. With
    detach=False the centroids stay differentiable functions of the
    features.
    """
    features = list(features)
    if not features:
        raise ValueError("compute_centroids requires at least one feature tensor")
    rows = concat([features_as_rows(f) for f in features], axis=0)
    if detach:
        rows = rows.detach()
    lab = np.concatenate([_label_grid(l).ravel() for l in labels])
    if lab.size != rows.shape[0]:
        raise ValueError("label grids do not match feature tensors spatially")
    counts = np.bincount(lab, minlength=num_classes)[:num_classes]
    out_rows = []
    for j in range(num_classes):
        if counts[j] > 0:
            idx = np.nonzero(lab == j)[0]
            out_rows.append(rows.index_rows(idx).mean(axis=0).reshape(1, -1))
        else:
            out_rows.append(Tensor(np.zeros((1, rows.shape[1]))))
    return CentroidSet(concat(out_rows, axis=0), counts, counts > 0)


def _distance_rows(a, b, distance):
    """Row-wise distance between matrices of feature vectors."""
    if distance == "L1":
        return (a - b).abs().sum(axis=1)
    if distance == "L2":
        # epsilon keeps the sqrt differentiable at coincident points
        return (((a - b) ** 2.0).sum(axis=1) + 1e-12) ** 0.5
    raise ValueError(f"unknown distance {distance!r}")


def clustering_loss(features, labels, centroid_set, distance="L1"):
    """Mean feature-to-own-centroid distance minus mean inter-centroid distance.

    The repulsion term averages over ordered pairs of *present* distinct
    classes; with fewer than two present classes it is zero.
    """
    rows = concat([features_as_rows(f) for f in features], axis=0)
    lab = np.concatenate([_label_grid(l).ravel() for l in labels])
    own = centroid_set.centroids.index_rows(lab)
    attraction = _distance_rows(rows, own, distance).mean()
    present = centroid_set.present
    if len(present) < 2:
        return attraction
    pair_sum = None
    for j in present:
        for k in present:
            if j == k:
                continue
            d = _distance_rows(centroid_set.centroids[j:j + 1],
                               centroid_set.centroids[k:k + 1], distance).sum()
            pair_sum = d if pair_sum is None else pair_sum + d
    repulsion = pair_sum / float(len(present) * (len(present) - 1))
    return attraction - repulsion


def orthogonality_loss(features, centroid_set):
    """Mean entropy of the softmaxed feature-centroid scalar products.

    The softmax runs over present classes only; with fewer than two present
    classes the loss is defined as zero.
    """
    present = centroid_set.present
    if len(present) < 2:
        return Tensor(0.0)
    rows = concat([features_as_rows(f) for f in features], axis=0)
    cp = centroid_set.centroids.index_rows(present)
    logits = rows @ cp.transpose()
    logp = logits.log_softmax(axis=1)
    entropy = -(logp.exp() * logp).sum(axis=1)
    return entropy.mean()


def sparsity_loss(centroid_set, rho=0.5):
    """Negative squared distance of max-normalized centroids from the
    all-rho vector, summed over present classes.

    Zero centroids cannot be normalized and contribute nothing.
    """
    present = centroid_set.present
    if len(present) == 0:
        raise ValueError("sparsity_loss requires at least one present class")
    total = None
    for j in present:
        c = centroid_set.centroids[j]
        m = c.max()
        # near-dead centroids are skipped as well: the 1/max factor in the
        # normalization gradient diverges as the max approaches zero
        if m.item() <= 1e-8:
            continue
        contrib = ((c / m - rho) ** 2.0).sum()
        total = contrib if total is None else total + contrib
    if total is None:
        return Tensor(0.0)
    return -total


def max_squares_loss(target_logits, alpha=0.5, weight_clip=(0.1, 10.0)):
    """Image-wise class-balanced maximum-squares entropy objective.

    Per-class weights (n_bar/n_c)^alpha use the soft pixel counts n_c of the
    softmaxed predictions and are clipped to weight_clip.
    """
    num_classes, h, w = target_logits.shape
    n = h * w
    p = target_logits.reshape(num_classes, n).softmax(axis=0)
    # epsilon keeps the ratio finite when a class's soft count underflows
    # to zero; such classes sit at the clip bound where the gradient is
    # zero anyway
    soft_counts = p.sum(axis=1) + 1e-12
    nbar = n / float(num_classes)
    weights = ((nbar / soft_counts) ** alpha).clip(*weight_clip)
    sq = (p * p).sum(axis=1)
    return -(weights * sq).sum() / (2.0 * n)


def cross_entropy(logits, labels, ignore=IGNORE_LABEL):
    """Mean negative log-likelihood of the true class over non-ignored pixels."""
    num_classes, h, w = logits.shape
    lab = np.asarray(labels)
    if lab.shape != (h, w):
        raise ValueError(f"label map shape {lab.shape} does not match logits")
    valid = lab != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptySupervisionError("empty supervision: all pixels ignored")
    onehot = np.zeros((num_classes, h * w))
    flat = lab.ravel()
    vmask = valid.ravel()
    onehot[flat[vmask], np.nonzero(vmask)[0]] = 1.0
    logp = logits.reshape(num_classes, h * w).log_softmax(axis=0)
    return -(logp * Tensor(onehot)).sum() / float(n_valid)


def total_loss(net, source_image, source_labels, target_image, weights,
               include_em=True, source_gt_clusters=False,
               detach_centroids=False, distance="L1"):
    """Full training objective on one source and one target image.

    Cross-entropy uses the source ground truth; the feature-space losses run
    on joint source+target features with joint centroids; the max-squares
    term uses target logits only. Components whose weight is zero are
    skipped entirely so their gradient contribution is exactly absent.

    Returns (LossReport, total Tensor).
    """
    src_feats, src_logits = net.forward(source_image)
    tgt_feats, tgt_logits = net.forward(target_image)
    fh, fw = src_feats.shape[1], src_feats.shape[2]

    ce = cross_entropy(src_logits, source_labels)
    report = LossReport(ce=ce.item())
    total = ce

    need_feat = (weights.lambda_cl > 0 or weights.lambda_or > 0
                 or weights.lambda_sp > 0)
    if need_feat:
        if source_gt_clusters:
            src_grid = PseudoLabelGrid(
                downsample_nearest_labels(np.asarray(source_labels),
                                          source_image.shape[1] // fh),
                "source")
        else:
            src_grid = pseudo_labels(src_logits, (fh, fw), "source")
        tgt_grid = pseudo_labels(tgt_logits, (fh, fw), "target")
        feats = [src_feats, tgt_feats]
        grids = [src_grid, tgt_grid]
        cents = compute_centroids(feats, grids, net.cfg.num_classes,
                                  detach=detach_centroids)
        if weights.lambda_cl > 0:
            cl = clustering_loss(feats, grids, cents, distance)
            report.cl = cl.item()
            total = total + weights.lambda_cl * cl
        if weights.lambda_or > 0:
            orl = orthogonality_loss(feats, cents)
            report.or_ = orl.item()
            total = total + weights.lambda_or * orl
        if weights.lambda_sp > 0:
            # the sparsity objective acts on features only through the
            # centroid means, so it always keeps that gradient path even
            # when the clustering/orthogonality centroids are detached
            sp_cents = cents if not detach_centroids else \
                compute_centroids(feats, grids, net.cfg.num_classes)
            sp = sparsity_loss(sp_cents)
            report.sp = sp.item()
            total = total + weights.lambda_sp * sp

    report.total_prime = total.item()
    if include_em and weights.lambda_em > 0:
        em = max_squares_loss(tgt_logits)
        report.em = em.item()
        total = total + weights.lambda_em * em
    report.total = total.item()
    return report, total
