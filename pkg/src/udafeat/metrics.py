"""Evaluation and ablation diagnostics.

Per-class IoU from confusion matrices, class-pair cosine-similarity
matrices, per-class sparsity scores, activation histograms over normalized
features and a deterministic 2-D PCA projection. All functions are pure
numpy; feature inputs are plain arrays [D,h,w] with label grids [h,w] at
feature resolution.
"""

import csv
from dataclasses import dataclass

import numpy as np

IGNORE_LABEL = 255
SPARSITY_TAU = 1e-4
HIST_BINS = 20


# -- confusion matrix / IoU --------------------------------------------------

def confusion_matrix(gt, pred, num_classes, ignore=IGNORE_LABEL):
    """Counts[gt, pred] over non-ignored pixels."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    valid = gt != ignore
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes) \
        .reshape(num_classes, num_classes)


def iou(cm):
    """Per-class IoU (nan where the class is absent from GT and prediction)
    and the mean over defined classes."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=1) + cm.sum(axis=0) - tp
    per_class = np.full(cm.shape[0], np.nan)
    defined = denom > 0
    per_class[defined] = tp[defined] / denom[defined]
    miou = float(per_class[defined].mean()) if defined.any() else float("nan")
    return per_class, miou


# -- feature-space diagnostics -----------------------------------------------

def _rows(features):
    d = features.shape[0]
    return features.reshape(d, -1).T


def similarity_matrix(features_list, labels_list, num_classes):
    """Average class-pair cosine similarity, per image then over images.

    Within-class entries exclude self-pairs; zero-norm vectors are skipped;
    pairs never co-present in any image come back invalid.
    """
    acc = np.zeros((num_classes, num_classes))
    hits = np.zeros((num_classes, num_classes), dtype=np.int64)
    for feats, labels in zip(features_list, labels_list):
        rows = _rows(np.asarray(feats))
        lab = np.asarray(labels).ravel()
        norms = np.linalg.norm(rows, axis=1)
        keep = (norms > 0) & (lab != IGNORE_LABEL)
        rows, lab, norms = rows[keep], lab[keep], norms[keep]
        if rows.shape[0] == 0:
            continue
        g = rows / norms[:, None]
        sim = g @ g.T
        for j in range(num_classes):
            idx_j = np.nonzero(lab == j)[0]
            if idx_j.size == 0:
                continue
            for k in range(j, num_classes):
                if k == j:
                    if idx_j.size < 2:
                        continue
                    block = sim[np.ix_(idx_j, idx_j)]
                    val = (block.sum() - idx_j.size) / \
                        (idx_j.size * (idx_j.size - 1))
                else:
                    idx_k = np.nonzero(lab == k)[0]
                    if idx_k.size == 0:
                        continue
                    val = sim[np.ix_(idx_j, idx_k)].mean()
                acc[j, k] += val
                hits[j, k] += 1
    valid = hits > 0
    out = np.full((num_classes, num_classes), np.nan)
    out[valid] = acc[valid] / hits[valid]
    # mirror to make the matrix exactly symmetric
    lower = np.tril_indices(num_classes, -1)
    out[lower] = out.T[lower]
    valid = valid | valid.T
    return out, valid


def _normalized_vectors(features):
    """Per-vector max-normalization; zero vectors are dropped."""
    rows = _rows(np.asarray(features))
    m = rows.max(axis=1)
    keep = m > 0
    return rows[keep] / m[keep, None], keep


def sparsity_scores(features_list, labels_list, num_classes, tau=SPARSITY_TAU):
    """Per-class fraction of normalized channels within tau of 0 or 1,
    averaged per class per image and then over images."""
    acc = np.zeros(num_classes)
    hits = np.zeros(num_classes, dtype=np.int64)
    for feats, labels in zip(features_list, labels_list):
        norm, keep = _normalized_vectors(feats)
        lab = np.asarray(labels).ravel()[keep]
        frac = ((norm < tau) | (norm > 1.0 - tau)).mean(axis=1)
        for j in range(num_classes):
            sel = (lab == j)
            if sel.any():
                acc[j] += frac[sel].mean()
                hits[j] += 1
    valid = hits > 0
    out = np.full(num_classes, np.nan)
    out[valid] = acc[valid] / hits[valid]
    return out, valid


def activation_histogram(features_list, bins=HIST_BINS):
    """Counts of per-vector max-normalized activations over [0,1]; the
    value 1.0 lands in the last bin."""
    counts = np.zeros(bins, dtype=np.int64)
    for feats in features_list:
        norm, _ = _normalized_vectors(feats)
        idx = np.minimum((norm.ravel() * bins).astype(np.int64), bins - 1)
        counts += np.bincount(idx, minlength=bins)
    return counts


def histogram_difference(counts_a, counts_b):
    return np.asarray(counts_a, dtype=np.int64) - np.asarray(counts_b, dtype=np.int64)


def project2d(features_list, labels_list, sample_cap=2000, seed=0):
    """Top-2 PCA projection of subsampled feature vectors.

    Deterministic: subsampling is seeded and each axis sign is fixed by
    making the largest-magnitude loading positive. Returns (coords [M,2],
    classes [M], components [D,2]).
    """
    rows = np.concatenate([_rows(np.asarray(f)) for f in features_list])
    lab = np.concatenate([np.asarray(l).ravel() for l in labels_list])
    if rows.shape[0] < 2:
        raise ValueError("project2d requires at least 2 feature vectors")
    if rows.shape[0] > sample_cap:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9ca]))
        pick = np.sort(rng.choice(rows.shape[0], size=sample_cap, replace=False))
        rows, lab = rows[pick], lab[pick]
    centered = rows - rows.mean(axis=0)
    scatter = centered.T @ centered
    evals, evecs = np.linalg.eigh(scatter)
    order = np.argsort(evals)[::-1]
    comps = evecs[:, order[:2]].copy()
    # rank < 2: collapse the unsupported axis to zeros
    for a in range(2):
        if evals[order[a]] <= 1e-12 * max(evals.max(), 1.0):
            comps[:, a] = 0.0
            continue
        pivot = np.argmax(np.abs(comps[:, a]))
        if comps[pivot, a] < 0:
            comps[:, a] = -comps[:, a]
    return centered @ comps, lab, comps


@dataclass
class DiagnosticsBundle:
    per_class_iou: np.ndarray = None
    miou: float = float("nan")
    similarity: np.ndarray = None
    similarity_valid: np.ndarray = None
    sparsity: np.ndarray = None
    sparsity_valid: np.ndarray = None
    histogram: np.ndarray = None
    projection: np.ndarray = None
    projection_classes: np.ndarray = None


# -- CSV output --------------------------------------------------------------

def write_iou_csv(path, per_class, miou, class_names):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for name, v in zip(class_names, per_class):
            w.writerow([name, "" if np.isnan(v) else f"{v:.9f}"])
        w.writerow(["mIoU", f"{miou:.9f}"])


def write_similarity_csv(path, matrix, valid, class_names):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + list(class_names))
        for name, row, vrow in zip(class_names, matrix, valid):
            w.writerow([name] + ["" if not v else f"{x:.9f}"
                                 for x, v in zip(row, vrow)])


def write_sparsity_csv(path, scores, valid, class_names):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "score"])
        for name, v, ok in zip(class_names, scores, valid):
            w.writerow([name, "" if not ok else f"{v:.9f}"])


def write_histogram_csv(path, counts, bins=HIST_BINS):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for i, c in enumerate(counts):
            w.writerow([f"{i / bins:.2f}", f"{(i + 1) / bins:.2f}", int(c)])


def write_projection_csv(path, coords, classes):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "class"])
        for (x, y), c in zip(coords, classes):
            w.writerow([f"{x:.9f}", f"{y:.9f}", int(c)])
