"""Central finite-difference verification of every autodiff rule.

Each check rebuilds the forward graph from scratch for every perturbed
evaluation, so the numeric gradient is fully independent of the tape. Used
by the test suite and the `udafeat gradcheck` subcommand.
"""

import numpy as np

from . import losses
from . import tensor as T
from .losses import CentroidSet, LossWeights, PseudoLabelGrid
from .segnet import SegNet, SegNetConfig
from .tensor import Tensor

EPS = 1e-3
TOL = 1e-3


def numeric_gradient(f, arrays, eps=EPS):
    """Central-difference gradient of scalar f(list of arrays) w.r.t. each."""
    grads = []
    for a_idx, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f(arrays)
            flat[i] = old - eps
            fm = f(arrays)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(f_tensor, arrays, eps=EPS):
    """f_tensor builds a scalar Tensor from Tensor leaves; returns the max
    elementwise relative error between autodiff and central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f_tensor(leaves)
    out.backward()
    auto = [lf.grad if lf.grad is not None else np.zeros_like(lf.data)
            for lf in leaves]

    def f_scalar(arrs):
        return f_tensor([Tensor(a) for a in arrs]).item()

    numeric = numeric_gradient(f_scalar, [a.copy() for a in arrays], eps)
    err = 0.0
    for a, n in zip(auto, numeric):
        err = max(err, float(np.max(np.abs(a - n) / (np.abs(n) + 1e-8))))
    return err


def _loss_fixture(rng):
    """Seeded micro-batch: two feature tensors [D,2,2], label grids, logits."""
    d, side, c = 4, 2, 3
    feats = [rng.uniform(0.1, 2.0, size=(d, side, side)) for _ in range(2)]
    grids = [PseudoLabelGrid(rng.integers(0, c, size=(side, side)))
             for _ in range(2)]
    logits = rng.normal(0.0, 1.5, size=(c, 4, 4))
    labels = rng.integers(0, c, size=(4, 4))
    return d, c, feats, grids, logits, labels


def op_checks(seed):
    """(name, builder, input arrays) for every differentiable primitive."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6c]))

    def r(*shape):
        # keep values away from 0 so |.|, relu and max kinks stay off the
        # finite-difference path
        a = rng.uniform(0.3, 2.0, size=shape)
        return a * rng.choice([-1.0, 1.0], size=shape)

    def rp(*shape):
        return rng.uniform(0.3, 2.0, size=shape)

    x44, y44 = r(4, 4), r(4, 4)
    checks = [
        ("add", lambda t: (t[0] + t[1]).sum(), [x44, y44]),
        ("sub", lambda t: (t[0] - t[1]).sum(), [x44, y44]),
        ("mul", lambda t: (t[0] * t[1]).sum(), [x44, y44]),
        ("div", lambda t: (t[0] / t[1]).sum(), [x44, rp(4, 4)]),
        ("scalar_ops", lambda t: ((t[0] * 3.0 + 1.5) / 2.0 - 0.25).sum(), [x44]),
        ("neg", lambda t: (-t[0]).sum(), [x44]),
        ("pow", lambda t: (t[0] ** 1.7).sum(), [rp(3, 3)]),
        ("log", lambda t: t[0].log().sum(), [rp(3, 3)]),
        ("exp", lambda t: t[0].exp().sum(), [r(3, 3)]),
        ("abs", lambda t: (t[0].abs() * t[0].abs()).sum(), [r(3, 3)]),
        ("relu", lambda t: (t[0].relu() ** 2.0).sum(), [r(5, 5)]),
        ("clip", lambda t: t[0].clip(-1.2, 1.2).sum() * 1.5, [r(4, 4)]),
        ("matmul", lambda t: (t[0] @ t[1]).sum(), [r(3, 4), r(4, 2)]),
        ("sum_axis", lambda t: (t[0].sum(axis=1) * t[0].sum(axis=1)).sum(),
         [r(3, 4)]),
        ("mean", lambda t: (t[0].mean(axis=0) ** 2.0).sum(), [rp(3, 4)]),
        ("max", lambda t: t[0].max() * 2.0, [rp(4, 4)]),
        ("softmax", lambda t: (t[0].softmax(axis=1) ** 2.0).sum(), [r(3, 4)]),
        ("log_softmax",
         lambda t: (t[0].log_softmax(axis=0) * t[0].log_softmax(axis=0)).sum(),
         [r(3, 4)]),
        ("reshape_transpose",
         lambda t: (t[0].reshape(2, 8).transpose() ** 2.0).sum(), [r(4, 4)]),
        ("slice", lambda t: (t[0][1:3, ::2] * 2.0).sum(), [r(4, 4)]),
        ("index_rows",
         lambda t: (t[0].index_rows(np.array([0, 2, 2, 1])) ** 2.0).sum(),
         [r(3, 4)]),
        ("concat",
         lambda t: (T.concat([t[0], t[1]], axis=0) ** 2.0).sum(),
         [r(2, 3), r(3, 3)]),
        ("add_channel_bias",
         lambda t: (T.add_channel_bias(t[0], t[1]) ** 2.0).sum(),
         [r(2, 3, 3), r(2)]),
        ("conv2d",
         lambda t: (T.conv2d(t[0], t[1], stride=1, padding=1) ** 2.0).sum(),
         [r(2, 5, 5), r(3, 2, 3, 3)]),
        ("conv2d_stride2",
         lambda t: (T.conv2d(t[0], t[1], stride=2, padding=1) ** 2.0).sum(),
         [r(2, 6, 6), r(2, 2, 3, 3)]),
        ("maxpool2x2", lambda t: (T.maxpool2x2(t[0]) ** 2.0).sum(),
         [r(2, 4, 4)]),
        ("upsample_nearest",
         lambda t: (T.upsample_nearest(t[0], 2) ** 2.0).sum(), [r(2, 3, 3)]),
        ("downsample_nearest",
         lambda t: (T.downsample_nearest(t[0], 2) ** 2.0).sum(), [r(2, 4, 4)]),
    ]
    return checks


def loss_checks(seed):
    """Finite-difference fixtures for the six loss operations."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x105e]))
    d, c, feats, grids, logits, labels = _loss_fixture(rng)

    def centroids(t):
        return losses.compute_centroids(t, grids, c)

    def cl(t):
        return losses.clustering_loss(t, grids, centroids(t))

    def cl_l2(t):
        return losses.clustering_loss(t, grids, centroids(t), distance="L2")

    def orth(t):
        return losses.orthogonality_loss(t, centroids(t))

    def sp(t):
        return losses.sparsity_loss(centroids(t))

    def ce(t):
        return losses.cross_entropy(t[0], labels)

    def em(t):
        return losses.max_squares_loss(t[0])

    def centroid_sum(t):
        return (centroids(t).centroids ** 2.0).sum()

    def tot(t):
        cents = centroids(t)
        return (losses.clustering_loss(t, grids, cents)
                + 0.3 * losses.orthogonality_loss(t, cents)
                + 0.2 * losses.sparsity_loss(cents))

    return [
        ("centroids", centroid_sum, feats),
        ("clustering_loss", cl, feats),
        ("clustering_loss_l2", cl_l2, feats),
        ("orthogonality_loss", orth, feats),
        ("sparsity_loss", sp, feats),
        ("cross_entropy", ce, [logits]),
        ("max_squares_loss", em, [logits]),
        ("combined_feature_losses", tot, feats),
    ]


def segnet_check(seed):
    """Finite differences through the full forward pass on a random
    parameter subset."""
    cfg = SegNetConfig(num_classes=3, feature_channels=4, height=8, width=8,
                       hidden=[4, 4, 4], seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xf0d]))
    image = rng.uniform(0.0, 1.0, size=(3, 8, 8))
    labels = rng.integers(0, 3, size=(8, 8))
    base = SegNet(cfg)

    def f(leaves):
        params = dict(zip(base.params.keys(), leaves))
        net = SegNet(cfg, params)
        _, logits = net.forward(Tensor(image))
        return losses.cross_entropy(logits, labels)

    # the deep ReLU/max-pool composition is piecewise linear; a 1e-3 step
    # crosses kinks, so this check uses a smaller perturbation
    arrays = [p.data.copy() for p in base.params.values()]
    return [("segnet_forward", f, arrays, 1e-5)]


def run_gradcheck(seed=0, include_segnet=True):
    """Run every check; returns [(name, max_rel_err, passed)]."""
    results = []
    suites = [op_checks(seed), loss_checks(seed)]
    if include_segnet:
        suites.append(segnet_check(seed))
    for suite in suites:
        for entry in suite:
            name, f, arrays = entry[:3]
            eps = entry[3] if len(entry) > 3 else EPS
            err = max_relative_error(f, arrays, eps=eps)
            results.append((name, err, err < TOL))
    return results
