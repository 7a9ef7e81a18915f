"""Feature-space unsupervised domain adaptation laboratory: autodiff core,
toy segmentation network, synthetic two-domain data, trainer and
diagnostics."""

__version__ = "0.1.0"
