"""Multi-view self-supervised disentanglement for image denoising."""

__version__ = "0.1.0"
