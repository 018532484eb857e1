"""Ensembled residual U-Net segmentation for multi-modal brain volumes."""

__version__ = "0.1.0"
