"""Supervised contrastive losses, their analytic gradients and a small
two-stage training harness on synthetic data."""

from .embedding import DegenerateRowError, normalize_rows, pairwise_inner
from .losses import LossSpec, MultiviewBatch, Variant, compute_loss

__all__ = [
    "DegenerateRowError",
    "LossSpec",
    "MultiviewBatch",
    "Variant",
    "compute_loss",
    "normalize_rows",
    "pairwise_inner",
]

__version__ = "0.1.0"
