"""Weakly supervised nested multiple-instance learning toolkit.

Pieces: a small tape-based autodiff core (float64, eleven math kernels),
contrastive / focal-Tversky losses, an encoder stack with vector
augmentation, gated-attention MIL aggregators with nested (region level
then bag level) attention, ROI mask morphology for tissue segmentations,
rank-based evaluation metrics, and a CLI harness for the synthetic
Gaussian-bag benchmark and the full pipeline.
"""

__version__ = "0.1.0"
