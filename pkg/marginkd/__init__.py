"""Margin-gated intra-class contrastive distillation on a numpy autodiff core."""

__version__ = "0.1.0"
