"""Contrastive pretraining over attention-selected feature sets, on synthetic scenes."""

__version__ = "0.1.0"
