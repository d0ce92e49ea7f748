"""Automatic natural-language explanations and ablation importance for neurons of vision classifiers."""

__version__ = "0.1.0"
