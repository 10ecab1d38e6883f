"""Differentiable fuzzy-logic constraints for weakly supervised segmentation."""

__version__ = "0.1.0"
