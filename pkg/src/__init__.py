# src/__init__.py
"""MFMIL: multi-fold multiple instance learning for weakly supervised localization."""

__version__ = "1.0.0"
__build__ = 1000001
__author__ = "cyco"

__all__ = ["__version__", "__build__", "__author__"]
