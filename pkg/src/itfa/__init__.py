"""Incremental few-shot object detection with a two-stage fine-tuning approach.

A miniature two-stage detector is trained on base classes, split into
parallel base/novel branches, and fine-tuned on K-shot novel data while the
whole base path stays frozen.
"""
from itfa.boxops import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
