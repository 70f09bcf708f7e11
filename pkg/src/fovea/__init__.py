"""Desk-scale person re-identification engine.

Foveated multi-scale tokenization, count-biased masked attention, and
keypoint-anchored feature pooling over a minimal float64 autodiff core.
"""

__version__ = "0.1.0"
