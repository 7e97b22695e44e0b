"""Feature-statistics domain randomization for 2-D segmentation.

Perturbation operators (uniform statistics randomization with channel-wise
style mixing, plus shuffle-mix, exact rank matching, and Gaussian-uncertainty
baselines), a desk-scale residual encoder-decoder segmentation network with
named insertion points, a procedural multi-domain dataset generator, DSC/ASD
metrics, and a leave-one-domain-out benchmark harness.
"""

from .tensor_core import (
    ChannelStats,
    RandomSource,
    Uniform,
    Beta,
    Bernoulli,
    Normal,
    apply_affine,
    channel_mean_std,
    normalize,
    rank_match,
    sample,
)

__all__ = [
    "ChannelStats",
    "RandomSource",
    "Uniform",
    "Beta",
    "Bernoulli",
    "Normal",
    "apply_affine",
    "channel_mean_std",
    "normalize",
    "rank_match",
    "sample",
]

__version__ = "0.1.0"
