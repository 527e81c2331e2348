"""Semantic and spatial rectification of class activation maps.

Numerical core of a weakly supervised segmentation pipeline: cross-modal
prototype alignment (contrastive training of projection heads against
clustered prototypes) and superpixel-guided correction (SLIC-derived masking
of a fused attention-affinity matrix used to propagate and clean CAMs),
together with tensor file I/O, synthetic fixtures, and segmentation metrics.
"""

from . import affinity, clustering, cmpa, config, evaluation, fixture, superpixel, tensor_io

__version__ = "0.1.0"

__all__ = [
    "affinity",
    "clustering",
    "cmpa",
    "config",
    "evaluation",
    "fixture",
    "superpixel",
    "tensor_io",
    "__version__",
]
