"""Self-supervised visual representation learning toolkit.

Thin python surface over the C++ core: synthetic data, method losses,
pretraining on synthetic blobs, and offline evaluation.
"""

from sslkit._core import (
    barlow,
    byol,
    canonical_config,
    knn_eval,
    linear_eval,
    method_names,
    nt_xent,
    pca2d,
    pretrain,
    synth_blobs,
    vicreg,
)

__all__ = [
    "barlow",
    "byol",
    "canonical_config",
    "knn_eval",
    "linear_eval",
    "method_names",
    "nt_xent",
    "pca2d",
    "pretrain",
    "synth_blobs",
    "vicreg",
]
