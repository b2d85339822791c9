"""Channel-wise max pooling over a point set."""

from dataclasses import dataclass

import numpy as np


@dataclass
class GlobalFeature:
    a: np.ndarray  # (k,)
    argmax: np.ndarray  # (k,) index of the point that supplied each channel


def max_aggregate(embeddings):
    """Per-channel max over the rows of an (N, K) embedding matrix.

    Ties go to the smallest row index, so the contributing point of every
    channel is well defined.
    """
    z = np.asarray(embeddings)
    if z.ndim != 2:
        raise ValueError(f"expected an (N, K) embedding matrix, got shape {z.shape}")
    if z.shape[0] == 0:
        raise ValueError("cannot aggregate an empty point set")
    # np.argmax returns the first occurrence of the maximum
    idx = np.argmax(z, axis=0)
    return GlobalFeature(z[idx, np.arange(z.shape[1])], idx)


def max_aggregate_batch(embeddings):
    """Batched variant over (B, N, K); returns (values (B, K), argmax (B, K))."""
    z = np.asarray(embeddings)
    idx = np.argmax(z, axis=1)
    vals = np.take_along_axis(z, idx[:, None, :], axis=1)[:, 0, :]
    return vals, idx
