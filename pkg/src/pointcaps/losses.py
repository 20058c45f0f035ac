"""Classification, reconstruction and combined training losses."""

import numpy as np

from . import tensor as T
from .exceptions import InputError


def chamfer_distance(x, y):
    """Symmetric mean squared nearest-neighbour distance.

    Works on single clouds ``(N, 3)`` (scalar result) or batches
    ``(B, N, 3)`` (one value per sample).
    """
    return T.chamfer(x, y)


def margin_loss(lengths, labels, m_pos=0.9, m_neg=0.1, lam=0.5):
    """Per-sample margin loss summed over classes.

    ``lengths`` is ``(..., a)``; ``labels`` holds one class index per sample.
    """
    lengths = T.as_tensor(lengths)
    n_classes = lengths.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != lengths.shape[:-1]:
        raise InputError(f"labels shape {labels.shape} does not match lengths {lengths.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise InputError(f"label out of range [0, {n_classes})")
    present = np.eye(n_classes, dtype=lengths.dtype)[labels]
    hit = T.square(T.relu(m_pos - lengths))
    miss = T.square(T.relu(lengths - m_neg))
    per_class = present * hit + (lam * (1.0 - present)) * miss
    return T.tsum(per_class, axis=-1)


def total_loss(lengths, labels, x, x_hat, gamma=0.5, m_pos=0.9, m_neg=0.1, lam=0.5):
    """Margin loss plus ``gamma`` times Chamfer distance, averaged over the batch.

    Returns ``(total, margin, chamfer)`` as scalar tensors.
    """
    margin = T.mean(margin_loss(lengths, labels, m_pos, m_neg, lam))
    cd = T.mean(chamfer_distance(x, x_hat))
    return margin + gamma * cd, margin, cd
