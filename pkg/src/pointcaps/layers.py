"""Convolutional capsule layers and the fully connected class capsule layer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, InputError
from .routing import DYNAMIC, EUCLIDEAN, route


def init_uniform(shape, fan_in, rng, dtype=np.float64):
    """Zero-mean uniform init with half-width 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_kernels(kernels, count, width, layer):
    expected = (count, 1, width)
    if tuple(kernels.shape) != expected:
        raise ConfigurationError(f"{layer}: kernels {tuple(kernels.shape)} != expected {expected}")


def pointcap_a(x, kernels, bias, c_out, d_out, routing=EUCLIDEAN, iterations=3, **route_kw):
    """1D convolutional capsule layer.

    Each child capsule row of ``x`` (``(..., c_in, d_in)``) is convolved with
    ``c_out * d_out`` full-width kernels, passed through swish and reshaped to
    votes ``(..., c_in, c_out, d_out)``, which are then routed. Returns the
    parent capsules and the :class:`RoutingResult` (its logits give the
    child-to-parent assignment).
    """
    x = T.as_tensor(x)
    _check_kernels(kernels, c_out * d_out, x.shape[-1], "PointCapA")
    conv = T.swish(T.conv1d_feature(x, kernels, bias))
    votes = T.reshape(conv, conv.shape[:-1] + (c_out, d_out))
    result = route(votes, routing, iterations, **route_kw)
    return result.parents, result


def pointcap_b(x, kernels, bias, c_out, d_out, routing=DYNAMIC, iterations=3, **route_kw):
    """2D convolutional capsule layer over an entity axis.

    ``x`` is ``(..., E, c_in, d_in)``. Every entity is flattened to a width
    ``c_in * d_in`` strip and convolved with a ``(1, d_in)`` kernel at stride
    ``d_in``, giving exactly ``c_in`` positions; the swish-activated result is
    reshaped to votes and routed per entity.
    """
    x = T.as_tensor(x)
    c_in, d_in = x.shape[-2:]
    _check_kernels(kernels, c_out * d_out, d_in, "PointCapB")
    strip = T.reshape(x, x.shape[:-2] + (c_in * d_in, 1))
    conv = T.conv2d_strided(strip, kernels, stride=d_in, bias=bias)
    votes = T.reshape(T.swish(conv), conv.shape[:-1] + (c_out, d_out))
    result = route(votes, routing, iterations, **route_kw)
    return result.parents, result


def pointcap_c(x, kernels, bias, c_out, d_out):
    """Per-entity full-width convolution followed by squash (no routing)."""
    x = T.as_tensor(x)
    if x.ndim < 3:
        raise ConfigurationError(f"PointCapC expects (..., E, c_in, d_in), got {x.shape}")
    c_in, d_in = x.shape[-2:]
    _check_kernels(kernels, c_out * d_out, c_in * d_in, "PointCapC")
    flat = T.reshape(x, x.shape[:-2] + (c_in * d_in,))
    conv = T.conv1d_feature(flat, kernels, bias)
    return T.squash(T.reshape(conv, flat.shape[:-1] + (c_out, d_out)))


def digitcap(x, weights, routing=DYNAMIC, iterations=3, **route_kw):
    """Fully connected capsule layer with one transformation matrix per pair.

    ``x`` is ``(..., c_in, d_in)`` and ``weights`` ``(c_in, a, d_in, d_out)``.
    Returns ``(capsules (..., a, d_out), lengths (..., a), routing result)``.
    """
    x = T.as_tensor(x)
    c_in, d_in = x.shape[-2:]
    if weights.ndim != 4 or tuple(weights.shape[::2]) != (c_in, d_in):
        raise ConfigurationError(f"DigitCap: weights {tuple(weights.shape)} do not fit input {x.shape}")
    lead = x.shape[:-2]
    flat = T.reshape(x, (-1, c_in, d_in))
    votes = T.einsum("bid,iade->biae", flat, weights)
    votes = T.reshape(votes, lead + votes.shape[1:])
    result = route(votes, routing, iterations, **route_kw)
    lengths = T.vector_norm(result.parents, axis=-1)
    return result.parents, lengths, result


def mask_activity(digit, label=None):
    """Select one class capsule per sample.

    With ``label`` the given row is taken (training); otherwise the row with
    the largest squared length. Only the ``d_out`` vector is returned, never a
    class one-hot, so downstream decoding is class independent.
    """
    digit = T.as_tensor(digit)
    n_classes = digit.shape[-2]
    if label is None:
        label = np.argmax((digit.data ** 2).sum(-1), axis=-1)
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= n_classes):
        raise InputError(f"label out of range [0, {n_classes})")
    if label.shape != digit.shape[:-2]:
        raise InputError(f"label shape {label.shape} does not match capsules {digit.shape[:-2]}")
    onehot = np.eye(n_classes, dtype=digit.dtype)[label]
    return T.tsum(T.reshape(T.Tensor(onehot), onehot.shape + (1,)) * digit, axis=-2)
