"""Routing-by-agreement between child and parent capsules.

Votes have trailing dims ``(c_child, c_parent, d_parent)``; any leading dims
(batch, entity) are routed independently with the same loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, DimensionError

EUCLIDEAN = "ER"
DYNAMIC = "DR"
ROUTING_KINDS = (EUCLIDEAN, DYNAMIC)


@dataclass
class RoutingResult:
    parents: T.Tensor
    logits: T.Tensor
    couplings: T.Tensor
    history: list = field(default_factory=list)


def euclidean_agreement(votes, parents):
    """Negative squared distance between each vote and its parent."""
    diff = votes - T.reshape(parents, parents.shape[:-2] + (1,) + parents.shape[-2:])
    return -T.tsum(T.square(diff), axis=-1)


def dot_agreement(votes, parents):
    p = T.reshape(parents, parents.shape[:-2] + (1,) + parents.shape[-2:])
    return T.tsum(votes * p, axis=-1)


def cosine_agreement(votes, parents, eps=1e-12):
    p = T.reshape(parents, parents.shape[:-2] + (1,) + parents.shape[-2:])
    dots = T.tsum(votes * p, axis=-1)
    return dots / (T.vector_norm(votes, eps=eps) * T.vector_norm(p, eps=eps))


def _check(votes, iterations):
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    if votes.ndim < 3 or min(votes.shape[-3:]) < 1:
        raise DimensionError(f"votes must end in (c_child, c_parent, d_parent), got {votes.shape}")


def _route(votes, iterations, agreement, detach_couplings=False, record_history=False):
    votes = T.as_tensor(votes)
    _check(votes, iterations)
    logits = T.Tensor(np.zeros(votes.shape[:-1], dtype=votes.dtype))
    history = []
    for _ in range(iterations):
        couplings = T.softmax(logits, axis=-1)
        weights = T.Tensor(couplings.data) if detach_couplings else couplings
        pre = T.tsum(T.reshape(weights, weights.shape + (1,)) * votes, axis=-3)
        parents = T.squash(pre)
        logits = logits + agreement(votes, parents)
        if record_history:
            history.append((couplings.data.copy(), logits.data.copy(), parents.data.copy()))
    return RoutingResult(parents, logits, couplings, history)


def route_euclidean(votes, iterations, detach_couplings=False, record_history=False):
    """Dynamic Euclidean routing.

    Logits start at zero; each pass normalises them over parents, forms the
    coupling-weighted vote sum, squashes it, then subtracts the squared
    distance between every vote and the new parent from its logit.
    """
    return _route(votes, iterations, euclidean_agreement, detach_couplings, record_history)


def route_dynamic(votes, iterations, cosine=False, detach_couplings=False, record_history=False):
    """Routing with dot-product agreement (cosine similarity if ``cosine``)."""
    agreement = cosine_agreement if cosine else dot_agreement
    return _route(votes, iterations, agreement, detach_couplings, record_history)


def route(votes, kind, iterations, **kwargs):
    if kind == EUCLIDEAN:
        kwargs.pop("cosine", None)
        return route_euclidean(votes, iterations, **kwargs)
    if kind == DYNAMIC:
        return route_dynamic(votes, iterations, **kwargs)
    raise ConfigurationError(f"unknown routing kind {kind!r}; expected one of {ROUTING_KINDS}")


def dissimilarity_range_probe(votes, parents=None):
    """Range of the one-step logit increments of both routing rules.

    Returns ``((dr_min, dr_max), (er_min, er_max))``. Without explicit
    ``parents`` they come from one uniform-coupling pass over ``votes``.
    """
    v = np.asarray(votes.data if isinstance(votes, T.Tensor) else votes, dtype=float)
    if parents is None:
        parents = T.squash(T.Tensor(v.sum(axis=-3) / v.shape[-2])).data
    p = np.asarray(parents.data if isinstance(parents, T.Tensor) else parents, dtype=float)
    p = np.expand_dims(p, -3)
    dr = (v * p).sum(-1)
    er = -((v - p) ** 2).sum(-1)
    return (float(dr.min()), float(dr.max())), (float(er.min()), float(er.max()))
