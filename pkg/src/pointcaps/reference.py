"""Slow scalar-loop reference implementations.

These are written with plain Python loops and the ``math`` module, sharing no
code with the vectorised library, so they can serve as oracles for it.
"""

import math

import numpy as np


def softmax_row(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    total = sum(e)
    return [x / total for x in e]


def squash_vector(vec, eps=1e-9):
    n2 = sum(x * x for x in vec)
    scale = n2 / (1.0 + n2) / math.sqrt(n2 + eps)
    return [scale * x for x in vec]


def route(votes, iterations, kind="ER", cosine=False):
    """Routing loop over explicit indices; returns (parents, logits, couplings)."""
    votes = np.asarray(votes, dtype=float)
    n_child, n_parent, dim = votes.shape
    b = [[0.0] * n_parent for _ in range(n_child)]
    k = None
    parents = None
    for _ in range(iterations):
        k = [softmax_row(b[i]) for i in range(n_child)]
        parents = []
        for j in range(n_parent):
            s = [0.0] * dim
            for i in range(n_child):
                for d in range(dim):
                    s[d] += k[i][j] * votes[i, j, d]
            parents.append(squash_vector(s))
        for i in range(n_child):
            for j in range(n_parent):
                v = votes[i, j]
                p = parents[j]
                if kind == "ER":
                    b[i][j] = b[i][j] - sum((v[d] - p[d]) ** 2 for d in range(dim))
                else:
                    dot = sum(v[d] * p[d] for d in range(dim))
                    if cosine:
                        nv = math.sqrt(sum(x * x for x in v) + 1e-12)
                        np_ = math.sqrt(sum(x * x for x in p) + 1e-12)
                        dot = dot / (nv * np_)
                    b[i][j] = b[i][j] + dot
    return np.array(parents), np.array(b), np.array(k)


def conv1d_feature(x, kernels, bias):
    rows, feats = x.shape
    out = np.zeros((rows, kernels.shape[0]))
    for c in range(rows):
        for k in range(kernels.shape[0]):
            acc = bias[k]
            for f in range(feats):
                acc += x[c, f] * kernels[k, 0, f]
            out[c, k] = acc
    return out


def conv2d_strided(x, kernels, stride):
    """Sliding-window height-1 convolution over a (E, W, 1) input."""
    entities, width, _ = x.shape
    n_k, _, kw = kernels.shape
    positions = (width - kw) // stride + 1
    out = np.zeros((entities, positions, n_k))
    for e in range(entities):
        for p in range(positions):
            for k in range(n_k):
                out[e, p, k] = sum(x[e, p * stride + t, 0] * kernels[k, 0, t] for t in range(kw))
    return out


def deconv_width(x, weight, stride, bias):
    width, c_in = x.shape
    _, kernel, c_out = weight.shape
    out = np.zeros((width * stride, c_out))
    for w in range(width):
        for t in range(kernel):
            for c in range(c_out):
                out[w * stride + t, c] = bias[c] + sum(x[w, ci] * weight[ci, t, c] for ci in range(c_in))
    return out


def chamfer(x, y):
    def one_way(a, b):
        total = 0.0
        for p in a:
            total += min(sum((p[d] - q[d]) ** 2 for d in range(len(p))) for q in b)
        return total / len(a)

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return one_way(x, y) + one_way(y, x)


def margin_loss(lengths, label, m_pos=0.9, m_neg=0.1, lam=0.5):
    total = 0.0
    for k, v in enumerate(lengths):
        if k == label:
            total += max(0.0, m_pos - v) ** 2
        else:
            total += lam * max(0.0, v - m_neg) ** 2
    return total


def swish(x):
    return x / (1.0 + math.exp(-x))
