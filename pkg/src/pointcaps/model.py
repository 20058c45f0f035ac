"""The point-cloud capsule autoencoder: encoder, decoder, and cost accounting."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .exceptions import ConfigurationError, InputError
from .layers import digitcap, init_uniform, mask_activity, pointcap_a, pointcap_b, pointcap_c
from .losses import total_loss


@dataclass
class Encoding:
    digit: T.Tensor          # (B, a, b) class capsules
    lengths: T.Tensor        # (B, a)
    part_logits: T.Tensor    # (B, N, pca1_caps) final routing logits of the first PointCapA
    skip: T.Tensor           # (B, N, conv_widths[1])
    capsules: dict = None    # layer name -> output capsules


@dataclass
class ForwardOutput:
    class_lengths: T.Tensor
    reconstruction: T.Tensor
    part_logits: T.Tensor
    latent: T.Tensor
    digit: T.Tensor


CALIBRATED_LAYERS = ("pca1", "pcc", "pcb", "pca2", "pca3", "digit")


def _layer_shapes(cfg):
    """Ordered ``name -> shape`` for every learned tensor."""
    c1, c2, c3 = cfg.conv_widths
    shapes = OrderedDict()

    def conv(name, k, f):
        shapes[f"{name}.kernels"] = (k, 1, f)
        if cfg.use_bias:
            shapes[f"{name}.bias"] = (k,)

    def deconv(name, c_in, kernel, c_out):
        shapes[f"{name}.weight"] = (c_in, kernel, c_out)
        if cfg.use_bias:
            shapes[f"{name}.bias"] = (c_out,)

    conv("conv1", c1, cfg.in_channels)
    shapes["bn1.scale"] = (c1,)
    shapes["bn1.shift"] = (c1,)
    conv("conv2", c2, c1)
    conv("conv3", c3, c2)
    conv("pca1", cfg.pca1_caps * cfg.pca1_dim, c3)
    conv("pcc", cfg.pcc_caps * cfg.pcc_dim, cfg.pca1_dim)
    conv("pcb", cfg.pcb_caps * cfg.pcb_dim, cfg.pcc_dim)
    conv("pca2", cfg.pca2_caps * cfg.pca2_dim, cfg.pcb_dim)
    conv("pca3", cfg.pca3_caps * cfg.pca3_dim, c2)
    shapes["digit.weight"] = (cfg.pca2_caps + cfg.pca3_caps, cfg.num_classes, cfg.pca2_dim, cfg.digit_dim)
    shapes["dense.weight"] = (cfg.digit_dim, cfg.dense_units)
    if cfg.use_bias:
        shapes["dense.bias"] = (cfg.dense_units,)
    g = cfg.decoder_grid_channels
    shapes["bn2.scale"] = (g,)
    shapes["bn2.shift"] = (g,)
    d1, d2, d3, d4 = cfg.deconv_channels
    deconv("deconv1", g, 4, d1)
    deconv("deconv2", d1, 4, d2)
    deconv("deconv3", d2, 1, d3)
    deconv("deconv4", d3, 1, d4)
    deconv("deconv5", d4, 1, 3)
    return shapes


def _fan_in(name, shape):
    if name.endswith(".kernels"):
        return shape[2]
    if name == "digit.weight":
        return shape[2]
    if name == "dense.weight":
        return shape[0]
    if name.endswith(".weight"):
        return shape[0] * shape[1]
    raise KeyError(name)


class PointCapsNet:
    """Capsule autoencoder holding its learned tensors and batch-norm statistics.

    Inputs are point batches ``(B, N, in_channels)``; a single cloud
    ``(N, in_channels)`` is promoted to a batch of one.
    """

    def __init__(self, config=None, seed=0):
        self.config = config if config is not None else ModelConfig()
        if self.config.pca2_dim != self.config.pca3_dim:
            raise ConfigurationError("pca2_dim and pca3_dim must match to concatenate capsules")
        self.dtype = np.dtype(self.config.dtype).type
        rng = np.random.default_rng(seed)
        self.params = OrderedDict()
        for name, shape in _layer_shapes(self.config).items():
            if name.endswith(".scale"):
                data = np.ones(shape, dtype=self.dtype)
            elif name.endswith((".bias", ".shift")):
                data = np.zeros(shape, dtype=self.dtype)
            else:
                data = init_uniform(shape, _fan_in(name, shape), rng, self.dtype)
            self.params[name] = T.Tensor(data, requires_grad=True, name=name)
        self.buffers = OrderedDict()
        for bn, size in (("bn1", self.config.conv_widths[0]), ("bn2", self.config.decoder_grid_channels)):
            self.buffers[f"{bn}.running_mean"] = np.zeros(size, dtype=self.dtype)
            self.buffers[f"{bn}.running_var"] = np.ones(size, dtype=self.dtype)

    # bookkeeping ---------------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        state = OrderedDict((k, v.data.copy()) for k, v in self.params.items())
        state.update((k, v.copy()) for k, v in self.buffers.items())
        return state

    def load_state_dict(self, state):
        for k, p in self.params.items():
            if tuple(state[k].shape) != p.shape:
                raise ConfigurationError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=self.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.dtype)

    def copy(self):
        twin = PointCapsNet.__new__(PointCapsNet)
        twin.config = self.config
        twin.dtype = self.dtype
        twin.params = OrderedDict(
            (k, T.Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.params.items()
        )
        twin.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return twin

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    # building blocks -----------------------------------------------------------

    def _p(self, name):
        return self.params.get(name)

    def _batch_norm(self, name, x, training, update_stats=True):
        scale, shift = self.params[f"{name}.scale"], self.params[f"{name}.shift"]
        eps = self.config.bn_eps
        axes = tuple(range(x.ndim - 1))
        if training:
            mu = T.mean(x, axis=axes, keepdims=True)
            centred = x - mu
            var = T.mean(T.square(centred), axis=axes, keepdims=True)
            if update_stats:
                count = int(np.prod(x.shape[:-1]))
                m = self.config.bn_momentum
                unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
                self.buffers[f"{name}.running_mean"] = m * self.buffers[f"{name}.running_mean"] + (1 - m) * mu.data.reshape(-1)
                self.buffers[f"{name}.running_var"] = m * self.buffers[f"{name}.running_var"] + (1 - m) * unbiased
            normed = centred / T.sqrt(var + eps)
        else:
            mu = self.buffers[f"{name}.running_mean"]
            var = self.buffers[f"{name}.running_var"]
            normed = (x - mu) * (1.0 / np.sqrt(var + eps))
        return normed * scale + shift

    def _as_batch(self, points):
        points = T.as_tensor(points, dtype=self.dtype)
        if points.ndim == 2:
            points = T.reshape(points, (1,) + points.shape)
        cfg = self.config
        if points.ndim != 3 or points.shape[1] != cfg.num_points or points.shape[2] != cfg.in_channels:
            raise InputError(
                f"expected points (B, {cfg.num_points}, {cfg.in_channels}), got {points.shape}"
            )
        return points

    def _route_kw(self, layer):
        cfg = self.config
        return dict(
            routing=cfg.routing_for(layer),
            iterations=getattr(cfg, f"{layer}_iterations"),
            detach_couplings=cfg.detach_couplings,
            cosine=cfg.cosine_agreement,
        )

    def calibrate(self, points, target=0.5, rounds=6):
        """Rescale capsule-layer weights, in forward order, on a sample batch.

        Squash maps a small norm ``n`` to about ``n**2``, so stacked capsule
        layers with plain fan-in init collapse towards zero and stop passing
        gradient. Each layer's weights are scaled until its mean output
        capsule length is ``target`` (0.5 is a pre-squash norm of 1).
        Returns ``{layer: total scale}``.
        """
        if not 0 < target < 1:
            raise ConfigurationError("calibration target must lie in (0, 1)")
        x = self._as_batch(points)
        factors = {}
        for layer in CALIBRATED_LAYERS:
            names = [n for n in self.params if n.split(".")[0] == layer]
            total = 1.0
            for _ in range(rounds):
                caps = self.encode(x, training=True, update_stats=False).capsules[layer]
                length = float(np.clip(np.linalg.norm(caps.data, axis=-1).mean(), 1e-12, 1 - 1e-12))
                # squash inverse: pre-squash norm s with s^2 / (1 + s^2) = length
                current = np.sqrt(length / (1 - length))
                wanted = np.sqrt(target / (1 - target))
                factor = float(np.clip(wanted / current, 1e-2, 1e2))
                for n in names:
                    self.params[n].data = self.params[n].data * self.dtype(factor)
                total *= factor
                if abs(length - target) < 1e-3:
                    break
            factors[layer] = total
        return factors

    # forward -------------------------------------------------------------------

    def encode(self, points, training=False, update_stats=True):
        cfg = self.config
        p = self._p
        x = self._as_batch(points)
        batch = x.shape[0]

        h = T.conv1d_feature(x, p("conv1.kernels"), p("conv1.bias"))
        h = T.swish(self._batch_norm("bn1", h, training, update_stats))
        skip = T.swish(T.conv1d_feature(h, p("conv2.kernels"), p("conv2.bias")))
        deep = T.swish(T.conv1d_feature(skip, p("conv3.kernels"), p("conv3.bias")))

        # deep path: A -> C -> B -> A
        u1, r1 = pointcap_a(deep, p("pca1.kernels"), p("pca1.bias"), cfg.pca1_caps, cfg.pca1_dim,
                            **self._route_kw("pca1"))
        entities = T.reshape(u1, (batch, cfg.pca1_caps, 1, cfg.pca1_dim))
        uc = pointcap_c(entities, p("pcc.kernels"), p("pcc.bias"), cfg.pcc_caps, cfg.pcc_dim)
        ub, _ = pointcap_b(uc, p("pcb.kernels"), p("pcb.bias"), cfg.pcb_caps, cfg.pcb_dim,
                           **self._route_kw("pcb"))
        parts = T.reshape(ub, (batch, cfg.pca1_caps * cfg.pcb_caps, cfg.pcb_dim))
        u2, _ = pointcap_a(parts, p("pca2.kernels"), p("pca2.bias"), cfg.pca2_caps, cfg.pca2_dim,
                           **self._route_kw("pca2"))
        # shallow path straight from the per-point features
        u3, _ = pointcap_a(skip, p("pca3.kernels"), p("pca3.bias"), cfg.pca3_caps, cfg.pca3_dim,
                           **self._route_kw("pca3"))

        caps = T.concat([u2, u3], axis=1)
        digit, lengths, _ = digitcap(caps, p("digit.weight"), **self._route_kw("digit"))
        capsules = dict(pca1=u1, pcc=uc, pcb=ub, pca2=u2, pca3=u3, digit=digit)
        return Encoding(digit, lengths, r1.logits, skip, capsules)

    def decode(self, latent, skip, training=False, update_stats=True):
        cfg = self.config
        p = self._p
        latent = T.as_tensor(latent, dtype=self.dtype)
        if latent.ndim == 1:
            latent = T.reshape(latent, (1,) + latent.shape)
        batch = latent.shape[0]
        if latent.shape[-1] != cfg.digit_dim:
            raise InputError(f"latent must have {cfg.digit_dim} entries, got {latent.shape[-1]}")
        skip = T.as_tensor(skip, dtype=self.dtype)
        if skip.ndim == 2:
            skip = T.reshape(skip, (1,) + skip.shape)
        expected = (batch, cfg.num_points, cfg.deconv_channels[1])
        if tuple(skip.shape) != expected:
            raise ConfigurationError(f"skip features {skip.shape} != expected {expected}")

        z = T.matmul(latent, p("dense.weight"))
        if p("dense.bias") is not None:
            z = z + p("dense.bias")
        grid = T.reshape(z, (batch, cfg.decoder_width, cfg.decoder_grid_channels))
        h = T.swish(self._batch_norm("bn2", grid, training, update_stats))
        h = T.swish(T.deconv_width(h, p("deconv1.weight"), 4, p("deconv1.bias")))
        h = T.deconv_width(h, p("deconv2.weight"), 4, p("deconv2.bias"))
        if cfg.skip_connection:
            h = h + skip
        h = T.swish(h)
        h = T.swish(T.deconv_width(h, p("deconv3.weight"), 1, p("deconv3.bias")))
        h = T.swish(T.deconv_width(h, p("deconv4.weight"), 1, p("deconv4.bias")))
        return T.deconv_width(h, p("deconv5.weight"), 1, p("deconv5.bias"))

    def forward(self, points, labels=None, training=False, update_stats=True):
        """Encode, mask and decode.

        With ``labels`` the decoder sees the true-class capsule, otherwise the
        longest one.
        """
        enc = self.encode(points, training, update_stats)
        if labels is not None:
            labels = np.broadcast_to(np.asarray(labels), enc.lengths.shape[:1])
        latent = mask_activity(enc.digit, labels)
        recon = self.decode(latent, enc.skip, training, update_stats)
        return ForwardOutput(enc.lengths, recon, enc.part_logits, latent, enc.digit)

    def loss(self, points, labels, training=True, update_stats=True):
        """``(total, margin, chamfer)`` for a labelled batch."""
        cfg = self.config
        x = self._as_batch(points)
        labels = np.broadcast_to(np.asarray(labels), x.shape[:1])
        out = self.forward(x, labels, training, update_stats)
        xyz = T.Tensor(x.data[..., :3])
        return total_loss(out.class_lengths, labels, xyz, out.reconstruction,
                          cfg.gamma, cfg.m_pos, cfg.m_neg, cfg.lam)


# cost accounting -------------------------------------------------------------

def layer_costs(config):
    """Per-layer ``(name, params, multiply_adds)``.

    Multiply-adds cover every linear map and, for routed layers, the
    coupling-weighted vote sum plus the agreement term of each iteration.
    Elementwise work (activations, batch norm, squash, softmax) is not
    counted. Batch-norm parameters are the learned scale and shift only.
    """
    cfg = config
    n = cfg.num_points
    c1, c2, c3 = cfg.conv_widths
    bias = 1 if cfg.use_bias else 0
    rows = []

    def conv(name, positions, f, k):
        rows.append((name, f * k + bias * k, positions * f * k))

    def routing(name, children, parents, dim, iters, entities=1):
        rows.append((name + ".routing", 0, 2 * entities * children * parents * dim * iters))

    conv("conv1", n, cfg.in_channels, c1)
    rows.append(("bn1", 2 * c1, 0))
    conv("conv2", n, c1, c2)
    conv("conv3", n, c2, c3)
    conv("pca1", n, c3, cfg.pca1_caps * cfg.pca1_dim)
    routing("pca1", n, cfg.pca1_caps, cfg.pca1_dim, cfg.pca1_iterations)
    conv("pcc", cfg.pca1_caps, cfg.pca1_dim, cfg.pcc_caps * cfg.pcc_dim)
    conv("pcb", cfg.pca1_caps * cfg.pcc_caps, cfg.pcc_dim, cfg.pcb_caps * cfg.pcb_dim)
    routing("pcb", cfg.pcc_caps, cfg.pcb_caps, cfg.pcb_dim, cfg.pcb_iterations, entities=cfg.pca1_caps)
    children2 = cfg.pca1_caps * cfg.pcb_caps
    conv("pca2", children2, cfg.pcb_dim, cfg.pca2_caps * cfg.pca2_dim)
    routing("pca2", children2, cfg.pca2_caps, cfg.pca2_dim, cfg.pca2_iterations)
    conv("pca3", n, c2, cfg.pca3_caps * cfg.pca3_dim)
    routing("pca3", n, cfg.pca3_caps, cfg.pca3_dim, cfg.pca3_iterations)
    children_d = cfg.pca2_caps + cfg.pca3_caps
    digit_w = children_d * cfg.num_classes * cfg.pca2_dim * cfg.digit_dim
    rows.append(("digit", digit_w, digit_w))
    routing("digit", children_d, cfg.num_classes, cfg.digit_dim, cfg.digit_iterations)
    rows.append(("dense", cfg.digit_dim * cfg.dense_units + bias * cfg.dense_units,
                 cfg.digit_dim * cfg.dense_units))
    g = cfg.decoder_grid_channels
    rows.append(("bn2", 2 * g, 0))
    w0 = cfg.decoder_width
    d1, d2, d3, d4 = cfg.deconv_channels
    for name, width, c_in, kernel, c_out in (
        ("deconv1", w0, g, 4, d1),
        ("deconv2", 4 * w0, d1, 4, d2),
        ("deconv3", n, d2, 1, d3),
        ("deconv4", n, d3, 1, d4),
        ("deconv5", n, d4, 1, 3),
    ):
        rows.append((name, c_in * kernel * c_out + bias * c_out, width * c_in * kernel * c_out))
    return rows


def count_params_flops(config):
    """Total ``(parameter_count, multiply_add_count)`` for one forward pass."""
    rows = layer_costs(config)
    return sum(r[1] for r in rows), sum(r[2] for r in rows)
