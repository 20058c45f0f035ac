"""Model configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .exceptions import ConfigurationError, ParseError
from .routing import DYNAMIC, EUCLIDEAN, ROUTING_KINDS

ROUTING_MODES = ("pointcaps", "all_dr", "all_er")
CAPSULE_LAYERS = ("pca1", "pcb", "pca2", "pca3", "digit")


@dataclass
class ModelConfig:
    """Architecture, routing and loss settings.

    Defaults reproduce the full-size network (2048 points, 13 classes).
    Capsule layers are named by position: ``pca1`` is the first PointCapA on
    the deep path, ``pcc``/``pcb`` follow it, ``pca2`` regenerates parts from
    the PointCapB output and ``pca3`` is the PointCapA on the shallow path.
    """

    num_points: int = 2048
    num_classes: int = 13
    in_channels: int = 3
    conv_widths: tuple = (16, 64, 256)

    pca1_caps: int = 64
    pca1_dim: int = 32
    pca1_routing: str = EUCLIDEAN
    pca1_iterations: int = 1

    pcc_caps: int = 4
    pcc_dim: int = 16

    pcb_caps: int = 8
    pcb_dim: int = 16
    pcb_routing: str = DYNAMIC
    pcb_iterations: int = 3

    pca2_caps: int = 64
    pca2_dim: int = 32
    pca2_routing: str = EUCLIDEAN
    pca2_iterations: int = 3

    pca3_caps: int = 64
    pca3_dim: int = 32
    pca3_routing: str = EUCLIDEAN
    pca3_iterations: int = 3

    digit_dim: int = 16
    digit_routing: str = DYNAMIC
    digit_iterations: int = 3

    dense_units: int = 128
    deconv_channels: tuple = (32, 64, 32, 16)

    gamma: float = 0.5
    m_pos: float = 0.9
    m_neg: float = 0.1
    lam: float = 0.5

    skip_connection: bool = True
    routing_mode: str = "pointcaps"
    use_bias: bool = True
    detach_couplings: bool = False
    cosine_agreement: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        self.conv_widths = tuple(int(w) for w in self.conv_widths)
        self.deconv_channels = tuple(int(c) for c in self.deconv_channels)
        self.validate()

    # presets -----------------------------------------------------------------

    @classmethod
    def desk(cls, num_classes=5, num_points=256, **overrides):
        """Small network that trains on a CPU in minutes."""
        base = dict(
            num_points=num_points, num_classes=num_classes, conv_widths=(16, 32, 64),
            pca1_caps=16, pca1_dim=8, pcc_caps=2, pcc_dim=8, pcb_caps=4, pcb_dim=8,
            pca2_caps=16, pca2_dim=8, pca3_caps=16, pca3_dim=8, digit_dim=8,
            dense_units=128, deconv_channels=(16, 32, 16, 8),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, num_classes=2, num_points=32, **overrides):
        """Smallest useful network, sized for finite-difference checks."""
        base = dict(
            num_points=num_points, num_classes=num_classes, conv_widths=(4, 8, 16),
            pca1_caps=16, pca1_dim=8, pcc_caps=1, pcc_dim=4, pcb_caps=2, pcb_dim=4,
            pca2_caps=16, pca2_dim=8, pca3_caps=16, pca3_dim=8, digit_dim=4,
            dense_units=32, deconv_channels=(8, 8, 8, 4),
        )
        base.update(overrides)
        return cls(**base)

    # derived -----------------------------------------------------------------

    def routing_for(self, layer):
        """Routing kind for ``layer`` after applying the ablation mode."""
        if self.routing_mode == "all_dr":
            return DYNAMIC
        if self.routing_mode == "all_er":
            return EUCLIDEAN
        return getattr(self, f"{layer}_routing")

    @property
    def decoder_width(self):
        """Width of the grid the dense output is reshaped into."""
        return self.num_points // 16

    @property
    def decoder_grid_channels(self):
        return self.dense_units * 16 // self.num_points

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        if self.num_points < 16 or self.num_points % 16:
            raise ConfigurationError(f"num_points must be a positive multiple of 16, got {self.num_points}")
        if (self.dense_units * 16) % self.num_points:
            raise ConfigurationError("dense_units * 16 must be divisible by num_points")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigurationError("num_classes and in_channels must be positive")
        if len(self.conv_widths) != 3 or min(self.conv_widths) < 1:
            raise ConfigurationError("conv_widths needs three positive widths")
        if len(self.deconv_channels) != 4 or min(self.deconv_channels) < 1:
            raise ConfigurationError("deconv_channels needs four positive widths")
        if self.deconv_channels[1] != self.conv_widths[1]:
            raise ConfigurationError("second deconv width must equal the second conv width (skip addition)")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be non-negative")
        if not 0 <= self.m_neg < self.m_pos <= 1:
            raise ConfigurationError("margins must satisfy 0 <= m_neg < m_pos <= 1")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigurationError(f"routing_mode must be one of {ROUTING_MODES}")
        for layer in CAPSULE_LAYERS:
            if getattr(self, f"{layer}_routing") not in ROUTING_KINDS:
                raise ConfigurationError(f"{layer}_routing must be one of {ROUTING_KINDS}")
            if getattr(self, f"{layer}_iterations") < 1:
                raise ConfigurationError(f"{layer}_iterations must be >= 1")
        for name in ("pca1_caps", "pca1_dim", "pcc_caps", "pcc_dim", "pcb_caps", "pcb_dim",
                     "pca2_caps", "pca2_dim", "pca3_caps", "pca3_dim", "digit_dim", "dense_units"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    # text form -----------------------------------------------------------------

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, path=None, base=None):
        """Parse ``key = value`` lines; unspecified keys keep ``base`` values."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {raw!r}", path, lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ParseError(f"unknown config key {key!r}", path, lineno)
            try:
                values[key] = _convert(value, types[key])
            except ValueError as exc:
                raise ParseError(f"bad value for {key}: {exc}", path, lineno) from None
        if base is not None:
            return base.replace(**values)
        return cls(**values)

    @classmethod
    def load(cls, path, base=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), path=str(path), base=base)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _convert(value, kind):
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    if kind in ("bool", bool):
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in ("tuple", tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value
