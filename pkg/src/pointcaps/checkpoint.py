"""Versioned plain-text checkpoints.

Layout::

    POINTCAPS-CKPT v1
    #! key = value          (one line per config field)
    name rank d1 ... dk
    v0 v1 v2 ...            (shortest round-trip decimal floats)

Every learned tensor and batch-norm buffer is stored; values round-trip
exactly at the model's precision.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .config import ModelConfig
from .exceptions import CheckpointVersionError, ParseError

HEADER = "POINTCAPS-CKPT v1"


def save_checkpoint(model, path):
    lines = [HEADER]
    lines.extend(f"#! {line}" for line in model.config.to_text().splitlines())
    for name, arr in model.state_dict().items():
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {arr.ndim} {dims}".rstrip())
        lines.append(" ".join(repr(v) for v in arr.ravel().tolist()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Return ``(config, state)`` from a checkpoint file."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != HEADER:
        found = lines[0].strip() if lines else "<empty>"
        raise CheckpointVersionError(f"{path}: expected header {HEADER!r}, found {found!r}")
    config_lines = []
    state = OrderedDict()
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("#!"):
            config_lines.append(line[2:].strip())
            i += 1
            continue
        if not line or line.startswith("#"):
            i += 1
            continue
        head = line.split()
        try:
            name, rank = head[0], int(head[1])
            shape = tuple(int(d) for d in head[2:2 + rank])
        except (IndexError, ValueError):
            raise ParseError("bad tensor header", path, i + 1) from None
        if len(shape) != rank:
            raise ParseError("tensor header rank does not match dims", path, i + 1)
        size = int(np.prod(shape, dtype=int))
        values = lines[i + 1].split() if size and i + 1 < len(lines) else []
        if len(values) != size:
            raise ParseError(f"{name}: expected {size} values, got {len(values)}", path, i + 2)
        try:
            state[name] = np.array([float(v) for v in values]).reshape(shape)
        except ValueError:
            raise ParseError(f"{name}: non-numeric value", path, i + 2) from None
        i += 2 if size else 1
    config = ModelConfig.from_text("\n".join(config_lines), path=str(path))
    return config, state


def load_checkpoint(path, config=None):
    """Rebuild the model stored at ``path``.

    If ``config`` is given it must equal the stored configuration.
    """
    from .model import PointCapsNet

    stored, state = read_checkpoint(path)
    if config is not None and config != stored:
        diff = [f for f in stored.__dataclass_fields__ if getattr(stored, f) != getattr(config, f)]
        raise CheckpointVersionError(f"{path}: checkpoint config differs in {', '.join(diff)}")
    model = PointCapsNet(stored)
    missing = [k for k in model.state_dict() if k not in state]
    if missing:
        raise CheckpointVersionError(f"{path}: missing tensors {missing}")
    model.load_state_dict(state)
    return model
