"""Synthetic labelled point clouds, noise augmentation, and text file formats.

Cloud files are UTF-8 text with one point per line, columns
``x y z [nx ny nz] [part]`` and ``#`` comments. A ``# label: k`` comment
carries the class index. Datasets live under ``<root>/<split>/<class>/<id>.xyz``
with a ``<root>/<split>.csv`` manifest of ``path,label`` rows.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, InputError, ParseError

SHAPES = ("sphere", "cube", "cylinder", "torus", "plane")
PART_COUNTS = {"sphere": 2, "cube": 6, "cylinder": 3, "torus": 2, "plane": 4}
INVALID_PART = -1


@dataclass
class PointCloud:
    points: np.ndarray
    label: int = 0
    normals: np.ndarray | None = None
    part_labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InputError(f"points must be (N, 3), got {self.points.shape}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float)
            if self.normals.shape != self.points.shape:
                raise InputError("normals must match points")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=int)
            if self.part_labels.shape != (len(self.points),):
                raise InputError("part_labels must have one entry per point")

    def __len__(self):
        return len(self.points)

    def features(self, with_normals=False):
        """``(N, 3)`` or ``(N, 6)`` network input."""
        if with_normals:
            if self.normals is None:
                raise InputError("cloud has no normals")
            return np.concatenate([self.points, self.normals], axis=1)
        return self.points


def normalize(cloud):
    """Centre on the centroid, then scale into the unit sphere."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((pts ** 2).sum(1)).max()
    if radius > 0:
        pts = pts / radius
    return replace(cloud, points=pts)


# shape samplers: each returns points, normals, part labels for n area-uniform samples

def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, v.copy(), (v[:, 2] < 0).astype(int)


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for a in range(3):
        sel = axis == a
        others = [d for d in range(3) if d != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
        normals[sel, a] = sign[sel]
    return pts, normals, face


def _cylinder(n, rng, radius=0.5, height=2.0):
    side_area = 2 * np.pi * radius * height
    cap_area = np.pi * radius ** 2
    probs = np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area)
    part = rng.choice(3, size=n, p=probs)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    side = part == 0
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-height / 2, height / 2, size=side.sum())
    normals[side, 0] = np.cos(theta[side])
    normals[side, 1] = np.sin(theta[side])
    cap = ~side
    r = radius * np.sqrt(rng.uniform(0, 1, size=cap.sum()))
    pts[cap, 0] = r * np.cos(theta[cap])
    pts[cap, 1] = r * np.sin(theta[cap])
    top = np.where(part[cap] == 1, 1.0, -1.0)
    pts[cap, 2] = top * height / 2
    normals[cap, 2] = top
    return pts, normals, part


def _torus(n, rng, major=1.0, minor=0.35):
    # tube angle by rejection: surface density is proportional to major + minor*cos(v)
    v = np.empty(0)
    while len(v) < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, major + minor, size=2 * n) < major + minor * np.cos(cand)
        v = np.concatenate([v, cand[keep]])
    v = v[:n]
    u = rng.uniform(0, 2 * np.pi, size=n)
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return pts, normals, (np.cos(v) < 0).astype(int)


def _plane(n, rng):
    xy = rng.uniform(-1, 1, size=(n, 2))
    pts = np.column_stack([xy, np.zeros(n)])
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    part = (xy[:, 0] >= 0).astype(int) + 2 * (xy[:, 1] >= 0).astype(int)
    return pts, normals, part


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus, "plane": _plane}


def generate_shape(kind, n, seed=0, label=None, jitter=0.0, normalized=True):
    """Sample ``n`` surface points of a primitive shape.

    ``jitter`` > 0 applies a random per-axis stretch in
    ``[1 - jitter, 1 + jitter]`` (normals are transformed accordingly) so
    that samples of one class differ in proportions.
    """
    if kind not in _SAMPLERS:
        raise ConfigurationError(f"unknown shape {kind!r}; choose from {SHAPES}")
    if n < 16:
        raise InputError("need at least 16 points")
    rng = np.random.default_rng(seed)
    pts, normals, parts = _SAMPLERS[kind](n, rng)
    if jitter > 0:
        stretch = rng.uniform(1 - jitter, 1 + jitter, size=3)
        pts = pts * stretch
        normals = normals / stretch
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = PointCloud(pts, SHAPES.index(kind) if label is None else label, normals, parts)
    return normalize(cloud) if normalized else cloud


def perturb_gaussian(cloud, sigma, seed=0):
    """Add i.i.d. N(0, sigma) noise to every coordinate."""
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    if sigma == 0:
        return replace(cloud, points=cloud.points.copy())
    rng = np.random.default_rng(seed)
    return replace(cloud, points=cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def add_outliers(cloud, count, sigma=0.2, seed=0):
    """Replace ``count`` random points with N(0, sigma) draws.

    Replaced points get part label -1 and a random unit normal.
    """
    n = len(cloud)
    if not 0 <= count <= n:
        raise InputError(f"outlier count must be in [0, {n}], got {count}")
    pts = cloud.points.copy()
    if count == 0:
        return replace(cloud, points=pts)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=count, replace=False)
    pts[idx] = rng.normal(0.0, sigma, size=(count, 3))
    parts = None
    if cloud.part_labels is not None:
        parts = cloud.part_labels.copy()
        parts[idx] = INVALID_PART
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals.copy()
        fresh = rng.normal(size=(count, 3))
        normals[idx] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)
    return replace(cloud, points=pts, normals=normals, part_labels=parts)


# datasets ------------------------------------------------------------------------

def make_dataset(kinds=SHAPES, per_class=100, n=256, seed=0, jitter=0.25):
    """Balanced list of clouds; sample ``i`` of class ``c`` is seeded independently."""
    clouds = []
    for label, kind in enumerate(kinds):
        for i in range(per_class):
            sample_seed = np.random.SeedSequence([seed, label, i])
            clouds.append(generate_shape(kind, n, sample_seed, label=label, jitter=jitter))
    return clouds


def stack(clouds, with_normals=False):
    """``(X, y)`` arrays from a list of clouds."""
    x = np.stack([c.features(with_normals) for c in clouds])
    y = np.array([c.label for c in clouds], dtype=int)
    return x, y


def select_labeled(clouds, fraction, seed=0, max_redraws=100):
    """Indices of a class-balanced labelled subset.

    At least one cloud per class is kept. The draw is repeated with a derived
    seed until every part label present in the data also appears in the subset.
    """
    if not 0 < fraction <= 1:
        raise InputError("fraction must be in (0, 1]")
    labels = np.array([c.label for c in clouds])

    def parts_of(indices):
        found = set()
        for i in indices:
            if clouds[i].part_labels is not None:
                found.update((clouds[i].label, int(p)) for p in np.unique(clouds[i].part_labels) if p >= 0)
        return found

    wanted = parts_of(range(len(clouds)))
    chosen = []
    for attempt in range(max_redraws):
        rng = np.random.default_rng([seed, attempt])
        chosen = []
        for label in np.unique(labels):
            members = np.flatnonzero(labels == label)
            k = max(1, int(round(fraction * len(members))))
            chosen.extend(rng.choice(members, size=k, replace=False).tolist())
        if parts_of(chosen) >= wanted:
            break
    return sorted(chosen)


# file formats -----------------------------------------------------------------------

def save_cloud(cloud, path):
    cols = [cloud.points]
    if cloud.normals is not None:
        cols.append(cloud.normals)
    rows = np.concatenate(cols, axis=1).tolist()
    parts = cloud.part_labels.tolist() if cloud.part_labels is not None else None
    lines = [f"# label: {int(cloud.label)}"]
    for i, row in enumerate(rows):
        text = " ".join(repr(float(v)) for v in row)
        if parts is not None:
            text += f" {parts[i]}"
        lines.append(text)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cloud(path, label=None):
    """Parse a cloud file; ``label`` overrides any ``# label:`` comment."""
    file_label = 0
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("label:"):
                    try:
                        file_label = int(body[len("label:"):])
                    except ValueError:
                        raise ParseError("bad label comment", path, lineno) from None
                continue
            if not line:
                continue
            cols = line.split()
            if len(cols) not in (3, 4, 6, 7):
                raise ParseError(f"expected 3, 4, 6 or 7 columns, got {len(cols)}", path, lineno)
            if width is not None and len(cols) != width:
                raise ParseError("inconsistent column count", path, lineno)
            width = len(cols)
            try:
                values = [float(c) for c in cols[:6 if width >= 6 else 3]]
                part = int(cols[-1]) if width in (4, 7) else None
            except ValueError:
                raise ParseError(f"non-numeric value in {line!r}", path, lineno) from None
            rows.append((values, part))
    if not rows:
        raise ParseError("file has no points", path)
    data = np.array([r[0] for r in rows])
    parts = np.array([r[1] for r in rows]) if width in (4, 7) else None
    normals = data[:, 3:6] if width >= 6 else None
    return PointCloud(data[:, :3], file_label if label is None else label, normals, parts)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list = field(default_factory=list)  # (relative path, label)

    def load(self):
        return [load_cloud(self.root / rel, label) for rel, label in self.records]

    def write(self):
        path = self.root / f"{self.split}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path", "label"])
            writer.writerows(self.records)
        return path

    @classmethod
    def read(cls, root, split):
        root = Path(root)
        path = root / f"{split}.csv"
        records = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label"]:
                raise ParseError("manifest header must be 'path,label'", path, 1)
            for lineno, row in enumerate(reader, 2):
                if len(row) != 2:
                    raise ParseError("expected two columns", path, lineno)
                rel, label = row
                if not (root / rel).is_file():
                    raise ParseError(f"missing cloud file {rel}", path, lineno)
                try:
                    records.append((rel, int(label)))
                except ValueError:
                    raise ParseError(f"bad label {label!r}", path, lineno) from None
        return cls(root, split, records)


def write_dataset(clouds, root, split, class_names=SHAPES):
    """Write clouds under ``<root>/<split>/<class>/<id>.xyz`` plus the manifest."""
    root = Path(root)
    manifest = DatasetManifest(root, split)
    counters = {}
    for cloud in clouds:
        name = class_names[cloud.label]
        idx = counters.get(name, 0)
        counters[name] = idx + 1
        rel = Path(split) / name / f"{idx:05d}.xyz"
        os.makedirs(root / rel.parent, exist_ok=True)
        save_cloud(cloud, root / rel)
        manifest.records.append((rel.as_posix(), int(cloud.label)))
    manifest.write()
    return manifest


def load_dataset(root, split):
    return DatasetManifest.read(root, split).load()
