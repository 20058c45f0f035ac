"""Training loop and evaluation protocols."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ModelConfig
from .data import INVALID_PART, add_outliers, perturb_gaussian, stack
from .exceptions import DivergenceError, InputError, NonFiniteError
from .layers import mask_activity
from .losses import total_loss
from .model import PointCapsNet
from .optim import RAdam

log = logging.getLogger(__name__)

CD_SCALE = 1e3


@dataclass
class Metrics:
    """Evaluation summary; ``cd_mean`` is the mean Chamfer distance times 1000."""

    accuracy: float
    cd_mean: float
    seg_accuracy: float | None = None
    seg_iou: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    margin: float
    cd: float
    accuracy: float


@dataclass
class TrainResult:
    model: PointCapsNet
    history: list
    best_epoch: int


def _with_normals(model):
    return model.config.in_channels == 6


def _arrays(model, data):
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=float), np.asarray(y, dtype=int)
    if len(data) == 0:
        raise InputError("empty dataset")
    return stack(data, _with_normals(model))


def train(model, dataset, epochs, batch_size=16, lr=1e-3, seed=0, validation=None,
          milestones=(0.5, 0.8), checkpoint=None, rectify=True, calibrate=True,
          calibration_size=64):
    """Minimise margin loss plus weighted Chamfer distance with true-label masking.

    ``model`` may be a :class:`PointCapsNet` or a :class:`ModelConfig`.
    ``dataset``/``validation`` are cloud lists or ``(X, y)`` tuples.
    ``milestones`` are fractions of the total step count at which the
    learning rate drops tenfold. When ``validation`` is given the
    parameters with the lowest validation Chamfer distance are kept (and
    written to ``checkpoint`` if set). A model built here from a config is
    first calibrated on a random sample of the training set (see
    :meth:`PointCapsNet.calibrate`) unless ``calibrate`` is false.
    """
    fresh = isinstance(model, ModelConfig)
    if fresh:
        model = PointCapsNet(model, seed=seed)
    x, y = _arrays(model, dataset)
    if len(x) == 0:
        raise InputError("empty training set")
    if fresh and calibrate:
        pick = np.random.default_rng(seed).permutation(len(x))[:calibration_size]
        model.calibrate(x[pick])
    xv = None
    if validation is not None:
        xv, yv = _arrays(model, validation)
    rng = np.random.default_rng(seed)
    steps_per_epoch = int(np.ceil(len(x) / batch_size))
    total = steps_per_epoch * epochs
    opt = RAdam(model.parameters(), lr=lr, rectify=rectify,
                milestones=[int(round(f * total)) for f in milestones])
    history = []
    best_cd, best_state, best_epoch = np.inf, None, 0
    last_good = model.state_dict()

    cfg = model.config
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        sums = np.zeros(3)
        correct = 0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            try:
                model.zero_grad()
                with T.Tape() as tape:
                    out = model.forward(x[idx], y[idx], training=True)
                    loss, margin, cd = total_loss(out.class_lengths, y[idx], x[idx][..., :3],
                                                  out.reconstruction, cfg.gamma, cfg.m_pos,
                                                  cfg.m_neg, cfg.lam)
                tape.backward(loss)
                opt.step()
            except (NonFiniteError, DivergenceError) as exc:
                model.load_state_dict(last_good)
                if checkpoint is not None:
                    save_checkpoint(model, checkpoint)
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
            correct += int((out.class_lengths.data.argmax(-1) == y[idx]).sum())
            sums += np.array([loss.item(), margin.item(), cd.item()]) * len(idx)
        last_good = model.state_dict()
        sums /= len(x)
        accuracy = correct / len(x)
        if xv is not None:
            metrics = evaluate(model, (xv, yv))
            accuracy = metrics.accuracy
            if metrics.cd_mean < best_cd:
                best_cd, best_state, best_epoch = metrics.cd_mean, model.state_dict(), epoch
        history.append(EpochRecord(epoch, *sums.tolist(), accuracy))
        log.info("epoch %d loss %.5f margin %.5f cd %.5f acc %.3f", epoch, *sums, accuracy)

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = epochs
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return TrainResult(model, history, best_epoch)


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "margin", "cd", "accuracy"])
        for r in history:
            writer.writerow([r.epoch, repr(r.loss), repr(r.margin), repr(r.cd), repr(r.accuracy)])


def predict_batches(model, x, batch_size=32):
    """Eval-mode forward in batches; returns numpy lengths, reconstructions, part logits."""
    lengths, recons, parts = [], [], []
    for start in range(0, len(x), batch_size):
        out = model.forward(x[start:start + batch_size], training=False)
        lengths.append(out.class_lengths.data)
        recons.append(out.reconstruction.data)
        parts.append(out.part_logits.data)
    return np.concatenate(lengths), np.concatenate(recons), np.concatenate(parts)


def evaluate(model, dataset, batch_size=32):
    """Accuracy from the longest class capsule and mean Chamfer distance (x1000)."""
    x, y = _arrays(model, dataset)
    lengths, recons, _ = predict_batches(model, x, batch_size)
    accuracy = float(np.mean(lengths.argmax(-1) == y))
    cd = T.chamfer(x[..., :3], recons).data
    return Metrics(accuracy, float(cd.mean() * CD_SCALE))


def part_assign(model, cloud):
    """Index of the first-layer parent capsule with the largest logit, per point."""
    x = cloud.features(_with_normals(model)) if hasattr(cloud, "features") else np.asarray(cloud)
    logits = model.encode(x, training=False).part_logits.data
    out = logits.argmax(-1)
    return out[0] if out.shape[0] == 1 and np.ndim(x) == 2 else out


def fit_part_mapping(model, clouds):
    """Majority-vote map ``class -> (capsule -> part)`` from labelled clouds.

    Capsules that never win a labelled point map to the most frequent part
    of that class.
    """
    n_caps = model.config.pca1_caps
    votes = {}
    x, _ = stack(clouds, _with_normals(model))
    _, _, logits = predict_batches(model, x)
    assign = logits.argmax(-1)
    for cloud, caps in zip(clouds, assign):
        parts = cloud.part_labels
        if parts is None:
            continue
        valid = parts != INVALID_PART
        n_parts = int(parts[valid].max()) + 1 if valid.any() else 0
        table = votes.setdefault(cloud.label, np.zeros((n_caps, 0), dtype=int))
        if table.shape[1] < n_parts:
            table = np.pad(table, ((0, 0), (0, n_parts - table.shape[1])))
        np.add.at(table, (caps[valid], parts[valid]), 1)
        votes[cloud.label] = table
    mapping = {}
    for label, table in votes.items():
        fallback = int(table.sum(0).argmax())
        m = table.argmax(1)
        m[table.sum(1) == 0] = fallback
        mapping[label] = m
    return mapping


def part_iou(pred, truth):
    """Mean IoU over the parts present in ``truth`` (invalid points ignored)."""
    valid = truth != INVALID_PART
    pred, truth = pred[valid], truth[valid]
    ious = []
    for part in np.unique(truth):
        p, t = pred == part, truth == part
        ious.append((p & t).sum() / (p | t).sum())
    return float(np.mean(ious)) if ious else 1.0


def segment_eval(model, train_clouds, test_clouds, labeled_fraction=0.01, seed=0):
    """Per-point part accuracy and mean instance IoU with a few-label part map."""
    from .data import select_labeled

    labeled = [train_clouds[i] for i in select_labeled(train_clouds, labeled_fraction, seed)]
    mapping = fit_part_mapping(model, labeled)
    x, _ = stack(test_clouds, _with_normals(model))
    _, _, logits = predict_batches(model, x)
    assign = logits.argmax(-1)
    hits, total, ious = 0, 0, []
    for cloud, caps in zip(test_clouds, assign):
        if cloud.part_labels is None or cloud.label not in mapping:
            continue
        pred = mapping[cloud.label][caps]
        valid = cloud.part_labels != INVALID_PART
        hits += int((pred[valid] == cloud.part_labels[valid]).sum())
        total += int(valid.sum())
        ious.append(part_iou(pred, cloud.part_labels))
    if total == 0:
        raise InputError("no part labels in the test clouds")
    return hits / total, float(np.mean(ious))


def latent_perturb(model, cloud, dim, values):
    """Decode the predicted class capsule with entry ``dim`` set to each value."""
    b = model.config.digit_dim
    if not 0 <= dim < b:
        raise InputError(f"dim must be in [0, {b}), got {dim}")
    x = cloud.features(_with_normals(model)) if hasattr(cloud, "features") else np.asarray(cloud)
    enc = model.encode(x, training=False)
    latent = mask_activity(enc.digit).data
    clouds = []
    for value in values:
        z = latent.copy()
        z[:, dim] = value
        clouds.append(model.decode(z, enc.skip, training=False).data[0])
    return clouds


def noise_sweep(model, dataset, mode, grid, seed=0, sigma_outlier=0.2):
    """Evaluate on corrupted copies of ``dataset`` for every level in ``grid``.

    ``mode`` is ``"perturb"`` (levels are Gaussian sigmas) or ``"outliers"``
    (levels are replaced-point counts). Returns rows
    ``(level, accuracy, cd_mean)``.
    """
    if mode not in ("perturb", "outliers"):
        raise InputError(f"unknown sweep mode {mode!r}")
    rows = []
    for level in grid:
        corrupted = []
        for i, cloud in enumerate(dataset):
            if mode == "perturb":
                corrupted.append(perturb_gaussian(cloud, float(level), seed=[seed, i]))
            else:
                corrupted.append(add_outliers(cloud, int(level), sigma_outlier, seed=[seed, i]))
        m = evaluate(model, corrupted)
        rows.append((level, m.accuracy, m.cd_mean))
    return rows


def write_sweep(rows, path, mode):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sigma" if mode == "perturb" else "outliers", "accuracy", "cd"])
        for level, acc, cd in rows:
            writer.writerow([level, repr(acc), repr(cd)])


def class_template_baseline(train_clouds, test_clouds, max_candidates=20, seed=0):
    """Mean Chamfer distance (x1000) of reconstructing each test cloud by its class medoid.

    The medoid is the candidate training cloud with the smallest summed
    Chamfer distance to all members of its class; up to ``max_candidates``
    random members are tried. The true test label picks the template.
    """
    rng = np.random.default_rng(seed)
    by_class = {}
    for c in train_clouds:
        by_class.setdefault(c.label, []).append(c.points)
    templates = {}
    for label, members in by_class.items():
        pts = np.stack(members)
        picks = rng.choice(len(pts), size=min(max_candidates, len(pts)), replace=False)
        costs = [T.chamfer(np.broadcast_to(pts[i], pts.shape), pts).data.sum() for i in picks]
        templates[label] = pts[picks[int(np.argmin(costs))]]
    cds = [T.chamfer(c.points, templates[c.label]).item() for c in test_clouds]
    return float(np.mean(cds) * CD_SCALE)
