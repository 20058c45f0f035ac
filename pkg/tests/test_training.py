import csv

import numpy as np
import pytest

from pointcaps import tensor as T
from pointcaps.checkpoint import load_checkpoint
from pointcaps.config import ModelConfig
from pointcaps.data import generate_shape, make_dataset, stack
from pointcaps.exceptions import DivergenceError, InputError
from pointcaps.model import PointCapsNet
from pointcaps.training import (
    class_template_baseline,
    evaluate,
    fit_part_mapping,
    latent_perturb,
    noise_sweep,
    part_assign,
    part_iou,
    segment_eval,
    train,
    write_history,
    write_sweep,
)

TWO = ("sphere", "cube")


@pytest.fixture(scope="module")
def small_set():
    return make_dataset(TWO, per_class=4, n=32, seed=0)


@pytest.fixture(scope="module")
def trained(small_set):
    return train(ModelConfig.tiny(), small_set, epochs=3, batch_size=4, lr=1e-2, seed=0).model


def test_overfits_single_sample():
    cloud = generate_shape("cube", 32, seed=0, label=1)
    model = PointCapsNet(ModelConfig.tiny(), seed=0)
    x, y = stack([cloud])
    model.calibrate(x)
    start = model.loss(x, y, training=True, update_stats=False)[0].item()
    result = train(model, [cloud], epochs=200, batch_size=1, lr=3e-2, seed=0)
    end = result.model.loss(x, y, training=True, update_stats=False)[0].item()
    assert end < 0.1 * start
    assert evaluate(result.model, [cloud]).accuracy == 1.0


def test_training_is_deterministic(small_set):
    a = train(ModelConfig.tiny(), small_set, epochs=2, batch_size=4, seed=3)
    b = train(ModelConfig.tiny(), small_set, epochs=2, batch_size=4, seed=3)
    assert a.history == b.history
    for k, v in a.model.state_dict().items():
        assert np.array_equal(v, b.model.state_dict()[k])


def test_zero_gamma_leaves_decoder_untouched(small_set):
    model = PointCapsNet(ModelConfig.tiny(gamma=0.0), seed=0)
    before = model.state_dict()
    train(model, small_set, epochs=2, batch_size=4, lr=1e-2)
    after = model.state_dict()
    decoder = [k for k in before if k.split(".")[0] in ("dense", "deconv1", "deconv2", "deconv3",
                                                         "deconv4", "deconv5")]
    decoder += ["bn2.scale", "bn2.shift"]
    for k in decoder:
        assert np.array_equal(before[k], after[k]), k
    assert not np.array_equal(before["digit.weight"], after["digit.weight"])


def test_divergence_keeps_last_good_checkpoint(tmp_path, small_set):
    bad = [c for c in small_set]
    poisoned = generate_shape("sphere", 32, seed=1, label=0)
    poisoned.points[0, 0] = np.nan
    bad.append(poisoned)
    model = PointCapsNet(ModelConfig.tiny(), seed=0)
    before = model.state_dict()
    ckpt = tmp_path / "last.ckpt"
    with pytest.raises(DivergenceError):
        train(model, bad, epochs=1, batch_size=len(bad), checkpoint=ckpt)
    restored = load_checkpoint(ckpt)
    for k, v in before.items():
        assert np.array_equal(restored.state_dict()[k], v)


def test_validation_selects_best_epoch(tmp_path, small_set):
    ckpt = tmp_path / "best.ckpt"
    result = train(ModelConfig.tiny(), small_set, epochs=3, batch_size=4, lr=1e-2,
                   validation=small_set[:4], checkpoint=ckpt)
    assert 1 <= result.best_epoch <= 3
    reloaded = load_checkpoint(ckpt)
    assert evaluate(reloaded, small_set[:4]) == evaluate(result.model, small_set[:4])
    path = tmp_path / "history.csv"
    write_history(result.history, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "loss", "margin", "cd", "accuracy"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]


def test_empty_training_set():
    with pytest.raises(InputError):
        train(ModelConfig.tiny(), [], epochs=1)


# evaluation ---------------------------------------------------------------------------

def test_untrained_models_sit_at_chance():
    clouds = make_dataset(per_class=10, n=32, seed=0)
    accs = [evaluate(PointCapsNet(ModelConfig.tiny(num_classes=5), seed=s), clouds).accuracy
            for s in range(10)]
    assert abs(np.mean(accs) - 0.2) < 0.1


def test_cd_uses_thousand_scale(trained, small_set):
    m = evaluate(trained, small_set)
    x, _ = stack(small_set)
    recon = trained.forward(x).reconstruction.data
    assert m.cd_mean == pytest.approx(1000 * T.chamfer(x, recon).data.mean(), rel=1e-12)
    assert 0 <= m.accuracy <= 1


def test_eval_and_train_masking_differ(trained, small_set):
    x, y = stack(small_set)
    lengths = trained.forward(x).class_lengths.data
    wrong_label = (lengths.argmax(-1) + 1) % 2
    eval_recon = trained.forward(x).reconstruction.data
    forced = trained.forward(x, wrong_label).reconstruction.data
    assert not np.allclose(eval_recon, forced)


def test_part_assignment(trained):
    cloud = generate_shape("cube", 32, seed=5)
    assign = part_assign(trained, cloud)
    assert assign.shape == (32,)
    assert assign.min() >= 0 and assign.max() < trained.config.pca1_caps
    dup = cloud.points.copy()
    dup[1] = dup[0]
    both = part_assign(trained, dup)
    assert both[0] == both[1]


def test_part_iou_properties():
    truth = np.array([0, 0, 1, 1, 2, -1])
    assert part_iou(truth.copy(), truth) == 1.0
    pred = np.array([0, 1, 1, 1, 2, 0])
    expected = np.mean([1 / 2, 2 / 3, 1.0])
    assert part_iou(pred, truth) == pytest.approx(expected)
    relabel = np.array([2, 0, 1])
    assert part_iou(relabel[pred], np.where(truth >= 0, relabel[truth], -1)) == pytest.approx(expected)


def test_segment_eval_ranges(trained, small_set):
    acc, iou = segment_eval(trained, small_set, small_set, labeled_fraction=1.0)
    assert 0 <= acc <= 1 and 0 <= iou <= 1
    mapping = fit_part_mapping(trained, small_set)
    assert set(mapping) == {0, 1}
    assert all(len(m) == trained.config.pca1_caps for m in mapping.values())


def test_latent_perturbation(trained):
    cloud = generate_shape("sphere", 32, seed=6)
    base = trained.forward(cloud.points)
    original = base.latent.data[0, 1]
    (same,) = latent_perturb(trained, cloud, 1, [original])
    np.testing.assert_array_equal(same, base.reconstruction.data[0])
    sweep = latent_perturb(trained, cloud, 1, [-5, 0, 5])
    assert len(sweep) == 3 and all(np.all(np.isfinite(c)) and c.shape == (32, 3) for c in sweep)
    with pytest.raises(InputError):
        latent_perturb(trained, cloud, 4, [0])


def test_noise_sweep(tmp_path, trained, small_set):
    rows = noise_sweep(trained, small_set, "perturb", [0.0, 0.1, 0.2])
    plain = evaluate(trained, small_set)
    assert rows[0][1:] == (plain.accuracy, plain.cd_mean)
    outliers = noise_sweep(trained, small_set, "outliers", [0, 4, 8, 16])
    assert [r[0] for r in outliers] == [0, 4, 8, 16]
    assert outliers[0][1:] == (plain.accuracy, plain.cd_mean)
    path = tmp_path / "sweep.csv"
    write_sweep(outliers, path, "outliers")
    lines = list(csv.reader(open(path)))
    assert lines[0] == ["outliers", "accuracy", "cd"] and len(lines) == 5
    with pytest.raises(InputError):
        noise_sweep(trained, small_set, "blur", [0])


def test_template_baseline():
    clouds = make_dataset(TWO, per_class=3, n=32, seed=0)
    assert class_template_baseline(clouds, clouds) > 0
    same = [generate_shape("cube", 32, seed=0, label=0)] * 3
    assert class_template_baseline(same, same) == 0.0
