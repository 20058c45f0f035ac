import numpy as np
import pytest

from pointcaps import routing
from pointcaps import tensor as T
from pointcaps.gradcheck import check_directional
from pointcaps.verify import CHECKS, check_routing_oracle, run_checks


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_each_check_passes_on_fresh_build(name):
    (result,) = run_checks([name], seeds=3)
    assert result.passed, result.detail
    assert result.seconds >= 0


def test_er_sign_flip_is_caught(monkeypatch):
    flipped = routing.euclidean_agreement
    monkeypatch.setattr(routing, "euclidean_agreement", lambda v, p: -flipped(v, p))
    passed, detail = check_routing_oracle(samples=20)
    assert not passed
    assert "ER" in detail


def test_crashing_check_is_a_failure(monkeypatch):
    def boom(seeds):
        raise RuntimeError("kaput")

    monkeypatch.setitem(CHECKS, "boom", boom)
    (result,) = run_checks(["boom"])
    assert not result.passed and "kaput" in result.detail


def _param(values, name="w"):
    return T.Tensor(np.asarray(values, dtype=float), requires_grad=True, name=name)


def test_directional_flags_a_wrong_gradient():
    w = _param([0.3, -1.2, 0.7])
    assert check_directional(lambda: T.tsum(w * w), [w])["w"] < 1e-8
    # a detached factor halves the tape gradient of sum(w^2)
    detached = lambda: T.tsum(w * T.Tensor(w.data))
    assert check_directional(detached, [w])["w"] == pytest.approx(0.5, abs=1e-6)


def test_richardson_beats_plain_differences_on_sharp_curvature():
    w = _param([1e-5], name="s")
    # sqrt(s^2 + eps) curves on the scale sqrt(eps), close to the step
    fn = lambda: T.tsum(T.sqrt(T.square(w) + 1e-10))
    plain = check_directional(fn, [w], h=1e-5)["s"]
    extrapolated = check_directional(fn, [w], h=1e-5, richardson=True)["s"]
    assert extrapolated < plain / 5


def test_branch_redraws_probes_across_a_kink():
    w = _param([2e-6, 2.0])
    fn = lambda: T.tsum(T.sqrt(T.square(w)))  # |w0| + |w1|, kinked at w0 = 0
    naive = check_directional(fn, [w])["w"]
    stats = {}
    errors = check_directional(fn, [w], branch=lambda: np.sign(w.data), stats=stats, redraws=50)
    assert naive > 1e-3
    assert stats["w"] > 0 and errors["w"] < 1e-8
