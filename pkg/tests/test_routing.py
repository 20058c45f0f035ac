import numpy as np
import pytest

from pointcaps import reference as ref
from pointcaps import tensor as T
from pointcaps.exceptions import ConfigurationError
from pointcaps.gradcheck import numeric_gradient, relative_error
from pointcaps.routing import (
    dissimilarity_range_probe,
    dot_agreement,
    route,
    route_dynamic,
    route_euclidean,
)


def votes_for(seed, shape=(3, 2, 4), scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


@pytest.mark.parametrize("router", [route_euclidean, route_dynamic])
def test_single_iteration_uses_uniform_couplings(router):
    v = votes_for(0, (5, 3, 4))
    res = router(v, 1)
    np.testing.assert_allclose(res.couplings.data, np.full((5, 3), 1 / 3))
    np.testing.assert_allclose(res.parents.data, T.squash(v.sum(0) / 3).data, atol=1e-15)


def test_single_parent_couples_fully():
    v = votes_for(1, (4, 1, 3))
    res = route_euclidean(v, 3)
    np.testing.assert_array_equal(res.couplings.data, np.ones((4, 1)))
    np.testing.assert_allclose(res.parents.data[0], T.squash(v[:, 0].sum(0)).data, atol=1e-15)


def test_single_child_rows_stay_normalized():
    res = route_euclidean(votes_for(2, (1, 3, 4)), 4, record_history=True)
    for couplings, _, _ in res.history:
        assert couplings.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("route", [route_euclidean, route_dynamic])
def test_single_child_single_parent_couples_fully(route):
    votes = votes_for(3, (1, 1, 4))
    res = route(votes, 3)
    assert np.all(res.couplings.data == 1.0)
    np.testing.assert_allclose(res.parents.data, T.squash(votes[0]).data, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["ER", "DR"])
@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_loop(kind, seed):
    v = votes_for(seed)
    res = route(v, kind, 3)
    parents, logits, couplings = ref.route(v, 3, kind)
    assert np.max(np.abs(res.parents.data - parents)) < 1e-12
    assert np.max(np.abs(res.logits.data - logits)) < 1e-12
    assert np.max(np.abs(res.couplings.data - couplings)) < 1e-12


def test_cosine_flag_matches_reference():
    v = votes_for(7)
    res = route_dynamic(v, 3, cosine=True)
    parents, logits, _ = ref.route(v, 3, "DR", cosine=True)
    assert np.max(np.abs(res.parents.data - parents)) < 1e-12
    assert np.max(np.abs(res.logits.data - logits)) < 1e-12


def test_dynamic_and_euclidean_agree_after_one_iteration():
    v = votes_for(3, (6, 4, 5))
    er, dr = route_euclidean(v, 1), route_dynamic(v, 1)
    np.testing.assert_array_equal(er.parents.data, dr.parents.data)
    np.testing.assert_array_equal(er.couplings.data, dr.couplings.data)


def test_orthogonal_vote_adds_nothing():
    votes = T.Tensor(np.array([[[1.0, 0.0, 0.0]]]))
    parents = T.Tensor(np.array([[0.0, 0.5, 0.0]]))
    assert dot_agreement(votes, parents).data[0, 0] == 0.0


def test_rejects_zero_iterations():
    with pytest.raises(ConfigurationError):
        route_euclidean(votes_for(0), 0)
    with pytest.raises(ConfigurationError):
        route(votes_for(0), "EM", 2)


def test_leading_axes_are_routed_independently():
    v = votes_for(4, (2, 3, 5, 4, 6))
    batched = route_dynamic(v, 3)
    for b in range(2):
        for e in range(3):
            single = route_dynamic(v[b, e], 3)
            np.testing.assert_allclose(batched.parents.data[b, e], single.parents.data, atol=1e-14)


# logit increment ranges ----------------------------------------------------------------

def unit_votes(seed, shape=(6, 4, 5)):
    v = votes_for(seed, shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.mark.parametrize("seed", range(10))
def test_probe_bounds(seed):
    (dr_lo, dr_hi), (er_lo, er_hi) = dissimilarity_range_probe(unit_votes(seed))
    assert -1 <= dr_lo <= dr_hi <= 1
    assert er_lo <= er_hi <= 0


def test_probe_scaling_with_fixed_parents():
    v = unit_votes(11)
    parents = T.squash(v.sum(0) / v.shape[1]).data
    (dr1, _), (er1, _) = dissimilarity_range_probe(v, parents)
    (dr10, _), (er10, _) = dissimilarity_range_probe(10 * v, parents)
    # independent evaluation of both increment formulas
    p = parents[None]
    expected_dr = (10 * v * p).sum(-1).min()
    expected_er = -((10 * v - p) ** 2).sum(-1).min()
    assert dr10 == pytest.approx(expected_dr, rel=1e-12)
    assert dr10 == pytest.approx(10 * dr1, rel=1e-12)
    assert er10 == pytest.approx(-((10 * v - p) ** 2).sum(-1).max(), rel=1e-12)
    assert er10 / er1 > 20
    assert expected_er <= 0


# invariants ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["ER", "DR"])
@pytest.mark.parametrize("seed", range(10))
def test_couplings_stay_on_simplex(kind, seed):
    res = route(votes_for(seed, (7, 5, 3), scale=2.0), kind, 4, record_history=True)
    for couplings, _, parents in res.history:
        assert np.all(np.abs(couplings.sum(-1) - 1) < 1e-12)
        assert np.all(np.linalg.norm(parents, axis=-1) < 1)


@pytest.mark.parametrize("seed", range(10))
def test_euclidean_logits_never_increase(seed):
    res = route_euclidean(votes_for(seed, (7, 5, 3)), 5, record_history=True)
    previous = np.zeros((7, 5))
    for _, logits, _ in res.history:
        assert np.all(logits <= previous)
        previous = logits
    assert np.all(res.logits.data <= 0)


def test_agreement_concentrates_couplings():
    gains = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n_child, n_parent, dim = 8, 4, 8
        v = rng.normal(0, 0.5, size=(n_child, n_parent, dim))
        u = rng.normal(size=dim)
        v[:, 0] = 0.9 * u / np.linalg.norm(u)
        hist = route_euclidean(v, 3, record_history=True).history
        gains.append(hist[2][0][:, 0].mean() - hist[0][0][:, 0].mean())
    assert min(gains) > 0


@pytest.mark.parametrize("kind", ["ER", "DR"])
def test_child_permutation_equivariance(kind):
    v = votes_for(5, (9, 4, 3))
    perm = np.random.default_rng(0).permutation(9)
    a, b = route(v, kind, 3), route(v[perm], kind, 3)
    np.testing.assert_allclose(b.parents.data, a.parents.data, atol=1e-14)
    np.testing.assert_allclose(b.logits.data, a.logits.data[perm], atol=1e-14)
    np.testing.assert_allclose(b.couplings.data, a.couplings.data[perm], atol=1e-14)


def test_routing_is_deterministic():
    v = votes_for(6, (5, 3, 4))
    a, b = route_euclidean(v, 3), route_euclidean(v, 3)
    assert np.array_equal(a.parents.data, b.parents.data)
    assert np.array_equal(a.logits.data, b.logits.data)


# gradients ---------------------------------------------------------------------------

def _routing_loss(v, **kw):
    return T.tsum(T.square(route_euclidean(v, 2, **kw).parents))


@pytest.mark.parametrize("seed", range(5))
def test_unrolled_gradient_matches_finite_differences(seed):
    v0 = votes_for(seed)
    v = T.Tensor(v0.copy(), requires_grad=True)
    with T.Tape() as tape:
        loss = _routing_loss(v)
    tape.backward(loss)
    arr = v0.copy()
    (num,) = numeric_gradient(lambda: _routing_loss(arr).item(), [arr])
    assert relative_error(v.grad, num) < 1e-5


def test_detached_couplings_differentiate_only_the_weighted_sum():
    v0 = votes_for(9)
    v = T.Tensor(v0.copy(), requires_grad=True)
    with T.Tape() as tape:
        res = route_euclidean(v, 2, detach_couplings=True)
        loss = T.tsum(T.square(res.parents))
    tape.backward(loss)
    frozen = res.couplings.data

    def frozen_loss(arr):
        s = (frozen[..., None] * arr).sum(0)
        return float((T.squash(s).data ** 2).sum())

    arr = v0.copy()
    (num,) = numeric_gradient(lambda: frozen_loss(arr), [arr])
    assert relative_error(v.grad, num) < 1e-6
