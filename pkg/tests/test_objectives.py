import math

import numpy as np
import pytest

from setsim import encoder as enc
from setsim import numcore as nc
from setsim.matching import CorrespondenceSet, Strategy
from setsim.objectives import (
    LossReport,
    NegativeQueue,
    combined_loss,
    dense_term,
    geo_consistency_loss,
    info_nce_batch,
    info_nce_image,
    pooled_set_embedding,
    queue_push,
    set_contrastive_loss,
    simsiam_image_loss,
    simsiam_set_loss,
    symmetrized,
)
from setsim.gradcheck import run_check
from oracles import info_nce_direct, ring_buffer_sim, set_loss_direct


def unit_rows(rng, n, d):
    return nc.l2_normalize(rng.normal(size=(n, d)))


# ---------------------------------------------------------------- queue

def test_push_three_into_two():
    q = NegativeQueue.empty(2, 2)
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    q = queue_push(q, rows)
    np.testing.assert_array_equal(q.entries, rows[1:])
    assert len(q) == 2


def test_push_nothing():
    q = queue_push(NegativeQueue.empty(3, 2), np.array([[1.0, 0.0]]))
    q2 = queue_push(q, np.zeros((0, 2)))
    np.testing.assert_array_equal(q2.entries, q.entries)
    assert (q2.size, q2.write_cursor) == (q.size, q.write_cursor)


def test_push_is_functional():
    q = NegativeQueue.empty(3, 2)
    queue_push(q, np.array([[1.0, 0.0]]))
    assert len(q) == 0


def test_push_rejects_non_unit_rows():
    with pytest.raises(ValueError, match="unit norm"):
        queue_push(NegativeQueue.empty(3, 2), np.array([[1.0, 1.0]]))


def test_queue_matches_ring_buffer_simulation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cap = int(rng.integers(1, 8))
        q = NegativeQueue.empty(cap, 3)
        pushes = []
        for _ in range(int(rng.integers(1, 6))):
            batch = unit_rows(rng, int(rng.integers(0, 5)), 3)
            pushes.append(list(batch))
            q = queue_push(q, batch)
        expect = ring_buffer_sim(cap, pushes)
        assert len(q) == len(expect) <= cap
        if expect:
            np.testing.assert_array_equal(q.entries, np.array(expect))


def test_empty_queue_rejected_by_losses():
    with pytest.raises(ValueError, match="empty"):
        info_nce_image(np.array([1.0, 0.0]), np.array([1.0, 0.0]), NegativeQueue.empty(2, 2), 0.2)


# ---------------------------------------------------------------- image InfoNCE

def test_info_nce_closed_form():
    loss, _ = info_nce_image(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([[0.0, 1.0]]), 0.2)
    assert loss == pytest.approx(math.log1p(math.exp(-5.0)), abs=1e-15)
    assert loss == pytest.approx(0.0067, abs=5e-5)


def test_info_nce_identical_positive_and_negative():
    v = np.array([0.6, 0.8])
    loss, _ = info_nce_image(v, v, v[None], 0.2)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_info_nce_matches_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(30):
        q, k = unit_rows(rng, 1, 5)[0], unit_rows(rng, 1, 5)[0]
        neg = unit_rows(rng, 6, 5)
        tau = rng.uniform(0.05, 1.0)
        assert info_nce_image(q, k, neg, tau)[0] == pytest.approx(info_nce_direct(q, k, neg, tau), abs=1e-12)


def test_info_nce_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        info_nce_image(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([[0.0, 1.0]]), 0.0)


def test_info_nce_gradient():
    for seed in range(10):
        assert run_check("info_nce", seed) < 1e-4


def test_info_nce_decreases_with_positive_similarity():
    rng = np.random.default_rng(2)
    q = unit_rows(rng, 1, 4)[0]
    neg = unit_rows(rng, 5, 4)
    other = unit_rows(rng, 1, 4)[0]
    losses = [info_nce_image(q, nc.l2_normalize(t * q + (1 - t) * other), neg, 0.2)[0] for t in np.linspace(0, 1, 6)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert min(losses) >= 0


def test_info_nce_batch_is_mean():
    rng = np.random.default_rng(3)
    q, k, neg = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3), unit_rows(rng, 5, 3)
    loss, grad = info_nce_batch(q, k, neg, 0.3)
    singles = [info_nce_image(q[i], k[i], neg, 0.3) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-14)
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 4, atol=1e-15)


# ---------------------------------------------------------------- set loss

def test_set_loss_singletons_reduce_to_info_nce():
    rng = np.random.default_rng(4)
    pq, pk = rng.normal(size=(5, 3, 3)), rng.normal(size=(5, 3, 3))
    neg = unit_rows(rng, 6, 5)
    corr = CorrespondenceSet(Strategy.SORT, [0, 4, 7], [[2], [4], [8]])
    loss, _ = set_contrastive_loss(pq, pk, corr, neg, 0.2)
    qc = nc.l2_normalize(pq.reshape(5, -1).T)
    kc = nc.l2_normalize(pk.reshape(5, -1).T)
    expect = np.mean([info_nce_image(qc[i], kc[j], neg, 0.2)[0] for i, j in corr.pairs()])
    assert abs(loss - expect) <= 1e-12


def test_set_loss_duplicate_keys_counted_twice():
    q = np.array([1.0, 0.0])
    k = np.array([0.6, 0.8])
    neg = np.array([[0.0, 1.0]])
    pq = np.zeros((2, 1, 2))
    pq[:, 0, 0] = q
    pk = np.zeros((2, 1, 2))
    pk[:, 0, 0] = k
    pk[:, 0, 1] = k
    corr = CorrespondenceSet(Strategy.SET2SET, [0], [[0, 1]])
    loss, _ = set_contrastive_loss(pq, pk, corr, neg, 0.2)
    s = math.exp(0.6 / 0.2)
    assert loss == pytest.approx(-math.log(s / (2 * s + math.exp(0.0))), abs=1e-14)


def test_set_loss_matches_direct_transcription():
    rng = np.random.default_rng(5)
    for _ in range(20):
        d, g = 4, 3
        pq, pk = rng.normal(size=(d, g, g)), rng.normal(size=(d, g, g))
        qi = sorted(rng.choice(9, size=4, replace=False).tolist())
        per = [rng.choice(9, size=int(rng.integers(1, 4)), replace=False).tolist() for _ in qi]
        neg = unit_rows(rng, 8, d)
        loss, _ = set_contrastive_loss(pq, pk, CorrespondenceSet(Strategy.SET2SET, qi, per), neg, 0.2)
        direct = set_loss_direct(list(pq.reshape(d, -1).T), list(pk.reshape(d, -1).T), qi, per, list(neg), 0.2)
        assert abs(loss - direct) <= 1e-12


def test_set_loss_gradient_and_selected_columns_only():
    for seed in range(10):
        assert run_check("set_contrastive", seed) < 1e-4
    rng = np.random.default_rng(6)
    pq, pk = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
    _, grad = set_contrastive_loss(pq, pk, CorrespondenceSet(Strategy.SET2SET, [1], [[0, 2]]), unit_rows(rng, 3, 4), 0.2)
    cols = grad.reshape(4, -1).T
    assert not cols[[0, 2, 3]].any() and cols[1].any()


def test_set_loss_rejects_empty_sets():
    pq = np.ones((2, 1, 2))
    with pytest.raises(ValueError):
        set_contrastive_loss(pq, pq, CorrespondenceSet(Strategy.SET2SET, [0], [[]]), np.array([[1.0, 0.0]]), 0.2)
    with pytest.raises(ValueError):
        set_contrastive_loss(pq, pq, CorrespondenceSet(Strategy.SET2SET, [], []), np.array([[1.0, 0.0]]), 0.2)
    with pytest.raises(ValueError):
        set_contrastive_loss(pq, pq, CorrespondenceSet(Strategy.SET2SET, [0], [[0]]), np.array([[1.0, 0.0]]), -1)


def test_losses_invariant_to_queue_order():
    rng = np.random.default_rng(7)
    pq, pk = rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2))
    neg = unit_rows(rng, 7, 4)
    perm = rng.permutation(7)
    corr = CorrespondenceSet(Strategy.SET2SET, [0, 3], [[1, 2], [0]])
    a = set_contrastive_loss(pq, pk, corr, neg, 0.2)[0]
    b = set_contrastive_loss(pq, pk, corr, neg[perm], 0.2)[0]
    assert a == pytest.approx(b, abs=1e-14)
    q, k = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    assert info_nce_batch(q, k, neg, 0.2)[0] == pytest.approx(info_nce_batch(q, k, neg[perm], 0.2)[0], abs=1e-14)


def test_tau_scaling_identity():
    rng = np.random.default_rng(8)
    q, k, neg = unit_rows(rng, 1, 3)[0], unit_rows(rng, 1, 3)[0], unit_rows(rng, 4, 3)
    c = 0.5
    a = info_nce_image(q, k, neg, 0.2)[0]
    b = info_nce_image(c * q, k, neg, c * 0.2)[0]
    assert a == pytest.approx(b, abs=1e-12)


def test_pooled_set_embedding_unit_norm():
    p = np.random.default_rng(9).normal(size=(3, 32, 4, 4))
    np.testing.assert_allclose(np.linalg.norm(pooled_set_embedding(p), axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- geometry

def test_geo_identical_maps():
    p = np.random.default_rng(10).normal(size=(4, 3, 3))
    loss, _, _ = geo_consistency_loss(p, p, [(i, i) for i in range(9)])
    assert loss == pytest.approx(-1.0, abs=1e-14)


def test_geo_empty_pairs():
    p = np.ones((4, 2, 2))
    loss, dq, dk = geo_consistency_loss(p, p, [])
    assert loss == 0.0 and not dq.any() and not dk.any()


def test_geo_gradient():
    for seed in range(10):
        assert run_check("geo_consistency", seed) < 1e-4


# ---------------------------------------------------------------- simsiam

def test_simsiam_identity_identical():
    params = enc.identity_predictor(enc.init_params(0, with_predictor=True))
    p = np.abs(np.random.default_rng(11).normal(size=(enc.EMBED_DIM, 2, 2)))
    cols = nc.l2_normalize(p.reshape(enc.EMBED_DIM, -1).T)
    p = cols.T.reshape(p.shape)
    corr = CorrespondenceSet(Strategy.SORT, [0, 1, 2, 3], [[0], [1], [2], [3]])
    loss, _, d_k, _ = simsiam_set_loss(p, p, params, corr)
    assert loss == pytest.approx(-1.0, abs=1e-14)
    assert not d_k.any()


def test_simsiam_orthogonal_pairs():
    params = enc.identity_predictor(enc.init_params(0, with_predictor=True))
    pq = np.zeros((enc.EMBED_DIM, 1, 1))
    pk = np.zeros((enc.EMBED_DIM, 1, 1))
    pq[0] = 1.0
    pk[1] = 1.0
    loss, _, _, _ = simsiam_set_loss(pq, pk, params, CorrespondenceSet(Strategy.SORT, [0], [[0]]))
    assert loss == 0.0


def test_simsiam_gradients_and_stop_gradient():
    for seed in range(5):
        assert run_check("simsiam", seed) < 1e-4


def test_simsiam_image_loss_identity():
    params = enc.identity_predictor(enc.init_params(0, with_predictor=True))
    v = nc.l2_normalize(np.abs(np.random.default_rng(12).normal(size=(3, enc.EMBED_DIM))))
    assert simsiam_image_loss(v, v, params)[0] == pytest.approx(-1.0, abs=1e-14)


# ---------------------------------------------------------------- combination

def test_combined_loss_examples():
    assert combined_loss(2.0, 4.0, 0.0) == 2.0
    assert combined_loss(2.0, 4.0, 1.0) == 4.0
    assert combined_loss(2.0, 4.0, 0.5) == 3.0
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, 1.1)


def test_dense_term_with_geo():
    assert dense_term(3.0, None) == 3.0
    assert dense_term(3.0, -1.0) == 1.5
    assert combined_loss(2.0, dense_term(3.0, -0.5), 0.5) == pytest.approx(0.5 * 2.0 + 0.5 * (1.5 + 0.25))


def test_symmetrized_examples():
    assert symmetrized(lambda a, b: a + b, 1.0, 2.0) == 3.0
    table = {("q", "k"): 1.0, ("k", "q"): 3.0}
    assert symmetrized(lambda a, b: table[(a, b)], "q", "k") == 2.0


def test_symmetrized_loss_reports():
    table = {("q", "k"): LossReport(1.0, 2.0, 0.0, 1.5, 10), ("k", "q"): LossReport(3.0, 4.0, 0.0, 3.5, 6)}
    r = symmetrized(lambda a, b: table[(a, b)], "q", "k")
    assert (r.l_img, r.l_set, r.total, r.pair_count) == (2.0, 3.0, 2.5, 16)
