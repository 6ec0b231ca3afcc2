import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from oracles import random_retrieval, ranking_metrics
from spikegait.harness.evaluate import EvalResult, distance_matrix, evaluate


def test_hand_enumerated_ranking():
    # positives at ranks 1 and 3 of 4
    d = np.array([[0.1, 0.2, 0.3, 0.4]])
    r = evaluate(None, [7, 1, 7, 2], None, [7], distances=d)
    assert r.ap[0] == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-15)
    assert r.inp[0] == pytest.approx(2 / 3, abs=1e-15)
    assert r.rank1 == 100.0
    assert r.map == pytest.approx(100 * 5 / 6, abs=1e-12)


def test_rank1_miss_and_perfect_retrieval():
    emb = np.eye(4)
    r = evaluate(emb, [0, 1, 2, 3], emb + 0.01, [0, 1, 2, 3])
    assert (r.rank1, r.map, r.minp) == (100.0, 100.0, 100.0)
    r = evaluate(emb, [0, 1, 2, 3], emb[[1]], [0])
    assert r.rank1 == 0.0 and r.map == pytest.approx(50.0)


@given(st.integers(0, 2**32 - 1))
@example(200343)  # every probe identity missing from the gallery
def test_matches_exhaustive_reference(seed):
    rng = np.random.default_rng(seed)
    emb, labels = random_retrieval(rng, n_ids=int(rng.integers(2, 8)), per_id=int(rng.integers(2, 6)), dim=4)
    perm = rng.permutation(len(labels))
    g, q = perm[: len(perm) // 2], perm[len(perm) // 2:]
    d = distance_matrix(emb[q], emb[g])
    # coarse rounding forces distance ties, exercising the id tie-break
    d = np.round(d, 1)
    r = evaluate(None, labels[g], None, labels[q], gallery_ids=g, distances=d)
    keep = [i for i in range(len(q)) if labels[q][i] in set(labels[g])]
    if not keep:
        assert r.n_probes == 0 and len(r.excluded) == len(q) and r.rank1 == r.map == r.minp == 0.0
        return
    ref = ranking_metrics(d[keep].tolist(), labels[g].tolist(), labels[q][keep].tolist(), g.tolist())
    assert r.n_probes == len(keep)
    assert abs(r.rank1 - ref[0]) <= 1e-10
    assert abs(r.map - ref[1]) <= 1e-10
    assert abs(r.minp - ref[2]) <= 1e-10


def test_ties_broken_by_sample_id():
    d = np.zeros((1, 3))
    r = evaluate(None, [1, 0, 0], None, [0], gallery_ids=np.array(["c", "b", "a"]), distances=d)
    assert r.rank1 == 100.0
    r = evaluate(None, [1, 0, 0], None, [0], gallery_ids=np.array(["a", "b", "c"]), distances=d)
    assert r.rank1 == 0.0


def test_squared_distance_gives_same_ranking():
    rng = np.random.default_rng(3)
    emb, labels = random_retrieval(rng, 6, 5, 8)
    a = evaluate(emb[:15], labels[:15], emb[15:], labels[15:])
    b = evaluate(emb[:15], labels[:15], emb[15:], labels[15:], metric="sqeuclidean")
    assert (a.rank1, a.map, a.minp) == (b.rank1, b.map, b.minp)
    with pytest.raises(ValueError):
        distance_matrix(emb, emb, "cosine")


def test_probe_without_positive_is_excluded():
    emb = np.eye(3)
    r = evaluate(emb[:2], [0, 1], emb, [0, 1, 9])
    assert r.excluded == [2] and r.n_probes == 2


def test_same_sample_id_is_skipped():
    emb = np.array([[0.0], [0.1], [5.0]])
    ids = np.array(["a", "b", "c"])
    r = evaluate(emb, [0, 0, 1], emb, [0, 0, 1], gallery_ids=ids, probe_ids=ids)
    # probe c has no other sample of identity 1
    assert r.excluded == [2]
    assert r.rank1 == 100.0


def test_pooled_results_average_over_all_probes():
    a = EvalResult.from_lists([1.0], [1.0], [1.0])
    b = EvalResult.from_lists([0.0, 0.0, 1.0], [0.5, 0.5, 1.0], [0.5, 0.5, 1.0])
    p = EvalResult.pooled([a, b])
    assert p.n_probes == 4
    assert p.rank1 == 50.0 and p.map == 75.0
    assert EvalResult.from_lists([], [], [], [0]).rank1 == 0.0
