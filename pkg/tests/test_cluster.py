import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score, normalized_mutual_info_score

from oracles import block_affinity, canonical, min_ncut_partition
from spixel_ssc.cluster import (cluster_superpixels, evaluate, greedy_accuracy, kappa, kappa_from_confusion,
                                match_labels, nmi, overall_accuracy, propagate, spectral_cluster)
from spixel_ssc.errors import ValidationError

labelings = st.lists(st.integers(1, 4), min_size=4, max_size=40)


# -------------------------------------------------------------- spectral


def test_disconnected_blocks_recovered():
    A = np.zeros((7, 7))
    for block in ([0, 1, 2], [3, 4], [5, 6]):
        A[np.ix_(block, block)] = 1.0
    np.fill_diagonal(A, 0.0)
    labels, gap = spectral_cluster(A, 3, seed=0)
    assert canonical(labels).tolist() == [0, 0, 0, 1, 1, 2, 2]
    assert gap > 0.5


def test_zero_affinity_with_k_equal_m(caplog):
    labels, _ = spectral_cluster(np.zeros((4, 4)), 4)
    assert sorted(labels.tolist()) == [1, 2, 3, 4]
    assert "own cluster" in caplog.text


@pytest.mark.parametrize("seed", range(5))
def test_weak_cross_edges_match_min_cut_oracle(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(4, 13))
    A, truth = block_affinity(rng, M, 2)
    labels, _ = spectral_cluster(A, 2, seed=seed)
    oracle = min_ncut_partition(A, 2)
    np.testing.assert_array_equal(canonical(labels), canonical(oracle))
    np.testing.assert_array_equal(canonical(labels), canonical(truth))


def test_spectral_is_deterministic(rng):
    A = rng.uniform(0, 1, (15, 15))
    A = np.triu(A, 1) + np.triu(A, 1).T
    a = spectral_cluster(A, 3, seed=9)[0]
    b = spectral_cluster(A, 3, seed=9)[0]
    np.testing.assert_array_equal(a, b)
    assert set(a.tolist()) <= {1, 2, 3}


@pytest.mark.parametrize("A, k", [(np.zeros((3, 3)), 4), (np.zeros((3, 3)), 0),
                                  (np.array([[0.0, 1.0], [0.0, 0.0]]), 1),
                                  (np.array([[0.0, -1.0], [-1.0, 0.0]]), 1)])
def test_spectral_rejects_bad_input(A, k):
    with pytest.raises(ValidationError):
        spectral_cluster(A, k)


# ------------------------------------------------------------- propagate


def test_propagate_examples(rng):
    np.testing.assert_array_equal(propagate(np.array([3]), np.zeros(6, dtype=int)), [3] * 6)
    sp = np.array([2, 1, 1, 3])
    np.testing.assert_array_equal(propagate(sp, np.arange(4)), sp)
    hard = rng.integers(0, 4, 50)
    np.testing.assert_array_equal(propagate(sp, hard), [sp[h] for h in hard])


def test_cluster_result_invariant(rng):
    A, _ = block_affinity(rng, 10, 3)
    hard = rng.integers(0, 10, 80)
    res = cluster_superpixels(A, hard, 3, seed=1)
    assert np.all(res.pixel_labels == res.superpixel_labels[hard])
    assert len(set(res.pixel_labels.tolist())) <= 3


# --------------------------------------------------------------- metrics


def test_oa_examples():
    assert overall_accuracy([1, 1, 2, 2], [2, 2, 1, 1]) == 1.0
    assert overall_accuracy([1, 2, 1, 2], [1, 1, 2, 2]) == 0.5
    assert overall_accuracy([3, 1, 2], [3, 1, 2]) == 1.0


def test_nmi_examples():
    assert nmi([1, 2, 3, 1], [1, 2, 3, 1]) == pytest.approx(1.0)
    assert nmi([1, 1, 1, 1], [1, 2, 1, 2]) == 0.0
    assert nmi([1, 1, 2, 2], [1, 2, 1, 2]) == 0.0


def test_kappa_examples():
    assert kappa([1, 2, 2, 1], [1, 2, 2, 1]) == 1.0
    assert kappa_from_confusion(np.array([[1, 1], [1, 1]])) == 0.0
    assert kappa_from_confusion(np.array([[3, 1], [1, 3]])) == pytest.approx(0.5)


def test_kappa_degenerate_chance():
    assert kappa([1, 1, 1], [1, 1, 1]) == 0.0


def test_evaluate_report():
    r = evaluate(np.array([2, 2, 1, 1, 1]), np.array([1, 1, 2, 2, 0]))
    assert (r.oa, r.nmi, r.kappa) == (1.0, pytest.approx(1.0), 1.0)
    np.testing.assert_array_equal(r.confusion, [[2, 0], [0, 2]])
    assert set(r.as_dict()) == {"oa", "nmi", "kappa", "confusion"}


def test_metrics_need_labeled_pixels():
    with pytest.raises(ValidationError):
        evaluate([1, 2], [0, 0])
    with pytest.raises(ValidationError):
        evaluate([1, 2, 3], [1, 2])


@given(labelings, st.data())
def test_nmi_and_kappa_match_sklearn(gt, data):
    pred = data.draw(st.lists(st.integers(1, 4), min_size=len(gt), max_size=len(gt)))
    # sklearn scores two constant labelings as 1; here zero MI always gives 0
    if len(set(gt)) > 1 and len(set(pred)) > 1:
        assert nmi(pred, gt) == pytest.approx(normalized_mutual_info_score(gt, pred), abs=1e-9)
    matched = match_labels(pred, gt)
    if len(set(gt)) > 1 and set(matched.tolist()) <= set(gt):
        expected = cohen_kappa_score(gt, matched)
        if np.isfinite(expected):
            assert kappa(matched, gt) == pytest.approx(expected, abs=1e-9)


@given(labelings, st.data())
def test_metrics_invariant_under_relabeling(gt, data):
    pred = data.draw(st.lists(st.integers(1, 4), min_size=len(gt), max_size=len(gt)))
    perm = data.draw(st.permutations([1, 2, 3, 4]))
    renamed = [perm[p - 1] for p in pred]
    a, b = evaluate(pred, gt), evaluate(renamed, gt)
    assert (a.oa, a.kappa) == (b.oa, b.kappa)
    assert a.nmi == pytest.approx(b.nmi, abs=1e-12)


@given(labelings, st.data())
def test_unlabeled_pixels_do_not_matter(gt, data):
    n = len(gt)
    pred = data.draw(st.lists(st.integers(1, 4), min_size=n, max_size=n))
    extra = data.draw(st.lists(st.integers(1, 4), min_size=1, max_size=10))
    a = evaluate(pred, gt)
    b = evaluate(pred + extra, gt + [0] * len(extra))
    assert (a.oa, a.nmi, a.kappa) == (b.oa, b.nmi, b.kappa)


@given(labelings, st.data())
def test_hungarian_at_least_greedy(gt, data):
    pred = data.draw(st.lists(st.integers(1, 6), min_size=len(gt), max_size=len(gt)))
    assert overall_accuracy(pred, gt) >= greedy_accuracy(pred, gt) - 1e-12


def test_hungarian_beats_greedy_somewhere():
    # greedy grabs the 5 and is left with 0s; optimal takes 4 + 4
    gt = [1] * 5 + [1] * 4 + [2] * 4
    pred = [1] * 5 + [2] * 4 + [1] * 4
    assert greedy_accuracy(pred, gt) < overall_accuracy(pred, gt)


def test_tied_matchings_give_one_kappa():
    # both matchings reach 3/6; only one of them minimises chance agreement
    gt = [1, 1, 1, 1, 2, 2]
    pred = [1, 1, 2, 2, 1, 2]
    swapped = [2, 2, 1, 1, 2, 1]
    assert evaluate(pred, gt).kappa == evaluate(swapped, gt).kappa


def test_large_label_counts(rng):
    gt = rng.integers(1, 4, 300_000)
    pred = np.where(rng.uniform(size=gt.size) < 0.9, gt % 3 + 1, 1)
    # past 2**53 / n**3 the tie-break weight switches to floating point
    r = evaluate(pred, gt)
    assert r.oa == np.mean(np.where(pred == 1, 3, pred - 1) == gt)
