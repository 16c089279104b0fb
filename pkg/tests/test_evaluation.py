import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncertain_retrieval import evaluation
from uncertain_retrieval.evaluation import (
    RecallReport,
    evaluate_features,
    rank,
    recall_at_k,
    recall_from_features,
    recall_oracle,
    reports_to_csv,
    reports_to_json,
)


def test_rank_arithmetic_example():
    gallery = np.array([[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]])
    assert rank(np.array([1.0, 0.0]), gallery).tolist() == [0, 2, 1]


def test_rank_self_match_first(rng):
    gallery = rng.normal(size=(30, 6))
    assert rank(gallery[17], gallery)[0] == 17


def test_rank_identical_rows_lower_id_first():
    gallery = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    assert rank(np.array([1.0, 1.0]), gallery).tolist() == [1, 2, 0]


def test_rank_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero-norm"):
        rank(np.array([1.0, 0.0]), np.array([[0.0, 0.0], [1.0, 0.0]]))


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=40, deadline=None)
def test_rank_invariant_to_positive_rescaling(seed, scale):
    rng = np.random.default_rng(seed)
    gallery = rng.normal(size=(25, 5))
    query = rng.normal(size=5)
    base = rank(query, gallery)
    scaled = gallery.copy()
    scaled[rng.integers(25)] *= scale
    assert rank(query * scale, gallery).tolist() == base.tolist()
    assert rank(query, scaled).tolist() == base.tolist()


def test_recall_counting_example():
    # 0-based positions 0, 4, 11 are ranks 1, 5, 12
    lists = []
    for pos in (0, 4, 11):
        order = list(range(1, 20))
        order.insert(pos, 0)
        lists.append(order)
    report = recall_at_k(lists, [0, 0, 0], ks=(1, 10))
    assert report.per_k[10] == pytest.approx(2 / 3, abs=0)
    assert report.per_k[1] == pytest.approx(1 / 3, abs=0)
    assert report.n_queries == 3


def test_recall_window_covers_gallery(rng):
    g = rng.normal(size=(12, 4))
    q = rng.normal(size=(5, 4))
    targets = rng.integers(0, 12, size=5)
    assert recall_from_features(q, g, targets, ks=(12, 50)).per_k == {12: 1.0, 50: 1.0}


def test_recall_all_first():
    assert recall_at_k([[3, 1, 2], [2, 3, 1]], [3, 2], ks=(1,)).per_k == {1: 1.0}


def test_recall_missing_target():
    with pytest.raises(ValueError, match="missing"):
        recall_at_k([[0, 1, 2]], [7])
    with pytest.raises(ValueError, match="outside gallery"):
        recall_from_features(np.ones((1, 2)), np.ones((3, 2)), [3])


def test_empty_k_list(rng):
    report = recall_from_features(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), [0, 1, 2], ks=())
    assert report.per_k == {}


def test_single_query_single_item():
    assert recall_oracle(np.ones((1, 3)), np.ones((1, 3)), [0], 1) == 1.0
    assert recall_from_features(np.ones((1, 3)), np.ones((1, 3)), [0], ks=(1,)).per_k[1] == 1.0


def test_fast_path_equals_oracle_on_50_instances():
    rng = np.random.default_rng(314)
    for _ in range(50):
        n_gallery = int(rng.integers(1, 257))
        n_query = int(rng.integers(1, 33))
        d = int(rng.integers(2, 9))
        g = rng.normal(size=(n_gallery, d))
        if n_gallery > 3:
            g[1] = g[0] * 2.0  # duplicate direction: exercises the tie rule
        q = rng.normal(size=(n_query, d))
        targets = rng.integers(0, n_gallery, size=n_query)
        ks = sorted({1, int(rng.integers(1, n_gallery + 1)), 10, 50})
        fast = recall_from_features(q, g, targets, ks=ks)
        lists = [rank(row, g) for row in q]
        slow_lists = recall_at_k(lists, targets, ks=ks)
        for k in ks:
            assert fast.per_k[k] == recall_oracle(q, g, targets, k)
            assert slow_lists.per_k[k] == fast.per_k[k]


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_recall_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(40, 3))
    q = rng.normal(size=(10, 3))
    report = recall_from_features(q, g, rng.integers(0, 40, size=10), ks=(1, 2, 5, 10, 20, 40))
    values = list(report.per_k.values())
    assert all(0.0 <= v <= 1.0 for v in values)
    assert values == sorted(values)


def test_evaluate_features_strata(small_dataset):
    ds = small_dataset
    rng = np.random.default_rng(0)
    q = rng.normal(size=(len(ds.queries), 8))
    g = rng.normal(size=(ds.items.shape[0], 8))
    reports = evaluate_features(q, g, ds.queries)
    assert set(reports) == {"all", "coarse", "fine"}
    assert reports["coarse"].n_queries + reports["fine"].n_queries == reports["all"].n_queries
    for r in reports.values():
        for k in evaluation.DEFAULT_KS:
            # any-valid recall counts a superset of hits
            assert r.any_valid[k] >= r.per_k[k]
    fine = ds.queries.granularity == 0
    direct = recall_from_features(q[fine], g, ds.queries.target_ids[fine])
    assert direct.per_k == reports["fine"].per_k == reports["fine"].any_valid


def test_evaluate_features_deterministic(small_dataset):
    rng = np.random.default_rng(1)
    q = rng.normal(size=(len(small_dataset.queries), 4))
    g = rng.normal(size=(small_dataset.items.shape[0], 4))
    a = reports_to_json(evaluate_features(q, g, small_dataset.queries).values())
    b = reports_to_json(evaluate_features(q, g, small_dataset.queries).values())
    assert a == b


def test_report_serialization():
    reports = [
        RecallReport(per_k={1: 0.25, 10: 0.5}, n_queries=4, stratum="coarse"),
        RecallReport(per_k={1: None}, n_queries=0, stratum="fine"),
    ]
    lines = reports_to_csv(reports).splitlines()
    assert lines[0] == "stratum,K,recall,n"
    assert lines[1:] == ["coarse,1,0.25,4", "coarse,10,0.5,4", "fine,1,,0"]
    raw = json.loads(reports_to_json(reports))
    assert RecallReport.from_dict(raw[0]) == reports[0]
