"""Exact-search contract: oracle equality, tie-breaking, determinism."""

import numpy as np
import pytest

from conftest import make_matrix
from landmark_pipeline.dataset import DescriptorMatrix
from landmark_pipeline.knn import knn_search, read_ranked_csv, to_ranked_list, write_ranked_csv


def naive_knn(queries, db, k, exclude_self=False):
    """Full-sort reference: float64 per-row sums, (distance, id) ordering."""
    out = []
    for qi, query_id in enumerate(queries.ids):
        q = queries.data[qi].astype(np.float64)
        candidates = []
        for j, db_id in enumerate(db.ids):
            if exclude_self and db_id == query_id:
                continue
            d2 = float(np.square(db.data[j].astype(np.float64) - q).sum())
            candidates.append((d2, db_id))
        candidates.sort()
        out.append([(db_id, d2) for d2, db_id in candidates[:k]])
    return out


def assert_matches_oracle(queries, db, k, exclude_self=False):
    got = knn_search(queries, db, k=k, exclude_self=exclude_self)
    want = naive_knn(queries, db, k, exclude_self)
    for nl, expected in zip(got, want):
        assert nl.neighbors == expected


class TestSearch:
    def test_query_in_db_comes_first_with_zero_distance(self):
        rng = np.random.default_rng(0)
        db = make_matrix(rng, 10, 8)
        queries = DescriptorMatrix(
            ids=["probe"], data=db.data[4:5].copy(), normalized=True
        )
        result = knn_search(queries, db, k=3)[0]
        assert result.neighbors[0] == (db.ids[4], 0.0)

    def test_matches_oracle_small(self):
        rng = np.random.default_rng(1)
        db = make_matrix(rng, 20, 8, "db")
        queries = make_matrix(rng, 5, 8, "q")
        assert_matches_oracle(queries, db, k=7)

    def test_tie_break_by_ascending_id(self):
        rng = np.random.default_rng(2)
        base = make_matrix(rng, 1, 8)
        # three identical rows under ids that sort differently than insertion
        data = np.repeat(base.data, 3, axis=0)
        db = DescriptorMatrix(ids=["zz", "aa", "mm"], data=data, normalized=True)
        queries = DescriptorMatrix(ids=["q"], data=base.data.copy(), normalized=True)
        result = knn_search(queries, db, k=3)[0]
        assert result.ids() == ["aa", "mm", "zz"]

    def test_independent_of_row_storage_order(self):
        rng = np.random.default_rng(3)
        db = make_matrix(rng, 30, 8, "db")
        queries = make_matrix(rng, 4, 8, "q")
        perm = rng.permutation(30)
        shuffled = DescriptorMatrix(
            ids=[db.ids[i] for i in perm], data=db.data[perm], normalized=True
        )
        a = knn_search(queries, db, k=10)
        b = knn_search(queries, shuffled, k=10)
        for x, y in zip(a, b):
            assert x.neighbors == y.neighbors

    def test_increasing_k_extends_prefix(self):
        rng = np.random.default_rng(4)
        db = make_matrix(rng, 25, 8, "db")
        queries = make_matrix(rng, 3, 8, "q")
        small = knn_search(queries, db, k=5)
        large = knn_search(queries, db, k=9)
        for s, l in zip(small, large):
            assert l.neighbors[:5] == s.neighbors

    def test_exclude_self_skips_matching_id(self):
        rng = np.random.default_rng(5)
        db = make_matrix(rng, 6, 8)
        result = knn_search(db, db, k=5, exclude_self=True)
        for nl in result:
            assert nl.query_id not in nl.ids()
        assert_matches_oracle(db, db, k=5, exclude_self=True)

    def test_k_larger_than_db_returns_all(self):
        rng = np.random.default_rng(6)
        db = make_matrix(rng, 4, 8, "db")
        queries = make_matrix(rng, 2, 8, "q")
        result = knn_search(queries, db, k=1000)
        assert all(len(nl.neighbors) == 4 for nl in result)

    def test_empty_db(self):
        rng = np.random.default_rng(7)
        queries = make_matrix(rng, 2, 8, "q")
        db = DescriptorMatrix(ids=[], data=np.empty((0, 8), np.float32), normalized=True)
        assert all(nl.neighbors == [] for nl in knn_search(queries, db, k=3))

    def test_dim_mismatch(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError, match="dim"):
            knn_search(make_matrix(rng, 2, 8), make_matrix(rng, 2, 4), k=1)

    def test_k_below_one(self):
        rng = np.random.default_rng(9)
        m = make_matrix(rng, 2, 8)
        with pytest.raises(ValueError, match="k"):
            knn_search(m, m, k=0)

    def test_warns_when_not_normalized(self):
        rng = np.random.default_rng(10)
        raw = DescriptorMatrix(
            ids=["a", "b"], data=rng.standard_normal((2, 4)).astype(np.float32)
        )
        with pytest.warns(UserWarning, match="normalized"):
            knn_search(raw, raw, k=1)


class TestRankedConversion:
    def test_distance_zero_scores_one(self):
        from landmark_pipeline.knn import NeighborList

        rl = to_ranked_list(NeighborList(query_id="q", neighbors=[("a", 0.0)]))
        assert rl.entries == [("a", 1.0)]

    def test_orthogonal_scores_zero(self):
        from landmark_pipeline.knn import NeighborList

        rl = to_ranked_list(NeighborList(query_id="q", neighbors=[("a", 2.0)]))
        assert rl.entries == [("a", 0.0)]

    def test_pointwise_formula(self):
        from landmark_pipeline.knn import NeighborList

        rng = np.random.default_rng(11)
        d2s = np.sort(rng.uniform(0, 4, size=10))
        nl = NeighborList(
            query_id="q", neighbors=[(f"n{i}", float(d)) for i, d in enumerate(d2s)]
        )
        rl = to_ranked_list(nl)
        for (image_id, score), (_, d2) in zip(rl.entries, nl.neighbors):
            assert score == 1.0 - d2 / 2.0

    def test_csv_round_trip_preserves_order(self, tmp_path):
        rng = np.random.default_rng(12)
        db = make_matrix(rng, 12, 8, "db")
        queries = make_matrix(rng, 3, 8, "q")
        ranked = [to_ranked_list(nl) for nl in knn_search(queries, db, k=6)]
        write_ranked_csv(ranked, tmp_path / "r.csv")
        loaded = read_ranked_csv(tmp_path / "r.csv")
        assert [rl.query_id for rl in loaded] == [rl.query_id for rl in ranked]
        for got, want in zip(loaded, ranked):
            assert got.entry_ids() == want.entry_ids()
