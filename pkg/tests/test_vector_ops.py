"""Normalization, multiscale averaging, ensemble concat, DBA, and alpha-QE."""

import numpy as np
import pytest

from conftest import make_matrix, unit_rows
from landmark_pipeline.dataset import DescriptorMatrix
from landmark_pipeline.vector_ops import (
    alpha_qe,
    concat_ensemble,
    dba,
    l2_normalize,
    multiscale_average,
    zero_row_ids,
)


def matrix(rows, ids=None, normalized=False):
    rows = np.asarray(rows, dtype=np.float32)
    ids = ids or [f"r{i}" for i in range(len(rows))]
    return DescriptorMatrix(ids=ids, data=rows, normalized=normalized)


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(matrix([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-7)
        assert out.normalized

    def test_zero_row_kept_and_reported(self):
        with pytest.warns(UserWarning, match="zero descriptor rows"):
            out = l2_normalize(matrix([[0.0, 0.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
        assert zero_row_ids(out) == ["r0"]

    def test_random_rows_unit_norm(self):
        rng = np.random.default_rng(0)
        out = l2_normalize(matrix(rng.standard_normal((10, 16))))
        norms = np.linalg.norm(out.data.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        once = l2_normalize(matrix(rng.standard_normal((4, 8))))
        twice = l2_normalize(once)
        np.testing.assert_allclose(once.data, twice.data, atol=1e-7)


class TestMultiscaleAverage:
    def test_identical_inputs_fixed_point(self):
        rng = np.random.default_rng(2)
        m = make_matrix(rng, 5, 8)
        out = multiscale_average([m, m, m])
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)

    def test_symmetric_two_rows(self):
        a = matrix([[1.0, 0.0]], ids=["q"], normalized=True)
        b = matrix([[0.0, 1.0]], ids=["q"], normalized=True)
        out = multiscale_average([a, b])
        s = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(out.data, [[s, s]], atol=1e-7)

    def test_matches_mean_normalize_oracle(self):
        rng = np.random.default_rng(3)
        inputs = [make_matrix(rng, 6, 12) for _ in range(3)]
        # re-key so ids coincide
        for m in inputs[1:]:
            m.ids = list(inputs[0].ids)
        out = multiscale_average(inputs)
        mean = np.mean([m.data.astype(np.float64) for m in inputs], axis=0)
        expected = mean / np.linalg.norm(mean, axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_id_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        a, b = make_matrix(rng, 3, 4), make_matrix(rng, 3, 4, prefix="other")
        with pytest.raises(ValueError, match="share ids"):
            multiscale_average([a, b])

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        a, b = make_matrix(rng, 3, 4), make_matrix(rng, 3, 6)
        with pytest.raises(ValueError, match="dim"):
            multiscale_average([a, b])

    def test_commutes_with_row_permutation(self):
        rng = np.random.default_rng(6)
        inputs = [make_matrix(rng, 5, 8) for _ in range(2)]
        inputs[1].ids = list(inputs[0].ids)
        perm = rng.permutation(5)
        permuted = [
            DescriptorMatrix(
                ids=[m.ids[i] for i in perm], data=m.data[perm], normalized=True
            )
            for m in inputs
        ]
        direct = multiscale_average(inputs)
        swapped = multiscale_average(permuted)
        np.testing.assert_array_equal(direct.data[perm], swapped.data)


class TestConcatEnsemble:
    def test_single_model_identity(self):
        rng = np.random.default_rng(7)
        m = make_matrix(rng, 4, 8)
        out = concat_ensemble([m])
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)

    def test_six_models_of_512_give_3072(self):
        rng = np.random.default_rng(8)
        models = [make_matrix(rng, 3, 512) for _ in range(6)]
        for m in models[1:]:
            m.ids = list(models[0].ids)
        assert concat_ensemble(models).dim == 3072

    def test_hand_example(self):
        a = matrix([[1.0, 0.0]], ids=["q"], normalized=True)
        b = matrix([[0.0, 1.0]], ids=["q"], normalized=True)
        out = concat_ensemble([a, b])
        s = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(out.data, [[s, 0.0, 0.0, s]], atol=1e-7)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            concat_ensemble([])

    def test_model_order_permutes_blocks(self):
        rng = np.random.default_rng(9)
        a, b = make_matrix(rng, 4, 3), make_matrix(rng, 4, 5)
        b.ids = list(a.ids)
        ab = concat_ensemble([a, b])
        ba = concat_ensemble([b, a])
        np.testing.assert_array_equal(ab.data[:, :3], ba.data[:, 5:])
        np.testing.assert_array_equal(ab.data[:, 3:], ba.data[:, :5])

    def test_requires_normalized_inputs(self):
        m = matrix([[3.0, 4.0]])
        with pytest.raises(ValueError, match="normalized"):
            concat_ensemble([m])


def naive_dba(db: DescriptorMatrix, k: int) -> np.ndarray:
    data = db.data.astype(np.float64)
    out = np.empty_like(data)
    for i in range(db.n):
        dists = sorted(
            (float(np.square(data[j] - data[i]).sum()), db.ids[j], j)
            for j in range(db.n)
            if j != i
        )
        rows = [i] + [j for _, _, j in dists[:k]]
        mean = data[rows].mean(axis=0)
        out[i] = mean / np.linalg.norm(mean)
    return out


class TestDba:
    def test_k_zero_identity(self):
        rng = np.random.default_rng(10)
        m = make_matrix(rng, 5, 8)
        out = dba(m, k=0)
        np.testing.assert_array_equal(out.data, m.data)

    def test_duplicate_rows_unchanged(self):
        row = unit_rows(np.random.default_rng(11), 1, 6)[0]
        m = DescriptorMatrix(ids=["a", "b"], data=np.stack([row, row]), normalized=True)
        out = dba(m, k=1)
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(12)
        m = make_matrix(rng, 6, 8)
        out = dba(m, k=2)
        np.testing.assert_allclose(out.data, naive_dba(m, 2).astype(np.float32), atol=1e-6)

    def test_k_too_large(self):
        rng = np.random.default_rng(13)
        m = make_matrix(rng, 4, 8)
        with pytest.raises(ValueError):
            dba(m, k=4)


def naive_alpha_qe(query, db, k, alpha) -> np.ndarray:
    qdata = query.data.astype(np.float64)
    ddata = db.data.astype(np.float64)
    out = np.empty_like(qdata)
    for i in range(query.n):
        dists = sorted(
            (float(np.square(ddata[j] - qdata[i]).sum()), db.ids[j], j)
            for j in range(db.n)
        )
        acc = qdata[i].copy()
        for _, _, j in dists[:k]:
            c = max(float(qdata[i] @ ddata[j]), 0.0)
            acc += (c ** alpha) * ddata[j]
        out[i] = acc / np.linalg.norm(acc)
    return out


class TestAlphaQe:
    def test_k_zero_identity(self):
        rng = np.random.default_rng(14)
        q, db = make_matrix(rng, 3, 8, "q"), make_matrix(rng, 5, 8, "d")
        out = alpha_qe(q, db, k=0, alpha=3.0)
        np.testing.assert_array_equal(out.data, q.data)

    def test_alpha_zero_with_equal_neighbor(self):
        rng = np.random.default_rng(15)
        q = make_matrix(rng, 1, 8, "q")
        db = DescriptorMatrix(ids=["d0"], data=q.data.copy(), normalized=True)
        out = alpha_qe(q, db, k=1, alpha=0.0)
        np.testing.assert_allclose(out.data, q.data, atol=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(16)
        q, db = make_matrix(rng, 3, 8, "q"), make_matrix(rng, 4, 8, "d")
        out = alpha_qe(q, db, k=2, alpha=3.0)
        np.testing.assert_allclose(
            out.data, naive_alpha_qe(q, db, 2, 3.0).astype(np.float32), atol=1e-6
        )

    def test_negative_similarity_clamped(self):
        q = matrix([[1.0, 0.0]], ids=["q"], normalized=True)
        db = matrix([[-1.0, 0.0]], ids=["d"], normalized=True)
        out = alpha_qe(q, db, k=1, alpha=3.0)
        # opposite vector gets weight 0, so the query is unchanged
        np.testing.assert_allclose(out.data, q.data, atol=1e-7)

    def test_k_exceeds_db(self):
        rng = np.random.default_rng(17)
        q, db = make_matrix(rng, 2, 8, "q"), make_matrix(rng, 3, 8, "d")
        with pytest.raises(ValueError):
            alpha_qe(q, db, k=4, alpha=1.0)
