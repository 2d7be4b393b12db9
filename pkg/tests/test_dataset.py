"""File format round-trips, validation errors, and the synthetic generator."""

import hashlib
import struct

import numpy as np
import pytest

from landmark_pipeline.dataset import (
    DescriptorMatrix,
    ImageFeatures,
    LabelTable,
    LocalFeatureSet,
    SyntheticConfig,
    generate_synthetic,
    load_descriptors,
    load_labels,
    load_local_features,
    save_descriptors,
    save_labels,
    save_local_features,
    sidecar_path,
)
from landmark_pipeline.errors import (
    DatasetError,
    DuplicateIdError,
    IdCountMismatchError,
    MagicMismatchError,
    PayloadError,
    TruncatedFileError,
)


def write_descriptor_file_independently(path, ids, rows):
    """Byte-level writer sharing no code with the package loader/saver."""
    payload = b"GLDV"
    payload += struct.pack("<I", 1)
    payload += struct.pack("<Q", len(rows))
    payload += struct.pack("<I", len(rows[0]) if rows else 0)
    for row in rows:
        for value in row:
            payload += struct.pack("<f", value)
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(str(path) + ".ids", "wb") as fh:
        fh.write(("".join(i + "\n" for i in ids)).encode("utf-8"))


def sha256_file(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


class TestDescriptorRoundTrip:
    def test_small_matrix(self, tmp_path):
        m = DescriptorMatrix(ids=["a", "b"], data=np.array([[1, 0, 0], [0, 1, 0]], np.float32))
        save_descriptors(m, tmp_path / "d.gldv")
        loaded = load_descriptors(tmp_path / "d.gldv")
        assert loaded.ids == ["a", "b"]
        assert loaded.dim == 3
        assert not loaded.normalized
        np.testing.assert_array_equal(loaded.data, m.data)

    def test_empty_matrix(self, tmp_path):
        m = DescriptorMatrix(ids=[], data=np.empty((0, 512), np.float32))
        save_descriptors(m, tmp_path / "e.gldv")
        loaded = load_descriptors(tmp_path / "e.gldv")
        assert loaded.n == 0 and loaded.dim == 512

    def test_one_by_one(self, tmp_path):
        m = DescriptorMatrix(ids=["x"], data=np.array([[0.5]], np.float32))
        save_descriptors(m, tmp_path / "s.gldv")
        assert load_descriptors(tmp_path / "s.gldv").data[0, 0] == np.float32(0.5)

    def test_random_bytes_match_independent_writer(self, tmp_path):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((100, 64)).astype(np.float32)
        ids = [f"id{i}" for i in range(100)]
        save_descriptors(DescriptorMatrix(ids=ids, data=data), tmp_path / "a.gldv")
        write_descriptor_file_independently(tmp_path / "b.gldv", ids, data.tolist())
        assert sha256_file(tmp_path / "a.gldv") == sha256_file(tmp_path / "b.gldv")
        assert sha256_file(sidecar_path(tmp_path / "a.gldv")) == sha256_file(
            sidecar_path(tmp_path / "b.gldv")
        )

    def test_large_checksum_stable_across_save_load_save(self, tmp_path):
        rng = np.random.default_rng(9)
        m = DescriptorMatrix(
            ids=[f"{i:016x}" for i in range(1000)],
            data=rng.standard_normal((1000, 512)).astype(np.float32),
        )
        save_descriptors(m, tmp_path / "big.gldv")
        first = sha256_file(tmp_path / "big.gldv")
        save_descriptors(load_descriptors(tmp_path / "big.gldv"), tmp_path / "big2.gldv")
        assert sha256_file(tmp_path / "big2.gldv") == first


class TestDescriptorErrors:
    def test_magic_mismatch(self, tmp_path):
        (tmp_path / "bad.gldv").write_bytes(b"NOPE" + b"\x00" * 16)
        (tmp_path / "bad.gldv.ids").write_text("")
        with pytest.raises(MagicMismatchError) as exc:
            load_descriptors(tmp_path / "bad.gldv")
        assert exc.value.got == b"NOPE"

    def test_truncated_payload_names_offset(self, tmp_path):
        # header says 2x3 but only one row of floats follows
        buf = b"GLDV" + struct.pack("<IQI", 1, 2, 3) + struct.pack("<3f", 1, 2, 3)
        (tmp_path / "t.gldv").write_bytes(buf)
        (tmp_path / "t.gldv.ids").write_text("a\nb\n")
        with pytest.raises(TruncatedFileError) as exc:
            load_descriptors(tmp_path / "t.gldv")
        assert exc.value.offset == 20
        assert exc.value.needed == 24
        assert exc.value.available == 12

    def test_id_count_mismatch(self, tmp_path):
        m = DescriptorMatrix(ids=["a", "b"], data=np.eye(2, dtype=np.float32))
        save_descriptors(m, tmp_path / "m.gldv")
        sidecar_path(tmp_path / "m.gldv").write_text("a\n")
        with pytest.raises(IdCountMismatchError) as exc:
            load_descriptors(tmp_path / "m.gldv")
        assert (exc.value.header_count, exc.value.id_count) == (2, 1)

    def test_nan_payload_names_byte_offset(self, tmp_path):
        buf = b"GLDV" + struct.pack("<IQI", 1, 1, 3)
        buf += struct.pack("<3f", 1.0, float("nan"), 3.0)
        (tmp_path / "n.gldv").write_bytes(buf)
        (tmp_path / "n.gldv.ids").write_text("a\n")
        with pytest.raises(PayloadError) as exc:
            load_descriptors(tmp_path / "n.gldv")
        assert exc.value.offset == 20 + 4

    def test_duplicate_sidecar_id(self, tmp_path):
        m = DescriptorMatrix(ids=["a", "b"], data=np.eye(2, dtype=np.float32))
        save_descriptors(m, tmp_path / "d.gldv")
        sidecar_path(tmp_path / "d.gldv").write_text("a\na\n")
        with pytest.raises(DuplicateIdError):
            load_descriptors(tmp_path / "d.gldv")

    def test_trailing_garbage_rejected(self, tmp_path):
        m = DescriptorMatrix(ids=["a"], data=np.ones((1, 2), np.float32))
        save_descriptors(m, tmp_path / "g.gldv")
        with open(tmp_path / "g.gldv", "ab") as fh:
            fh.write(b"junk")
        with pytest.raises(DatasetError):
            load_descriptors(tmp_path / "g.gldv")


class TestLabels:
    def test_load(self, tmp_path):
        (tmp_path / "l.csv").write_text("id,landmark_id\na,1\nb,2\n")
        table = load_labels(tmp_path / "l.csv")
        assert table.mapping == {"a": "1", "b": "2"}

    def test_duplicate_id(self, tmp_path):
        (tmp_path / "l.csv").write_text("id,landmark_id\na,1\na,2\n")
        with pytest.raises(DuplicateIdError):
            load_labels(tmp_path / "l.csv")

    def test_missing_header(self, tmp_path):
        (tmp_path / "l.csv").write_text("a,1\nb,2\n")
        with pytest.raises(DatasetError):
            load_labels(tmp_path / "l.csv")

    def test_empty_id(self, tmp_path):
        (tmp_path / "l.csv").write_text("id,landmark_id\n,1\n")
        with pytest.raises(DatasetError):
            load_labels(tmp_path / "l.csv")

    def test_histogram(self, tmp_path):
        (tmp_path / "l.csv").write_text("id,landmark_id\na,1\nb,1\nc,2\n")
        assert load_labels(tmp_path / "l.csv").histogram() == {"1": 2, "2": 1}

    def test_round_trip(self, tmp_path):
        table = LabelTable({"a": "7", "b": "9"})
        save_labels(table, tmp_path / "out.csv")
        assert load_labels(tmp_path / "out.csv").mapping == table.mapping


class TestLocalFeatures:
    def make_set(self, rng, ids, m=3, d=40):
        images = {}
        for image_id in ids:
            images[image_id] = ImageFeatures(
                keypoints=rng.uniform(0, 50, size=(m, 4)).astype(np.float32),
                descriptors=rng.standard_normal((m, d)).astype(np.float32),
            )
        return LocalFeatureSet(images)

    def test_single_image(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = self.make_set(rng, ["only"], m=3, d=40)
        save_local_features(feats, tmp_path / "f.lfea")
        loaded = load_local_features(tmp_path / "f.lfea")
        assert loaded["only"].count == 3
        assert loaded.d_local == 40

    def test_count_mismatch_in_container(self):
        with pytest.raises(DatasetError):
            ImageFeatures(
                keypoints=np.zeros((3, 4), np.float32),
                descriptors=np.zeros((2, 8), np.float32),
            )

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        feats = self.make_set(rng, [f"im{i}" for i in range(7)], m=11, d=13)
        save_local_features(feats, tmp_path / "a.lfea")
        save_local_features(load_local_features(tmp_path / "a.lfea"), tmp_path / "b.lfea")
        assert sha256_file(tmp_path / "a.lfea") == sha256_file(tmp_path / "b.lfea")

    def test_empty_set_round_trip(self, tmp_path):
        save_local_features(LocalFeatureSet({}), tmp_path / "e.lfea")
        assert len(load_local_features(tmp_path / "e.lfea")) == 0

    def test_magic_mismatch(self, tmp_path):
        (tmp_path / "bad.lfea").write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(MagicMismatchError):
            load_local_features(tmp_path / "bad.lfea")

    def test_truncated_descriptor_block(self, tmp_path):
        rng = np.random.default_rng(1)
        feats = self.make_set(rng, ["one"], m=4, d=8)
        save_local_features(feats, tmp_path / "t.lfea")
        raw = (tmp_path / "t.lfea").read_bytes()
        (tmp_path / "t.lfea").write_bytes(raw[:-10])
        with pytest.raises(TruncatedFileError):
            load_local_features(tmp_path / "t.lfea")

    def test_inconsistent_d_local_across_images(self, tmp_path):
        rng = np.random.default_rng(2)
        a = self.make_set(rng, ["a"], m=2, d=8)
        b = self.make_set(rng, ["b"], m=2, d=9)
        save_local_features(a, tmp_path / "a.lfea")
        save_local_features(b, tmp_path / "b.lfea")
        raw_a = (tmp_path / "a.lfea").read_bytes()
        raw_b = (tmp_path / "b.lfea").read_bytes()
        merged = b"LFEA" + struct.pack("<IQ", 1, 2) + raw_a[16:] + raw_b[16:]
        (tmp_path / "m.lfea").write_bytes(merged)
        with pytest.raises(DatasetError, match="d_local"):
            load_local_features(tmp_path / "m.lfea")

    def test_mixed_width_containers_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(DatasetError):
            LocalFeatureSet(
                {
                    "a": ImageFeatures(
                        keypoints=np.zeros((2, 4), np.float32),
                        descriptors=rng.standard_normal((2, 8)).astype(np.float32),
                    ),
                    "b": ImageFeatures(
                        keypoints=np.zeros((2, 4), np.float32),
                        descriptors=rng.standard_normal((2, 9)).astype(np.float32),
                    ),
                }
            )


class TestSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        cfg = SyntheticConfig(n_labels=2, train_per_label=3, index_per_label=2,
                              test_per_label=1, dim=8, seed=7)
        for tag in ("x", "y"):
            data = generate_synthetic(cfg)
            save_descriptors(data.train, tmp_path / f"{tag}.gldv")
            save_local_features(data.features, tmp_path / f"{tag}.lfea")
        assert sha256_file(tmp_path / "x.gldv") == sha256_file(tmp_path / "y.gldv")
        assert sha256_file(tmp_path / "x.lfea") == sha256_file(tmp_path / "y.lfea")

    def test_no_distractors_means_everyone_has_relevant(self, small_synthetic):
        assert all(len(rel) >= 1 for rel in small_synthetic.relevance.values())

    def test_zero_spread_collapses_clusters(self):
        data = generate_synthetic(
            SyntheticConfig(n_labels=3, train_per_label=3, index_per_label=1,
                            test_per_label=1, dim=8, spread=0.0, seed=2)
        )
        by_label = {}
        for image_id, label in data.labels.mapping.items():
            by_label.setdefault(label, []).append(data.train.row(image_id))
        for rows in by_label.values():
            for row in rows[1:]:
                np.testing.assert_array_equal(row, rows[0])
        centers = [rows[0] for rows in by_label.values()]
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                assert np.linalg.norm(centers[i] - centers[j]) > 0.1

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(n_labels=0))
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(spread=-0.1))
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticConfig(distractor_fraction=1.0))

    def test_distractors_have_no_label_and_no_relevance(self):
        data = generate_synthetic(
            SyntheticConfig(n_labels=2, train_per_label=3, index_per_label=2,
                            test_per_label=2, distractor_fraction=0.5, seed=3)
        )
        distractors = [q for q, label in data.test_labels.items() if label is None]
        assert len(distractors) == 4  # equal to landmark test count at 0.5
        for q in distractors:
            assert data.relevance[q] == set()
            assert q in data.features

    def test_geometric_outliers_are_labeled_train_images(self):
        data = generate_synthetic(
            SyntheticConfig(n_labels=2, train_per_label=4, index_per_label=1,
                            test_per_label=1, train_outliers_per_label=2, seed=4)
        )
        assert len(data.train_outlier_ids) == 4
        for image_id in data.train_outlier_ids:
            assert image_id in data.labels
            assert image_id in data.train.ids

    def test_descriptors_are_normalized(self, small_synthetic):
        for m in (small_synthetic.train, small_synthetic.index, small_synthetic.test):
            norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-6)
