"""On-disk formats: descriptor files, local feature files, label CSVs.

Descriptor file layout (all integers little-endian):
    magic "GLDV" | version u32 = 1 | count u64 | dim u32 | count*dim f32
with a sidecar text file ``<path>.ids`` holding one image id per line in
row order. Ids live in the sidecar so the payload keeps a fixed stride
and stays memory-mappable.

Local feature file layout:
    magic "LFEA" | version u32 = 1 | image count u64
    per image: id length u16 | UTF-8 id | keypoint count u32 | d_local u32
               | M * (x f32, y f32, scale f32, attention f32)
               | M * d_local f32

Labels: CSV ``id,landmark_id`` with header, UTF-8, LF line endings.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from landmark_pipeline.dataset.containers import (
    DescriptorMatrix,
    ImageFeatures,
    LabelTable,
    LocalFeatureSet,
)
from landmark_pipeline.errors import (
    DatasetError,
    DuplicateIdError,
    IdCountMismatchError,
    MagicMismatchError,
    PayloadError,
    TruncatedFileError,
)

DESCRIPTOR_MAGIC = b"GLDV"
FEATURE_MAGIC = b"LFEA"
FORMAT_VERSION = 1


class _Reader:
    """Sequential binary reader that reports the offset of any shortfall."""

    def __init__(self, path: Path):
        self.path = path
        self.buf = path.read_bytes()
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                str(self.path), self.pos, n, len(self.buf) - self.pos
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32_array(self, count: int, path_offset_base: int | None = None) -> np.ndarray:
        start = self.pos
        raw = self.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        bad = ~np.isfinite(arr)
        if bad.any():
            first = int(np.argmax(bad))
            raise PayloadError(str(self.path), start + 4 * first)
        return arr

    def expect_done(self):
        if self.pos != len(self.buf):
            raise DatasetError(
                f"{self.path}: {len(self.buf) - self.pos} trailing bytes "
                f"after byte {self.pos}"
            )


def _check_magic(reader: _Reader, magic: bytes):
    got = reader.take(4)
    if got != magic:
        raise MagicMismatchError(str(reader.path), magic, got)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"{reader.path}: unsupported format version {version}"
        )


def sidecar_path(path) -> Path:
    return Path(str(path) + ".ids")


def load_descriptors(path) -> DescriptorMatrix:
    """Load a descriptor file and its id sidecar. The normalized flag is unset."""
    path = Path(path)
    reader = _Reader(path)
    _check_magic(reader, DESCRIPTOR_MAGIC)
    count = reader.u64()
    dim = reader.u32()
    if dim < 1:
        raise DatasetError(f"{path}: dim must be positive, got {dim}")
    data = reader.f32_array(count * dim).reshape(count, dim)
    reader.expect_done()

    ids_file = sidecar_path(path)
    if not ids_file.exists():
        raise DatasetError(f"{path}: missing id sidecar {ids_file}")
    text = ids_file.read_text(encoding="utf-8")
    ids = text.split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != count:
        raise IdCountMismatchError(str(path), count, len(ids))
    return DescriptorMatrix(ids=ids, data=data, normalized=False)


def save_descriptors(matrix: DescriptorMatrix, path) -> None:
    """Write a descriptor file plus its id sidecar; round-trips bit-exactly."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<IQI", FORMAT_VERSION, matrix.n, matrix.dim))
        fh.write(np.ascontiguousarray(matrix.data, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for image_id in matrix.ids:
            fh.write(image_id + "\n")


def load_local_features(path) -> LocalFeatureSet:
    """Load a local feature file; validates per-image consistency."""
    path = Path(path)
    reader = _Reader(path)
    _check_magic(reader, FEATURE_MAGIC)
    image_count = reader.u64()
    images: dict[str, ImageFeatures] = {}
    d_local_seen: int | None = None
    for _ in range(image_count):
        id_len = reader.u16()
        image_id = reader.take(id_len).decode("utf-8")
        if image_id in images:
            raise DuplicateIdError(str(path), image_id)
        count = reader.u32()
        d_local = reader.u32()
        if d_local_seen is None:
            d_local_seen = d_local
        elif count > 0 and d_local != d_local_seen:
            raise DatasetError(
                f"{path}: image {image_id!r} has d_local {d_local}, "
                f"expected {d_local_seen}"
            )
        keypoints = reader.f32_array(count * 4).reshape(count, 4)
        descriptors = reader.f32_array(count * d_local).reshape(count, d_local)
        images[image_id] = ImageFeatures(keypoints=keypoints, descriptors=descriptors)
    reader.expect_done()
    return LocalFeatureSet(images)


def save_local_features(features: LocalFeatureSet, path) -> None:
    """Write a local feature file; image order follows insertion order."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(features)))
        for image_id in features.ids():
            feats = features[image_id]
            encoded = image_id.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise DatasetError(f"id too long to serialize: {image_id!r}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", feats.count, feats.d_local))
            fh.write(np.ascontiguousarray(feats.keypoints, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(feats.descriptors, dtype="<f4").tobytes())


def load_labels(path) -> LabelTable:
    """Load an ``id,landmark_id`` CSV into a label table."""
    path = Path(path)
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "landmark_id"]:
            raise DatasetError(f"{path}: expected header 'id,landmark_id', got {header}")
        for row in reader:
            if not row:
                continue
            if len(row) < 2:
                raise DatasetError(f"{path}: malformed row {row}")
            image_id, label = row[0], row[1]
            if image_id == "":
                raise DatasetError(f"{path}: empty image id")
            if image_id in mapping:
                raise DuplicateIdError(str(path), image_id)
            mapping[image_id] = label
    return LabelTable(mapping)


def save_labels(table: LabelTable, path) -> None:
    """Write a label table as an ``id,landmark_id`` CSV with LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "landmark_id"])
        for image_id, label in table.mapping.items():
            writer.writerow([image_id, label])
