"""In-memory containers for descriptors, local features, labels, and results.

Containers validate their invariants on construction and are treated as
immutable afterward; no operation in the package mutates one in place.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from landmark_pipeline.errors import DatasetError, DuplicateIdError

# Rows flagged as normalized must have unit L2 norm within this bound.
# Exact-zero rows are tolerated: normalization preserves them and reports
# them instead of failing.
NORM_TOLERANCE = 1e-6


@dataclass
class DescriptorMatrix:
    """N global descriptors with aligned image ids, stored row-major float32."""

    ids: list[str]
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DatasetError(f"descriptor data must be 2-D, got {self.data.ndim}-D")
        if self.data.shape[1] < 1:
            raise DatasetError("descriptor dim must be positive")
        if len(self.ids) != self.data.shape[0]:
            raise DatasetError(
                f"{len(self.ids)} ids for {self.data.shape[0]} descriptor rows"
            )
        seen = set()
        for image_id in self.ids:
            if image_id in seen:
                raise DuplicateIdError("descriptor matrix", image_id)
            seen.add(image_id)
        if not np.isfinite(self.data).all():
            raise DatasetError("descriptor data contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > NORM_TOLERANCE
            bad &= norms != 0.0
            if bad.any():
                offender = int(np.argmax(bad))
                raise DatasetError(
                    f"row {offender} ({self.ids[offender]!r}) flagged normalized "
                    f"but has norm {norms[offender]:.9f}"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, image_id: str) -> np.ndarray:
        return self.data[self.ids.index(image_id)]

    def select(self, keep_ids) -> "DescriptorMatrix":
        """Restrict to the given ids, preserving current row order."""
        keep = set(keep_ids)
        rows = [i for i, image_id in enumerate(self.ids) if image_id in keep]
        return DescriptorMatrix(
            ids=[self.ids[i] for i in rows],
            data=self.data[rows] if rows else np.empty((0, self.dim), np.float32),
            normalized=self.normalized,
        )


@dataclass
class ImageFeatures:
    """Keypoints and local descriptors of one image.

    Keypoints are an (M, 4) array of (x, y, scale, attention); descriptors
    are (M, d_local). Attention defaults to 1.0 when a caller supplies
    (M, 3) keypoints.
    """

    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        kp = np.ascontiguousarray(self.keypoints, dtype=np.float32)
        if kp.ndim != 2 or kp.shape[1] not in (3, 4):
            raise DatasetError("keypoints must be (M, 3) or (M, 4)")
        if kp.shape[1] == 3:
            kp = np.hstack([kp, np.ones((kp.shape[0], 1), np.float32)])
        self.keypoints = kp
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2:
            raise DatasetError("local descriptors must be 2-D")
        if self.keypoints.shape[0] != self.descriptors.shape[0]:
            raise DatasetError(
                f"{self.keypoints.shape[0]} keypoints but "
                f"{self.descriptors.shape[0]} local descriptor rows"
            )
        if not np.isfinite(self.keypoints).all():
            raise DatasetError("keypoints contain non-finite values")
        if not np.isfinite(self.descriptors).all():
            raise DatasetError("local descriptors contain non-finite values")

    @property
    def count(self) -> int:
        return self.keypoints.shape[0]

    @property
    def d_local(self) -> int:
        return self.descriptors.shape[1]

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]


class LocalFeatureSet:
    """Per-image local features with a consistent descriptor width."""

    def __init__(self, images: dict[str, ImageFeatures]):
        self.images = dict(images)
        widths = {feats.d_local for feats in self.images.values() if feats.count > 0}
        if len(widths) > 1:
            raise DatasetError(
                f"inconsistent local descriptor widths across images: {sorted(widths)}"
            )
        self._d_local = widths.pop() if widths else 0

    @property
    def d_local(self) -> int:
        return self._d_local

    def __len__(self) -> int:
        return len(self.images)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.images

    def __getitem__(self, image_id: str) -> ImageFeatures:
        try:
            return self.images[image_id]
        except KeyError:
            raise KeyError(f"no local features for id {image_id!r}") from None

    def ids(self) -> list[str]:
        return list(self.images)


class LabelTable:
    """Mapping image id -> landmark label token."""

    def __init__(self, mapping: dict[str, str]):
        self.mapping = {str(k): str(v) for k, v in mapping.items()}

    def __len__(self) -> int:
        return len(self.mapping)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.mapping

    def __getitem__(self, image_id: str) -> str:
        try:
            return self.mapping[image_id]
        except KeyError:
            raise KeyError(f"no label for id {image_id!r}") from None

    def get(self, image_id: str, default=None):
        return self.mapping.get(image_id, default)

    def histogram(self) -> Counter:
        """Label -> number of images carrying it."""
        return Counter(self.mapping.values())

    def select(self, keep_ids) -> "LabelTable":
        keep = set(keep_ids)
        return LabelTable({k: v for k, v in self.mapping.items() if k in keep})


@dataclass
class RankedList:
    """Ordered retrieval result for one query.

    Scores must be non-increasing unless the list was re-ranked, in which
    case the order is authoritative and scores are advisory.
    """

    query_id: str
    entries: list[tuple[str, float]]
    reranked: bool = False

    def __post_init__(self):
        seen = set()
        for image_id, _ in self.entries:
            if image_id in seen:
                raise DuplicateIdError(f"ranked list for {self.query_id!r}", image_id)
            seen.add(image_id)
        if not self.reranked:
            scores = [s for _, s in self.entries]
            if any(b > a for a, b in zip(scores, scores[1:])):
                raise DatasetError(
                    f"ranked list for {self.query_id!r} has increasing scores "
                    "but is not marked re-ranked"
                )

    def entry_ids(self) -> list[str]:
        return [image_id for image_id, _ in self.entries]


@dataclass
class Prediction:
    """Predicted landmark and confidence for one query.

    ``raw_confidence`` keeps the pre-suppression confidence when distractor
    post-processing overwrites ``confidence``; it is None otherwise.
    """

    query_id: str
    label: str
    confidence: float
    label_scores: dict[str, float] = field(default_factory=dict)
    raw_confidence: float | None = None

    def __post_init__(self):
        if self.label_scores:
            best = argmax_label(self.label_scores)
            if best != self.label:
                raise DatasetError(
                    f"prediction for {self.query_id!r}: label {self.label!r} is "
                    f"not the argmax of label_scores (expected {best!r})"
                )
            if self.raw_confidence is None and self.confidence != self.label_scores[self.label]:
                raise DatasetError(
                    f"prediction for {self.query_id!r}: confidence "
                    f"{self.confidence} != score of {self.label!r}"
                )


def argmax_label(scores: dict[str, float]) -> str:
    """Highest-scoring label; ties break by ascending label token."""
    if not scores:
        raise ValueError("empty score map")
    return min(scores, key=lambda label: (-scores[label], label))
