"""Automated train-set cleaning.

Three steps per train image: pull its k nearest train neighbors, spatially
verify it against the first ``verify_cap`` neighbors that share its label,
and keep it only when strictly more than ``t_frequency`` of those verify.
The strict inequality matters: the default t_frequency=2 keeps an image
only when at least 3 same-label neighbors pass verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from landmark_pipeline.dataset.containers import DescriptorMatrix, LabelTable, LocalFeatureSet
from landmark_pipeline.geometry import RansacConfig, verify_pair
from landmark_pipeline.knn import knn_search

DEFAULT_K = 1000
DEFAULT_VERIFY_CAP = 100
DEFAULT_T_FREQUENCY = 2


@dataclass
class CleaningConfig:
    k: int = DEFAULT_K
    verify_cap: int = DEFAULT_VERIFY_CAP
    t_frequency: int = DEFAULT_T_FREQUENCY
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.verify_cap < 1:
            raise ValueError("verify_cap must be >= 1")
        if self.t_frequency < 0:
            raise ValueError("t_frequency must be >= 0")


@dataclass
class ImageCleaningRecord:
    """Counts behind one keep/drop decision."""

    image_id: str
    same_label_neighbors: int
    verified: int
    kept: bool


@dataclass
class CleaningReport:
    kept: set[str]
    records: dict[str, ImageCleaningRecord]


def clean_train_set(
    train: DescriptorMatrix,
    labels: LabelTable,
    features: LocalFeatureSet,
    cfg: CleaningConfig,
) -> CleaningReport:
    """Run the three-step cleaning pipeline over the train set only.

    Verification is directional (the candidate image is the match source)
    and each directed pair is computed once and cached. Results depend only
    on the inputs and the RANSAC base seed.
    """
    if not train.normalized:
        raise ValueError("train descriptors must be normalized before cleaning")
    for image_id in train.ids:
        if image_id not in labels:
            raise ValueError(f"train id {image_id!r} has no label")
        if image_id not in features:
            raise ValueError(f"train id {image_id!r} has no local features")

    neighbor_lists = knn_search(train, train, k=cfg.k, exclude_self=True)
    cache: dict[tuple[str, str], bool] = {}

    def verified(src: str, dst: str) -> bool:
        key = (src, dst)
        if key not in cache:
            cache[key] = verify_pair(src, dst, features, cfg.ransac).verified
        return cache[key]

    kept: set[str] = set()
    records: dict[str, ImageCleaningRecord] = {}
    for image_id, nl in zip(train.ids, neighbor_lists):
        label = labels[image_id]
        same_label = [nid for nid in nl.ids() if labels[nid] == label]
        count = sum(1 for nid in same_label[: cfg.verify_cap] if verified(image_id, nid))
        keep = count > cfg.t_frequency
        if keep:
            kept.add(image_id)
        records[image_id] = ImageCleaningRecord(
            image_id=image_id,
            same_label_neighbors=len(same_label),
            verified=count,
            kept=keep,
        )
    return CleaningReport(kept=kept, records=records)


def apply_cleaning(
    report: CleaningReport, train: DescriptorMatrix, labels: LabelTable
) -> tuple[DescriptorMatrix, LabelTable]:
    """Restrict the train matrix and label table to the kept ids."""
    unknown = report.kept - set(train.ids)
    if unknown:
        raise ValueError(f"kept ids not in train set: {sorted(unknown)[:5]}")
    return train.select(report.kept), labels.select(report.kept)
