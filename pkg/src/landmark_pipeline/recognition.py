"""Soft-voting recognition with spatial verification, plus distractor suppression.

Per query, the nearest train neighbors are grouped by label and each label
scores

    s_l = sum over its neighbors of (1 - ||x_i - q||^2) + min(t, R_i) / t

where R_i is the RANSAC inlier count between the query (match source) and
the neighbor. The spatial term sits inside the sum; a documented alternative
reading puts it outside, applied once per label with that label's best
inlier count (``spatial_outside_sum``). The predicted label is the argmax,
ties broken by ascending label token, and its score is the confidence.
"""

from __future__ import annotations

import csv
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from landmark_pipeline.dataset.containers import (
    DescriptorMatrix,
    LabelTable,
    LocalFeatureSet,
    Prediction,
    argmax_label,
)
from landmark_pipeline.geometry import RansacConfig, pairwise_inliers
from landmark_pipeline.knn import NeighborList, knn_search

DEFAULT_KNN = 3
DEFAULT_T = 70.0
DEFAULT_DISTRACTOR_THRESHOLD = 30

# (query_id, train_id) -> inlier count. Either a precomputed mapping or a
# callable; passing one lets callers cache or stub spatial verification.
InlierSource = Callable[[str, str], int] | Mapping[tuple[str, str], int]


@dataclass
class RecognitionConfig:
    knn: int = DEFAULT_KNN
    t: float = DEFAULT_T
    use_spatial: bool = True
    spatial_outside_sum: bool = False
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.knn < 1:
            raise ValueError("knn must be >= 1")
        if self.t <= 0:
            raise ValueError("t must be > 0")


@dataclass
class DistractorConfig:
    frequency_threshold: int = DEFAULT_DISTRACTOR_THRESHOLD

    def __post_init__(self):
        if self.frequency_threshold < 1:
            raise ValueError("frequency_threshold must be >= 1")


@dataclass
class LabelNeighborhood:
    """Query neighbors grouped by label: (train id, squared distance, inliers)."""

    query_id: str
    groups: dict[str, list[tuple[str, float, int]]]

    def total_neighbors(self) -> int:
        return sum(len(v) for v in self.groups.values())


def _inlier_lookup(source: InlierSource | None) -> Callable[[str, str], int]:
    if source is None:
        raise ValueError(
            "spatial verification needs local features or an inlier source"
        )
    if callable(source):
        return source
    return lambda q, t: source[(q, t)]


def group_neighbors(
    query_id: str,
    neighbors: NeighborList,
    labels: LabelTable,
    inliers: Callable[[str, str], int] | None,
) -> LabelNeighborhood:
    """Partition a query's neighbor list into per-label contribution groups."""
    groups: dict[str, list[tuple[str, float, int]]] = {}
    for train_id, d2 in neighbors.neighbors:
        label = labels[train_id]
        count = inliers(query_id, train_id) if inliers is not None else 0
        groups.setdefault(label, []).append((train_id, d2, count))
    return LabelNeighborhood(query_id=query_id, groups=groups)


def score_labels(neighborhood: LabelNeighborhood, cfg: RecognitionConfig) -> dict[str, float]:
    """Evaluate the soft-voting score for every label in the neighborhood."""
    scores: dict[str, float] = {}
    for label, members in neighborhood.groups.items():
        similarity = sum(1.0 - d2 for _, d2, _ in members)
        if not cfg.use_spatial:
            scores[label] = similarity
        elif cfg.spatial_outside_sum:
            best = max(inlier for _, _, inlier in members)
            scores[label] = similarity + min(cfg.t, best) / cfg.t
        else:
            spatial = sum(min(cfg.t, inlier) / cfg.t for _, _, inlier in members)
            scores[label] = similarity + spatial
    return scores


def recognize_batch(
    queries: DescriptorMatrix,
    train: DescriptorMatrix,
    labels: LabelTable,
    cfg: RecognitionConfig,
    features: LocalFeatureSet | None = None,
    inlier_counts: InlierSource | None = None,
    threads: int = 1,
) -> list[Prediction]:
    """Predict a label and confidence for every query, in input order.

    Results do not depend on ``threads``: queries are independent and each
    verification pair derives its own seed.
    """
    if train.n == 0:
        raise ValueError("cannot recognize against an empty train set")
    for train_id in train.ids:
        if train_id not in labels:
            raise ValueError(f"train id {train_id!r} has no label")

    neighbor_lists = knn_search(queries, train, k=cfg.knn, exclude_self=False)

    inliers: Callable[[str, str], int] | None = None
    if cfg.use_spatial:
        if inlier_counts is not None:
            inliers = _inlier_lookup(inlier_counts)
        elif features is not None:
            cache: dict[tuple[str, str], int] = {}

            def inliers(query_id: str, train_id: str) -> int:
                key = (query_id, train_id)
                if key not in cache:
                    cache[key] = pairwise_inliers(query_id, train_id, features, cfg.ransac)
                return cache[key]

        else:
            raise ValueError(
                "use_spatial requires local features or precomputed inlier counts"
            )

    def predict(qi: int) -> Prediction:
        query_id = queries.ids[qi]
        neighborhood = group_neighbors(query_id, neighbor_lists[qi], labels, inliers)
        scores = score_labels(neighborhood, cfg)
        label = argmax_label(scores)
        return Prediction(
            query_id=query_id,
            label=label,
            confidence=scores[label],
            label_scores=scores,
        )

    indices = range(queries.n)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(predict, indices))
    return [predict(qi) for qi in indices]


def soft_vote(
    query_id: str,
    query_vec: np.ndarray,
    train: DescriptorMatrix,
    labels: LabelTable,
    cfg: RecognitionConfig,
    features: LocalFeatureSet | None = None,
    inlier_counts: InlierSource | None = None,
) -> Prediction:
    """Predict one query's label by spatially-verified soft voting."""
    queries = DescriptorMatrix(
        ids=[query_id],
        data=np.asarray(query_vec, dtype=np.float32).reshape(1, -1),
        normalized=train.normalized,
    )
    return recognize_batch(
        queries, train, labels, cfg, features=features, inlier_counts=inlier_counts
    )[0]


def suppress_distractors(
    preds: list[Prediction], cfg: DistractorConfig
) -> list[Prediction]:
    """Penalize labels predicted more than ``frequency_threshold`` times.

    Every prediction of such a label gets its confidence replaced by the
    negated frequency; the original confidence moves to ``raw_confidence``.
    Labels and label scores are never altered.
    """
    freq = Counter(p.label for p in preds)
    out = []
    for p in preds:
        f = freq[p.label]
        if f > cfg.frequency_threshold:
            out.append(
                Prediction(
                    query_id=p.query_id,
                    label=p.label,
                    confidence=float(-f),
                    label_scores=dict(p.label_scores),
                    raw_confidence=p.confidence,
                )
            )
        else:
            out.append(p)
    return out


def write_predictions(preds: list[Prediction], path) -> None:
    """Write the submission format: ``id,landmarks`` with "<label> <confidence>"."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "landmarks"])
        for p in preds:
            writer.writerow([p.query_id, f"{p.label} {p.confidence!r}"])


def read_predictions(path) -> list[Prediction]:
    """Read the ``id,landmarks`` format back into predictions."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "landmarks"]:
            raise ValueError(f"{path}: expected header 'id,landmarks', got {header}")
        for row in reader:
            if not row:
                continue
            label, confidence = row[1].rsplit(" ", 1)
            out.append(
                Prediction(
                    query_id=row[0],
                    label=label,
                    confidence=float(confidence),
                    label_scores={label: float(confidence)},
                )
            )
    return out
