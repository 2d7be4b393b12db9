"""Evaluation metrics: mAP@k for retrieval, GAP for recognition, plain mAP.

mAP@k normalizes each query's average precision by min(#relevant, k), the
competition convention. GAP pools every prediction into one list sorted by
confidence (ties broken by ascending query id for determinism) and divides
by the number of labeled queries, so a confidently-predicted distractor
drags down every correct prediction ranked below it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from landmark_pipeline.dataset.containers import Prediction, RankedList
from landmark_pipeline.errors import DuplicateIdError


@dataclass
class RelevanceTable:
    """Per query: the relevant index ids, plus ids to ignore while scoring."""

    relevant: dict[str, set[str]]
    ignore: dict[str, set[str]] = field(default_factory=dict)

    def __post_init__(self):
        for query_id, ignored in self.ignore.items():
            overlap = ignored & self.relevant.get(query_id, set())
            if overlap:
                raise ValueError(
                    f"query {query_id!r}: ids both relevant and ignored: "
                    f"{sorted(overlap)[:5]}"
                )

    def ignored_for(self, query_id: str) -> set[str]:
        return self.ignore.get(query_id, set())


@dataclass
class RecognitionTruth:
    """Per test id: the true landmark label, or None for a distractor."""

    labels: dict[str, str | None]

    @property
    def total_queries(self) -> int:
        return len(self.labels)

    @property
    def labeled_count(self) -> int:
        return sum(1 for v in self.labels.values() if v is not None)


def _dedup(ids: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for image_id in ids:
        if image_id not in seen:
            seen.add(image_id)
            out.append(image_id)
    return out


def _average_precision(ids: list[str], relevant: set[str], denom: int) -> float:
    hits = 0
    total = 0.0
    for i, image_id in enumerate(ids, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / i
    return total / denom


def map_at_k(ranked: list[RankedList], truth: RelevanceTable, k: int) -> float:
    """Mean AP@k with min(#relevant, k) normalization.

    Duplicate entries are dropped after their first occurrence; queries with
    no relevant images are excluded from the mean.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per_query = []
    for rl in ranked:
        if rl.query_id not in truth.relevant:
            raise KeyError(f"query {rl.query_id!r} missing from relevance truth")
        relevant = truth.relevant[rl.query_id]
        if not relevant:
            continue
        ids = _dedup(rl.entry_ids())[:k]
        per_query.append(_average_precision(ids, relevant, min(len(relevant), k)))
    if not per_query:
        raise ValueError("no queries with relevant images to score")
    return sum(per_query) / len(per_query)


def mean_ap(ranked: list[RankedList], truth: RelevanceTable) -> float:
    """Standard mAP with ignore-set entries removed from rankings first."""
    per_query = []
    for rl in ranked:
        if rl.query_id not in truth.relevant:
            raise KeyError(f"query {rl.query_id!r} missing from relevance truth")
        relevant = truth.relevant[rl.query_id]
        if not relevant:
            continue
        ignored = truth.ignored_for(rl.query_id)
        ids = [i for i in _dedup(rl.entry_ids()) if i not in ignored]
        per_query.append(_average_precision(ids, relevant, len(relevant)))
    if not per_query:
        raise ValueError("no queries with relevant images to score")
    return sum(per_query) / len(per_query)


def gap(preds: list[Prediction], truth: RecognitionTruth) -> float:
    """Global average precision over the pooled, confidence-sorted predictions."""
    seen: set[str] = set()
    for p in preds:
        if p.query_id in seen:
            raise DuplicateIdError("predictions", p.query_id)
        seen.add(p.query_id)
        if p.query_id not in truth.labels:
            raise KeyError(f"prediction for unknown query {p.query_id!r}")
    m = truth.labeled_count
    if m == 0:
        raise ValueError("truth contains no labeled queries")
    ordered = sorted(preds, key=lambda p: (-p.confidence, p.query_id))
    correct = 0
    total = 0.0
    for i, p in enumerate(ordered, start=1):
        true_label = truth.labels[p.query_id]
        if true_label is not None and p.label == true_label:
            correct += 1
            total += correct / i
    return total / m


def write_relevance(truth: RelevanceTable, path) -> None:
    """CSV ``id,relevant,ignore`` with space-separated id lists."""
    queries = sorted(set(truth.relevant) | set(truth.ignore))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "relevant", "ignore"])
        for query_id in queries:
            writer.writerow(
                [
                    query_id,
                    " ".join(sorted(truth.relevant.get(query_id, set()))),
                    " ".join(sorted(truth.ignore.get(query_id, set()))),
                ]
            )


def read_relevance(path) -> RelevanceTable:
    relevant: dict[str, set[str]] = {}
    ignore: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "id":
            raise ValueError(f"{path}: expected relevance header, got {header}")
        for row in reader:
            if not row:
                continue
            query_id = row[0]
            if query_id in relevant:
                raise DuplicateIdError(str(path), query_id)
            relevant[query_id] = set(row[1].split()) if len(row) > 1 and row[1] else set()
            if len(row) > 2 and row[2]:
                ignore[query_id] = set(row[2].split())
    return RelevanceTable(relevant=relevant, ignore=ignore)


def write_recognition_truth(truth: RecognitionTruth, path) -> None:
    """CSV ``id,landmark_id``; distractors get an empty landmark_id."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "landmark_id"])
        for query_id, label in truth.labels.items():
            writer.writerow([query_id, "" if label is None else label])


def read_recognition_truth(path) -> RecognitionTruth:
    labels: dict[str, str | None] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "landmark_id"]:
            raise ValueError(f"{path}: expected header 'id,landmark_id', got {header}")
        for row in reader:
            if not row:
                continue
            if row[0] in labels:
                raise DuplicateIdError(str(path), row[0])
            labels[row[0]] = row[1] if len(row) > 1 and row[1] != "" else None
    return RecognitionTruth(labels=labels)
