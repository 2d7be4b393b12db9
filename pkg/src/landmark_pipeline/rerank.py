"""Discriminative re-ranking of retrieval lists by predicted-label agreement.

Index images predicted as the query's landmark are "positive", the rest
"negative". Re-ranking stably moves all positives ahead of all negatives,
then appends every positive index image the similarity search missed,
ordered by recognition confidence. Negatives are kept after the positives
because a capped AP metric never penalizes trailing entries and they hedge
against prediction errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from landmark_pipeline.dataset.containers import Prediction, RankedList


@dataclass
class RerankInput:
    ranked: RankedList
    test_pred: Prediction
    index_preds: Mapping[str, Prediction]


class RerankBatchError(ValueError):
    """One or more queries failed to re-rank; carries (query_id, error) pairs."""

    def __init__(self, failures: list[tuple[str, Exception]]):
        self.failures = failures
        lines = ", ".join(f"{qid}: {err}" for qid, err in failures[:5])
        suffix = "..." if len(failures) > 5 else ""
        super().__init__(f"{len(failures)} queries failed to re-rank ({lines}{suffix})")


def _is_positive(
    entry_pred: Prediction, query_label: str, min_confidence: float | None
) -> bool:
    if entry_pred.label != query_label:
        return False
    return min_confidence is None or entry_pred.confidence >= min_confidence


def classify_entries(
    inp: RerankInput, min_confidence: float | None = None
) -> tuple[list[tuple[str, float]], list[tuple[str, float]]]:
    """Split ranked entries into positives and negatives, order preserved.

    An entry is positive when its index prediction carries the query's
    predicted label (and clears ``min_confidence`` when one is set).
    """
    positives: list[tuple[str, float]] = []
    negatives: list[tuple[str, float]] = []
    for image_id, score in inp.ranked.entries:
        if image_id not in inp.index_preds:
            raise KeyError(
                f"ranked entry {image_id!r} (query {inp.ranked.query_id!r}) "
                "has no index prediction"
            )
        if _is_positive(inp.index_preds[image_id], inp.test_pred.label, min_confidence):
            positives.append((image_id, score))
        else:
            negatives.append((image_id, score))
    return positives, negatives


def rerank_query(
    inp: RerankInput, cap: int, min_confidence: float | None = None
) -> RankedList:
    """Re-rank one query: positives, then missed positives, then negatives.

    Missed positives are index images predicted as the query's label but
    absent from the input list; they are ordered by recognition confidence
    descending (ties by ascending id) and scored with that confidence.
    The result is truncated to ``cap``.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    positives, negatives = classify_entries(inp, min_confidence)
    present = set(inp.ranked.entry_ids())
    missed = [
        (image_id, pred.confidence)
        for image_id, pred in inp.index_preds.items()
        if image_id not in present
        and _is_positive(pred, inp.test_pred.label, min_confidence)
    ]
    missed.sort(key=lambda item: (-item[1], item[0]))
    entries = (positives + missed + negatives)[:cap]
    return RankedList(query_id=inp.ranked.query_id, entries=entries, reranked=True)


def rerank_batch(
    ranked: list[RankedList],
    test_preds: Mapping[str, Prediction],
    index_preds: Mapping[str, Prediction],
    cap: int,
    min_confidence: float | None = None,
) -> list[RankedList]:
    """Re-rank every query, preserving batch order; failures are aggregated."""
    out: list[RankedList] = []
    failures: list[tuple[str, Exception]] = []
    for rl in ranked:
        try:
            if rl.query_id not in test_preds:
                raise KeyError(f"query {rl.query_id!r} has no test prediction")
            inp = RerankInput(
                ranked=rl,
                test_pred=test_preds[rl.query_id],
                index_preds=index_preds,
            )
            out.append(rerank_query(inp, cap, min_confidence))
        except (KeyError, ValueError) as err:
            failures.append((rl.query_id, err))
    if failures:
        raise RerankBatchError(failures)
    return out
