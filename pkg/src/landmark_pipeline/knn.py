"""Exact brute-force k-nearest-neighbor search over descriptor matrices.

Distances are squared euclidean, accumulated in float64 from the float32
inputs as ``((x - q) ** 2).sum(axis=-1)``; that exact formulation is part
of the contract so independent recomputations reproduce the values
bit-for-bit. Ties break by ascending index-image id, which makes results
independent of database row order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from landmark_pipeline.dataset.containers import DescriptorMatrix, RankedList


@dataclass
class NeighborList:
    """Ordered (index-image id, squared distance) pairs for one query."""

    query_id: str
    neighbors: list[tuple[str, float]]

    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.neighbors]


def knn_search(
    queries: DescriptorMatrix,
    db: DescriptorMatrix,
    k: int,
    exclude_self: bool = False,
) -> list[NeighborList]:
    """Exact top-k smallest squared euclidean distances per query.

    When ``exclude_self`` is set, a database entry whose id equals the
    query id is skipped. Requests for more neighbors than the database
    holds return all candidates rather than failing; small synthetic sets
    routinely ask for the cleaning default k=1000.
    """
    if queries.dim != db.dim:
        raise ValueError(f"query dim {queries.dim} != db dim {db.dim}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not (queries.normalized and db.normalized):
        warnings.warn(
            "knn_search inputs are not flagged normalized; "
            "distance-to-cosine conversions downstream assume unit rows",
            stacklevel=2,
        )

    db64 = db.data.astype(np.float64)
    db_ids = np.asarray(db.ids, dtype=object)
    # Rank of each db row in ascending id order, used as the tie key.
    id_rank = np.empty(db.n, dtype=np.int64)
    id_rank[np.argsort(db_ids, kind="stable")] = np.arange(db.n)

    results = []
    for qi in range(queries.n):
        query_id = queries.ids[qi]
        if db.n == 0:
            results.append(NeighborList(query_id=query_id, neighbors=[]))
            continue
        diffs = db64 - queries.data[qi].astype(np.float64)
        d2 = np.square(diffs).sum(axis=1)
        order = np.lexsort((id_rank, d2))
        neighbors: list[tuple[str, float]] = []
        for j in order:
            if exclude_self and db_ids[j] == query_id:
                continue
            neighbors.append((str(db_ids[j]), float(d2[j])))
            if len(neighbors) == k:
                break
        results.append(NeighborList(query_id=query_id, neighbors=neighbors))
    return results


def to_ranked_list(neighbor_list: NeighborList) -> RankedList:
    """Convert distances to scores 1 - d^2/2 (cosine for unit-norm rows)."""
    entries = [
        (image_id, 1.0 - d2 / 2.0) for image_id, d2 in neighbor_list.neighbors
    ]
    return RankedList(query_id=neighbor_list.query_id, entries=entries)


def write_ranked_csv(ranked: list[RankedList], path) -> None:
    """Write the submission format: header ``id,images``, space-separated ids.

    Scores are not part of the format; the written order is authoritative.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "images"])
        for rl in ranked:
            writer.writerow([rl.query_id, " ".join(rl.entry_ids())])


def read_ranked_csv(path) -> list[RankedList]:
    """Read the ``id,images`` submission format; scores come back as 0.0."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "images"]:
            raise ValueError(f"{path}: expected header 'id,images', got {header}")
        for row in reader:
            if not row:
                continue
            images = row[1].split() if len(row) > 1 else []
            out.append(
                RankedList(
                    query_id=row[0],
                    entries=[(image_id, 0.0) for image_id in images],
                )
            )
    return out
