"""Descriptor-space transformations.

Normalization, multi-scale averaging, model-ensemble concatenation,
database-side augmentation (DBA), and alpha query expansion. All
operations are pure: they return new matrices and never mutate inputs.
Zero rows cannot be normalized; they are preserved as-is and reported
through a warning rather than treated as failures.
"""

from __future__ import annotations

import warnings

import numpy as np

from landmark_pipeline.dataset.containers import DescriptorMatrix
from landmark_pipeline.knn import knn_search

DEFAULT_SCALES = (0.75, 1.0, 1.25)
DEFAULT_DBA_K = 10
DEFAULT_QE_K = 10
DEFAULT_QE_ALPHA = 3.0


def zero_row_ids(matrix: DescriptorMatrix) -> list[str]:
    """Ids of rows that are exactly zero (unnormalizable)."""
    norms = np.linalg.norm(matrix.data.astype(np.float64), axis=1)
    return [matrix.ids[i] for i in np.flatnonzero(norms == 0.0)]


def _renormalized(ids: list[str], data64: np.ndarray) -> DescriptorMatrix:
    norms = np.linalg.norm(data64, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return DescriptorMatrix(
        ids=list(ids), data=(data64 / safe).astype(np.float32), normalized=True
    )


def l2_normalize(matrix: DescriptorMatrix) -> DescriptorMatrix:
    """Scale every nonzero row to unit L2 norm and set the normalized flag."""
    zeros = zero_row_ids(matrix)
    if zeros:
        warnings.warn(
            f"{len(zeros)} zero descriptor rows left unnormalized: "
            f"{zeros[:8]}{'...' if len(zeros) > 8 else ''}",
            stacklevel=2,
        )
    return _renormalized(matrix.ids, matrix.data.astype(np.float64))


def _require_normalized(matrix: DescriptorMatrix, role: str):
    if not matrix.normalized:
        raise ValueError(f"{role} must be normalized (run l2_normalize first)")


def _require_same_ids(matrices: list[DescriptorMatrix]):
    first = matrices[0].ids
    for m in matrices[1:]:
        if m.ids != first:
            raise ValueError("input matrices must share ids in the same order")


def multiscale_average(per_scale: list[DescriptorMatrix]) -> DescriptorMatrix:
    """Row-wise mean of per-scale descriptor sets, re-normalized."""
    if not per_scale:
        raise ValueError("need at least one scale")
    _require_same_ids(per_scale)
    dims = {m.dim for m in per_scale}
    if len(dims) > 1:
        raise ValueError(f"inputs disagree on dim: {sorted(dims)}")
    for m in per_scale:
        _require_normalized(m, "every per-scale input")
    stacked = np.stack([m.data.astype(np.float64) for m in per_scale])
    return _renormalized(per_scale[0].ids, stacked.mean(axis=0))


def concat_ensemble(models: list[DescriptorMatrix]) -> DescriptorMatrix:
    """Per-id concatenation of model descriptors in the given model order.

    Output dim is the sum of model dims (six 512-d models give 3072) and
    rows are re-normalized, so every model contributes equal energy.
    """
    if not models:
        raise ValueError("need at least one model")
    _require_same_ids(models)
    for m in models:
        _require_normalized(m, "every model input")
    data = np.hstack([m.data.astype(np.float64) for m in models])
    return _renormalized(models[0].ids, data)


def dba(db: DescriptorMatrix, k: int = DEFAULT_DBA_K) -> DescriptorMatrix:
    """Database-side augmentation.

    Each row becomes the uniform mean of itself and its k nearest database
    neighbors (self excluded), re-normalized. All neighborhoods come from
    the original matrix, so row updates never feed each other.
    """
    _require_normalized(db, "dba input")
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return DescriptorMatrix(ids=list(db.ids), data=db.data.copy(), normalized=db.normalized)
    if k >= db.n:
        raise ValueError(f"k={k} leaves no room for self-exclusion in a db of {db.n}")

    neighbor_lists = knn_search(db, db, k=k, exclude_self=True)
    row_of = {image_id: i for i, image_id in enumerate(db.ids)}
    original = db.data.astype(np.float64)
    out = np.empty_like(original)
    for i, nl in enumerate(neighbor_lists):
        rows = [i] + [row_of[image_id] for image_id in nl.ids()]
        out[i] = original[rows].mean(axis=0)
    return _renormalized(db.ids, out)


def alpha_qe(
    query: DescriptorMatrix,
    db: DescriptorMatrix,
    k: int = DEFAULT_QE_K,
    alpha: float = DEFAULT_QE_ALPHA,
) -> DescriptorMatrix:
    """Alpha query expansion.

    Each query becomes itself (weight 1) plus its top-k database neighbors
    weighted by cosine similarity raised to ``alpha``; negative similarities
    clamp to zero so fractional exponents stay real. Re-normalized.
    """
    _require_normalized(query, "alpha_qe query input")
    _require_normalized(db, "alpha_qe db input")
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if k == 0:
        return DescriptorMatrix(
            ids=list(query.ids), data=query.data.copy(), normalized=query.normalized
        )
    if k > db.n:
        raise ValueError(f"k={k} exceeds db size {db.n}")

    neighbor_lists = knn_search(query, db, k=k, exclude_self=False)
    row_of = {image_id: i for i, image_id in enumerate(db.ids)}
    db64 = db.data.astype(np.float64)
    out = query.data.astype(np.float64).copy()
    for qi, nl in enumerate(neighbor_lists):
        q = query.data[qi].astype(np.float64)
        for image_id, _ in nl.neighbors:
            x = db64[row_of[image_id]]
            weight = max(float(q @ x), 0.0) ** alpha
            out[qi] += weight * x
    return _renormalized(query.ids, out)
