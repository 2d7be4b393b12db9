"""Local-feature matching and RANSAC affine spatial verification.

``pairwise_inliers`` produces the directional inlier count used by the
cleaning and recognition stages: the first image's features are the match
source. Every verification derives its PRNG seed from (base seed, source
id, target id), so batches of verifications are reproducible no matter
how they are scheduled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from landmark_pipeline.dataset.containers import ImageFeatures, LocalFeatureSet

DEGENERATE_AREA = 1e-6
DEGENERATE_DET = 1e-9


@dataclass
class RansacConfig:
    iterations: int = 1000
    reprojection_tolerance: float = 3.0
    # Pairs with at least this many inliers count as spatially verified.
    # The bound is inclusive: verified <=> inlier_count >= inlier_threshold.
    inlier_threshold: int = 30
    match_distance_max: float = 0.8
    mutual_check: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.reprojection_tolerance <= 0:
            raise ValueError("reprojection_tolerance must be > 0")
        if self.inlier_threshold < 1:
            raise ValueError("inlier_threshold must be >= 1")


@dataclass
class CorrespondenceSet:
    """Matched keypoint pairs: source (x, y), target (x, y), descriptor distance."""

    src_xy: np.ndarray
    dst_xy: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.src_xy = np.asarray(self.src_xy, dtype=np.float64).reshape(-1, 2)
        self.dst_xy = np.asarray(self.dst_xy, dtype=np.float64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if not (len(self.src_xy) == len(self.dst_xy) == len(self.distances)):
            raise ValueError("correspondence arrays disagree on length")
        if not (np.isfinite(self.src_xy).all() and np.isfinite(self.dst_xy).all()):
            raise ValueError("correspondence coordinates must be finite")

    def __len__(self) -> int:
        return len(self.distances)


@dataclass
class AffineTransform:
    """2x2 linear part plus translation, in pixels."""

    a11: float
    a12: float
    a21: float
    a22: float
    tx: float
    ty: float

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.linear.T + np.array([self.tx, self.ty])


@dataclass
class VerificationResult:
    """Outcome of spatial verification on one correspondence set.

    ``inlier_count`` is the count under the final (refit) transform;
    ``sample_inlier_count`` keeps the raw best-sample count for debugging.
    """

    inlier_count: int
    transform: AffineTransform | None
    verified: bool
    sample_inlier_count: int = 0
    inlier_indices: np.ndarray | None = None


def match_features(
    src: ImageFeatures, dst: ImageFeatures, cfg: RansacConfig
) -> CorrespondenceSet:
    """Nearest-descriptor matching from src to dst.

    Each source descriptor pairs with its L2-nearest target descriptor,
    kept when the distance is within ``match_distance_max`` and, under
    ``mutual_check``, when the match is mutual. Ties resolve to the lowest
    index, so matching is deterministic. Empty inputs yield an empty set.
    """
    empty = CorrespondenceSet(
        src_xy=np.empty((0, 2)), dst_xy=np.empty((0, 2)), distances=np.empty(0)
    )
    if src.count == 0 or dst.count == 0:
        return empty
    if src.d_local != dst.d_local:
        raise ValueError(
            f"local descriptor widths differ: {src.d_local} vs {dst.d_local}"
        )
    a = src.descriptors.astype(np.float64)
    b = dst.descriptors.astype(np.float64)
    # Squared distances via the expansion; exact ordering is not load-bearing
    # here because RANSAC downstream is robust to borderline matches.
    d2 = (
        np.square(a).sum(axis=1)[:, None]
        + np.square(b).sum(axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.maximum(d2, 0.0, out=d2)
    nearest = d2.argmin(axis=1)
    dist = np.sqrt(d2[np.arange(src.count), nearest])
    keep = dist <= cfg.match_distance_max
    if cfg.mutual_check:
        reverse = d2.argmin(axis=0)
        keep &= reverse[nearest] == np.arange(src.count)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return empty
    return CorrespondenceSet(
        src_xy=src.xy[idx],
        dst_xy=dst.xy[nearest[idx]],
        distances=dist[idx],
    )


def estimate_affine(src_pts: np.ndarray, dst_pts: np.ndarray) -> AffineTransform | None:
    """Exact 6-parameter solve mapping 3 source points onto 3 target points.

    Returns None for degenerate samples: source triangle area below
    1e-6 px^2 or a solved linear part with |det| <= 1e-9.
    """
    src = np.asarray(src_pts, dtype=np.float64).reshape(3, 2)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(3, 2)
    e1 = src[1] - src[0]
    e2 = src[2] - src[0]
    area = abs(e1[0] * e2[1] - e1[1] * e2[0]) / 2.0
    if area < DEGENERATE_AREA:
        return None
    design = np.column_stack([src, np.ones(3)])
    params = np.linalg.solve(design, dst)
    return _params_to_transform(params)


def _params_to_transform(params: np.ndarray) -> AffineTransform | None:
    a11, a21 = params[0]
    a12, a22 = params[1]
    tx, ty = params[2]
    if abs(a11 * a22 - a12 * a21) <= DEGENERATE_DET:
        return None
    return AffineTransform(a11=a11, a12=a12, a21=a21, a22=a22, tx=tx, ty=ty)


def refit_affine(src_xy: np.ndarray, dst_xy: np.ndarray) -> AffineTransform | None:
    """Least-squares affine over >= 3 correspondences; None if degenerate."""
    src = np.asarray(src_xy, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_xy, dtype=np.float64).reshape(-1, 2)
    if len(src) < 3:
        return None
    design = np.column_stack([src, np.ones(len(src))])
    params, _, rank, _ = np.linalg.lstsq(design, dst, rcond=None)
    if rank < 3:
        return None
    return _params_to_transform(params)


def ransac_verify(c: CorrespondenceSet, cfg: RansacConfig) -> VerificationResult:
    """Seeded RANSAC over random 3-subsets with least-squares refinement.

    The best hypothesis maximizes the inlier count (reprojection error
    within ``reprojection_tolerance``), ties broken by the smaller summed
    inlier error, then by iteration order. The winner is refit on all its
    inliers and inliers are recounted under the refit model.
    """
    n = len(c)
    if n < 3:
        return VerificationResult(inlier_count=0, transform=None, verified=False)

    rng = np.random.default_rng(cfg.seed)
    # Three smallest of n iid uniforms per row = a uniform random 3-subset.
    draws = rng.random((cfg.iterations, n))
    samples = np.argpartition(draws, 2, axis=1)[:, :3]

    src_s = c.src_xy[samples]  # (iters, 3, 2)
    dst_s = c.dst_xy[samples]
    e1 = src_s[:, 1, :] - src_s[:, 0, :]
    e2 = src_s[:, 2, :] - src_s[:, 0, :]
    area = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) / 2.0
    valid = area >= DEGENERATE_AREA
    if not valid.any():
        return VerificationResult(inlier_count=0, transform=None, verified=False)

    design = np.concatenate(
        [src_s[valid], np.ones((int(valid.sum()), 3, 1))], axis=2
    )
    params = np.linalg.solve(design, dst_s[valid])  # (v, 3, 2)
    a = np.stack(
        [
            np.stack([params[:, 0, 0], params[:, 1, 0]], axis=1),
            np.stack([params[:, 0, 1], params[:, 1, 1]], axis=1),
        ],
        axis=1,
    )  # (v, 2, 2) row-major linear parts
    t = params[:, 2, :]  # (v, 2)
    dets = np.abs(a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0])
    solvable = dets > DEGENERATE_DET
    if not solvable.any():
        return VerificationResult(inlier_count=0, transform=None, verified=False)
    a, t = a[solvable], t[solvable]

    projected = np.einsum("vij,nj->vni", a, c.src_xy) + t[:, None, :]
    err = np.linalg.norm(projected - c.dst_xy[None, :, :], axis=2)  # (v, n)
    inlier = err <= cfg.reprojection_tolerance
    counts = inlier.sum(axis=1)
    err_sums = np.where(inlier, err, 0.0).sum(axis=1)
    best = int(np.lexsort((np.arange(len(counts)), err_sums, -counts))[0])

    sample_count = int(counts[best])
    sample_mask = inlier[best]
    transform = AffineTransform(
        a11=float(a[best, 0, 0]),
        a12=float(a[best, 0, 1]),
        a21=float(a[best, 1, 0]),
        a22=float(a[best, 1, 1]),
        tx=float(t[best, 0]),
        ty=float(t[best, 1]),
    )

    refit = refit_affine(c.src_xy[sample_mask], c.dst_xy[sample_mask])
    if refit is not None:
        transform = refit
    final_err = np.linalg.norm(transform.apply(c.src_xy) - c.dst_xy, axis=1)
    final_mask = final_err <= cfg.reprojection_tolerance
    return VerificationResult(
        inlier_count=int(final_mask.sum()),
        transform=transform,
        verified=int(final_mask.sum()) >= cfg.inlier_threshold,
        sample_inlier_count=sample_count,
        inlier_indices=np.flatnonzero(final_mask),
    )


def derive_pair_seed(base_seed: int, src_id: str, dst_id: str) -> int:
    """Stable per-pair seed; independent of scheduling and platform."""
    digest = hashlib.blake2b(
        f"{base_seed}|{src_id}|{dst_id}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def verify_pair(
    src_id: str,
    dst_id: str,
    features: LocalFeatureSet,
    cfg: RansacConfig,
) -> VerificationResult:
    """Match then verify one directed image pair with its derived seed."""
    src = features[src_id]
    dst = features[dst_id]
    pair_cfg = replace(cfg, seed=derive_pair_seed(cfg.seed, src_id, dst_id))
    return ransac_verify(match_features(src, dst, pair_cfg), pair_cfg)


def pairwise_inliers(
    src_id: str,
    dst_id: str,
    features: LocalFeatureSet,
    cfg: RansacConfig,
) -> int:
    """Directional inlier count between two images (src is the match source)."""
    return verify_pair(src_id, dst_id, features, cfg).inlier_count
