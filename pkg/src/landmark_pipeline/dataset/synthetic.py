"""Deterministic synthetic fixture generator.

Builds train/index/test descriptor sets whose same-label descriptors come
from one cluster on the unit sphere, local features for every image where
same-label images are related by a planted affine map plus noise and
outlier keypoints, a train label table, and full ground truth (relevant
index images per test image, true test labels).

Distractor test images carry no label and no relevant index images. Their
descriptors are planted near the first label's cluster so that a batch of
them gets predicted as one frequent label, mimicking the non-landmark
categories that distractor suppression targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from landmark_pipeline.dataset.containers import (
    DescriptorMatrix,
    ImageFeatures,
    LabelTable,
    LocalFeatureSet,
)


@dataclass
class SyntheticConfig:
    n_labels: int = 4
    train_per_label: int = 6
    index_per_label: int = 4
    test_per_label: int = 2
    dim: int = 16
    spread: float = 0.05
    distractor_fraction: float = 0.0
    # Train images per label whose local geometry is unrelated to the
    # label's planted layout; their global descriptor still sits in the
    # cluster, so they survive kNN but fail spatial verification.
    train_outliers_per_label: int = 0
    # Planted local-feature geometry.
    n_keypoints: int = 40
    n_outlier_keypoints: int = 10
    d_local: int = 16
    keypoint_noise_px: float = 0.5
    descriptor_noise: float = 0.05
    max_rotation: float = 0.5
    max_log_scale: float = 0.2
    max_translation: float = 20.0
    layout_extent: float = 100.0
    seed: int = 0

    def validate(self):
        if self.n_labels < 1:
            raise ValueError("n_labels must be >= 1")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValueError("distractor_fraction must be in [0, 1)")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if min(self.train_per_label, self.index_per_label, self.test_per_label) < 0:
            raise ValueError("per-label counts must be >= 0")
        if self.train_outliers_per_label < 0:
            raise ValueError("train_outliers_per_label must be >= 0")
        if self.d_local < 2:
            raise ValueError("d_local must be >= 2")


@dataclass
class SyntheticDataset:
    train: DescriptorMatrix
    index: DescriptorMatrix
    test: DescriptorMatrix
    features: LocalFeatureSet
    labels: LabelTable
    relevance: dict[str, set[str]]
    test_labels: dict[str, str | None]
    train_outlier_ids: set[str] = field(default_factory=set)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _label_centers(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Well-separated unit centers: rejection-sample toward |cos| <= 0.5."""
    centers = np.empty((n, dim))
    for i in range(n):
        best = None
        best_cos = np.inf
        for _ in range(64):
            cand = _unit(rng.standard_normal(dim))
            worst = max((abs(float(cand @ centers[j])) for j in range(i)), default=0.0)
            if worst < best_cos:
                best, best_cos = cand, worst
            if worst <= 0.5:
                break
        centers[i] = best
    return centers


def _sample_affine(rng: np.random.Generator, cfg: SyntheticConfig):
    """Random planted map: anisotropic scale + rotation + translation."""
    theta = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    sx = math.exp(rng.uniform(-cfg.max_log_scale, cfg.max_log_scale))
    sy = math.exp(rng.uniform(-cfg.max_log_scale, cfg.max_log_scale))
    c, s = math.cos(theta), math.sin(theta)
    linear = np.array([[c * sx, -s * sy], [s * sx, c * sy]])
    translation = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
    return linear, translation


def _planted_image_features(
    rng: np.random.Generator,
    cfg: SyntheticConfig,
    base_xy: np.ndarray,
    base_desc: np.ndarray,
) -> ImageFeatures:
    linear, translation = _sample_affine(rng, cfg)
    xy = base_xy @ linear.T + translation
    xy = xy + rng.normal(0.0, cfg.keypoint_noise_px, size=xy.shape)
    desc = base_desc + cfg.descriptor_noise * rng.standard_normal(base_desc.shape)
    desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)
    scale = math.sqrt(abs(np.linalg.det(linear)))
    return _assemble(rng, cfg, xy, desc, scale)


def _random_image_features(rng: np.random.Generator, cfg: SyntheticConfig) -> ImageFeatures:
    xy = rng.uniform(0.0, cfg.layout_extent, size=(cfg.n_keypoints, 2))
    desc = rng.standard_normal((cfg.n_keypoints, cfg.d_local))
    desc = desc / np.linalg.norm(desc, axis=1, keepdims=True)
    return _assemble(rng, cfg, xy, desc, 1.0)


def _assemble(rng, cfg: SyntheticConfig, xy, desc, scale) -> ImageFeatures:
    n_out = cfg.n_outlier_keypoints
    if n_out:
        out_xy = rng.uniform(0.0, cfg.layout_extent, size=(n_out, 2))
        out_desc = rng.standard_normal((n_out, cfg.d_local))
        out_desc = out_desc / np.linalg.norm(out_desc, axis=1, keepdims=True)
        xy = np.vstack([xy, out_xy])
        desc = np.vstack([desc, out_desc])
    m = xy.shape[0]
    keypoints = np.column_stack(
        [xy, np.full(m, scale), rng.uniform(0.0, 1.0, size=m)]
    )
    return ImageFeatures(keypoints=keypoints, descriptors=desc)


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """Generate the full fixture; a pure function of the config (incl. seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centers = _label_centers(rng, cfg.n_labels, cfg.dim)
    label_names = [f"L{i:04d}" for i in range(cfg.n_labels)]

    def descriptor(center: np.ndarray) -> np.ndarray:
        return _unit(center + cfg.spread * rng.standard_normal(cfg.dim))

    split_ids: dict[str, list[str]] = {"train": [], "index": [], "test": []}
    split_rows: dict[str, list[np.ndarray]] = {"train": [], "index": [], "test": []}
    images: dict[str, ImageFeatures] = {}
    labels: dict[str, str] = {}
    test_labels: dict[str, str | None] = {}
    outlier_ids: set[str] = set()

    per_split = {
        "train": cfg.train_per_label,
        "index": cfg.index_per_label,
        "test": cfg.test_per_label,
    }
    for li, label in enumerate(label_names):
        base_xy = rng.uniform(0.0, cfg.layout_extent, size=(cfg.n_keypoints, 2))
        base_desc = rng.standard_normal((cfg.n_keypoints, cfg.d_local))
        base_desc = base_desc / np.linalg.norm(base_desc, axis=1, keepdims=True)
        for split, count in per_split.items():
            for i in range(count):
                image_id = f"{split}-{li:04d}-{i:04d}"
                split_ids[split].append(image_id)
                split_rows[split].append(descriptor(centers[li]))
                images[image_id] = _planted_image_features(rng, cfg, base_xy, base_desc)
                if split == "train":
                    labels[image_id] = label
                elif split == "test":
                    test_labels[image_id] = label
        for i in range(cfg.train_outliers_per_label):
            image_id = f"train-{li:04d}-x{i:03d}"
            split_ids["train"].append(image_id)
            split_rows["train"].append(descriptor(centers[li]))
            images[image_id] = _random_image_features(rng, cfg)
            labels[image_id] = label
            outlier_ids.add(image_id)

    n_landmark_tests = cfg.n_labels * cfg.test_per_label
    f = cfg.distractor_fraction
    n_distractors = int(round(f / (1.0 - f) * n_landmark_tests)) if f > 0 else 0
    for i in range(n_distractors):
        image_id = f"test-dist-{i:04d}"
        split_ids["test"].append(image_id)
        # Half the landmark spread keeps distractors tight around label 0,
        # so they outrank genuine queries in confidence until suppressed.
        split_rows["test"].append(
            _unit(centers[0] + 0.5 * cfg.spread * rng.standard_normal(cfg.dim))
        )
        images[image_id] = _random_image_features(rng, cfg)
        test_labels[image_id] = None

    def matrix(split: str) -> DescriptorMatrix:
        rows = split_rows[split]
        data = np.vstack(rows) if rows else np.empty((0, cfg.dim))
        return DescriptorMatrix(
            ids=split_ids[split], data=data.astype(np.float32), normalized=True
        )

    index_by_label: dict[str, set[str]] = {}
    for image_id in split_ids["index"]:
        label = label_names[int(image_id.split("-")[1])]
        index_by_label.setdefault(label, set()).add(image_id)
    relevance = {
        qid: set(index_by_label.get(test_labels[qid], set())) if test_labels[qid] else set()
        for qid in split_ids["test"]
    }

    return SyntheticDataset(
        train=matrix("train"),
        index=matrix("index"),
        test=matrix("test"),
        features=LocalFeatureSet(images),
        labels=LabelTable(labels),
        relevance=relevance,
        test_labels=test_labels,
        train_outlier_ids=outlier_ids,
    )
