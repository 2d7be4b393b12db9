"""Containers, file formats, and synthetic fixtures."""

from landmark_pipeline.dataset.containers import (
    DescriptorMatrix,
    ImageFeatures,
    LabelTable,
    LocalFeatureSet,
    Prediction,
    RankedList,
    argmax_label,
)
from landmark_pipeline.dataset.io import (
    load_descriptors,
    load_labels,
    load_local_features,
    save_descriptors,
    save_labels,
    save_local_features,
    sidecar_path,
)
from landmark_pipeline.dataset.synthetic import (
    SyntheticConfig,
    SyntheticDataset,
    generate_synthetic,
)

__all__ = [
    "DescriptorMatrix",
    "ImageFeatures",
    "LabelTable",
    "LocalFeatureSet",
    "Prediction",
    "RankedList",
    "SyntheticConfig",
    "SyntheticDataset",
    "argmax_label",
    "generate_synthetic",
    "load_descriptors",
    "load_labels",
    "load_local_features",
    "save_descriptors",
    "save_labels",
    "save_local_features",
    "sidecar_path",
]
