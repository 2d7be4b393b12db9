"""Landmark retrieval/recognition engine over precomputed descriptors.

The package ingests global descriptors and local features from files,
runs exact euclidean search, automated train-set cleaning, soft-voting
recognition with spatial verification, distractor suppression, and
discriminative re-ranking, and scores results with mAP@100 and GAP.
"""

from landmark_pipeline.dataset import (
    DescriptorMatrix,
    ImageFeatures,
    LabelTable,
    LocalFeatureSet,
    Prediction,
    RankedList,
    SyntheticConfig,
    generate_synthetic,
    load_descriptors,
    load_labels,
    load_local_features,
    save_descriptors,
    save_labels,
    save_local_features,
)

__version__ = "0.1.0"

__all__ = [
    "DescriptorMatrix",
    "ImageFeatures",
    "LabelTable",
    "LocalFeatureSet",
    "Prediction",
    "RankedList",
    "SyntheticConfig",
    "generate_synthetic",
    "load_descriptors",
    "load_labels",
    "load_local_features",
    "save_descriptors",
    "save_labels",
    "save_local_features",
    "__version__",
]
