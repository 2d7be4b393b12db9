import numpy as np
import pytest

from landmark_pipeline.dataset import DescriptorMatrix, SyntheticConfig, generate_synthetic


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    data = rng.standard_normal((n, dim))
    return (data / np.linalg.norm(data, axis=1, keepdims=True)).astype(np.float32)


def make_matrix(rng, n, dim, prefix="img") -> DescriptorMatrix:
    return DescriptorMatrix(
        ids=[f"{prefix}{i:04d}" for i in range(n)],
        data=unit_rows(rng, n, dim),
        normalized=True,
    )


@pytest.fixture(scope="session")
def small_synthetic():
    """Separable clusters, no distractors; shared read-only by many tests."""
    return generate_synthetic(
        SyntheticConfig(
            n_labels=3,
            train_per_label=5,
            index_per_label=3,
            test_per_label=2,
            dim=16,
            spread=0.05,
            seed=11,
        )
    )
