"""Shared helpers for the test suite."""

import numpy as np


def tiny_images(n, h=8, w=4, seed=0):
    return np.random.default_rng(seed).random((n, h, w, 3))


def small_benchmark_spec():
    """The synthetic benchmark used by trainer/acceptance tests."""
    from clusiam.dataset import SyntheticSpec

    return SyntheticSpec(
        n_identities=20,
        images_per_identity=10,
        n_cameras=3,
        height=32,
        width=16,
        seed=0,
    )
