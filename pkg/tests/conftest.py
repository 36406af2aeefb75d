"""Shared builders for small random CRF problems used across the test suite."""

import numpy as np
import pytest

from hocrf.core import (
    Detection,
    DetectionParams,
    KernelSpec,
    LabelSpace,
    PairwiseConfig,
    PixelGrid,
    UnaryField,
)
from hocrf.filters import build_plans, combined_kernel_matrix


def make_problem(
    rng,
    width=3,
    height=2,
    num_foreground=1,
    num_detections=1,
    kernel_weight=0.5,
    theta_gamma=1.5,
    detection_weight=1.0,
    potts=1.0,
):
    """Random tiny CRF instance: unaries ~ N(0,1), one spatial kernel, and
    detections with random boxes/scores.  Small enough for the exhaustive
    oracle."""
    grid = PixelGrid(width, height)
    labels = LabelSpace(num_foreground)
    unary = UnaryField(
        grid, labels, rng.normal(size=(grid.num_pixels, labels.total))
    )
    kernels = (KernelSpec("spatial", kernel_weight, theta_gamma=theta_gamma),)
    config = PairwiseConfig.potts(labels.total, kernels, potts)

    dets = []
    for _ in range(num_detections):
        x0 = int(rng.integers(0, width))
        y0 = int(rng.integers(0, height))
        x1 = int(rng.integers(x0 + 1, width + 1))
        y1 = int(rng.integers(y0 + 1, height + 1))
        box = (x0, y0, x1, y1)
        label = int(rng.integers(1, labels.total))
        score = float(rng.uniform(0.1, 0.9))
        dets.append(Detection(label, score, box, grid.box_indices(box)))
    params = DetectionParams.uniform(labels, detection_weight)
    return grid, labels, unary, config, dets, params


def problem_plans(grid, config, backend="brute"):
    return build_plans(config.kernels, grid, None, backend=backend)


def problem_kernel(grid, config):
    """Dense weighted kernel matrix for oracle-side energy evaluation."""
    return combined_kernel_matrix(config.kernels, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
