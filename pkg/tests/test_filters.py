"""Gaussian filtering: brute backend vs a double-loop reference, operator
properties, and lattice/brute backend agreement."""

import numpy as np
import pytest

from hocrf.core import KernelSpec, PixelGrid
from hocrf.filters import (
    FeatureField,
    bilateral_features,
    build_plan,
    features_for_kernel,
    filter_adjoint,
    filter_values,
    kernel_matrix,
    spatial_features,
)


def _loop_reference(features, values):
    """Independent O(N^2) double loop, kept deliberately dumb."""
    n = features.shape[0]
    out = np.zeros_like(values, dtype=np.float64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d2 = float(((features[i] - features[j]) ** 2).sum())
            out[i] += np.exp(-0.5 * d2) * values[j]
    return out


def _blocky_image(rng, height, width, block=8):
    """Piecewise-constant random RGB image on the 0-255 scale."""
    bh = -(-height // block)
    bw = -(-width // block)
    colors = rng.uniform(0, 255, size=(bh, bw, 3))
    img = np.repeat(np.repeat(colors, block, axis=0), block, axis=1)
    return img[:height, :width]


class TestBruteBackend:
    def test_matches_loop_reference_spatial(self, rng):
        grid = PixelGrid(8, 8)
        field = spatial_features(grid, theta_gamma=2.0)
        values = rng.normal(size=(64, 3))
        plan = build_plan(field, "brute")
        ref = _loop_reference(field.features, values)
        np.testing.assert_allclose(plan.apply(values), ref, atol=1e-12)

    def test_matches_loop_reference_bilateral(self, rng):
        grid = PixelGrid(8, 8)
        img = rng.uniform(0, 255, size=(8, 8, 3))
        field = bilateral_features(grid, img, theta_alpha=10.0, theta_beta=30.0)
        values = rng.normal(size=(64, 2))
        plan = build_plan(field, "brute")
        ref = _loop_reference(field.features, values)
        np.testing.assert_allclose(plan.apply(values), ref, atol=1e-12)

    def test_single_pixel_is_zero(self):
        grid = PixelGrid(1, 1)
        plan = build_plan(spatial_features(grid, 1.0), "brute")
        out = plan.apply(np.array([[3.0, -1.0]]))
        np.testing.assert_array_equal(out, np.zeros((1, 2)))

    def test_identical_features_swap_values(self):
        # two pixels at the same feature point: kernel weight exactly 1
        grid = PixelGrid(2, 1)
        field = FeatureField(grid, np.zeros((2, 2)))
        plan = build_plan(field, "brute")
        out = plan.apply(np.array([[2.0], [5.0]]))
        np.testing.assert_allclose(out, [[5.0], [2.0]], atol=1e-14)


class TestOperatorProperties:
    def setup_method(self):
        self.grid = PixelGrid(6, 5)
        self.field = spatial_features(self.grid, 1.5)
        self.plan = build_plan(self.field, "brute")

    def test_linearity(self, rng):
        u = rng.normal(size=(30, 2))
        v = rng.normal(size=(30, 2))
        a, b = 1.7, -0.3
        lhs = self.plan.apply(a * u + b * v)
        rhs = a * self.plan.apply(u) + b * self.plan.apply(v)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_adjoint_equals_filter(self, rng):
        x = rng.normal(size=(30, 3))
        np.testing.assert_allclose(
            filter_adjoint(self.plan, x), filter_values(self.plan, x),
            atol=1e-12)

    def test_inner_product_adjoint(self, rng):
        for backend in ("brute", "lattice"):
            plan = build_plan(self.field, backend)
            u = rng.normal(size=(30, 1))
            v = rng.normal(size=(30, 1))
            lhs = (plan.apply(u).T @ v).item()
            rhs = (u.T @ filter_adjoint(plan, v)).item()
            assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_constant_preservation_inclusive(self):
        # inclusive filtering of all-ones gives each pixel's total kernel mass
        ones = np.ones((30, 1))
        out = self.plan.inclusive(ones)
        expected = kernel_matrix(self.field) @ ones + 1.0
        np.testing.assert_allclose(out, expected, atol=1e-10)
        assert (out > 0).all()

    def test_rejects_nonfinite(self):
        bad = np.full((30, 1), np.nan)
        with pytest.raises(ValueError):
            self.plan.apply(bad)


class TestLatticeBackend:
    def test_agreement_spatial(self, rng):
        grid = PixelGrid(32, 32)
        field = spatial_features(grid, 3.0)
        values = rng.dirichlet(np.ones(4), size=grid.num_pixels)
        brute = build_plan(field, "brute").apply(values)
        lattice = build_plan(field, "lattice").apply(values)
        rel = np.linalg.norm(lattice - brute) / np.linalg.norm(brute)
        assert rel < 0.05

    def test_agreement_bilateral(self, rng):
        grid = PixelGrid(32, 32)
        img = _blocky_image(rng, 32, 32)
        field = bilateral_features(grid, img, 20.0, 10.0)
        values = rng.dirichlet(np.ones(4), size=grid.num_pixels)
        brute = build_plan(field, "brute").apply(values)
        lattice = build_plan(field, "lattice").apply(values)
        rel = np.linalg.norm(lattice - brute) / np.linalg.norm(brute)
        assert rel < 0.05

    def test_single_pixel_plan_valid(self):
        plan = build_plan(spatial_features(PixelGrid(1, 1), 1.0), "lattice")
        out = plan.apply(np.array([[1.0]]))
        np.testing.assert_allclose(out, [[0.0]], atol=1e-9)

    def test_seed_determinism(self, rng):
        grid = PixelGrid(12, 12)
        img = rng.uniform(0, 255, size=(12, 12, 3))
        field = bilateral_features(grid, img, 20.0, 30.0)
        values = rng.normal(size=(grid.num_pixels, 2))
        a = build_plan(field, "lattice", seed=7).apply(values)
        b = build_plan(field, "lattice", seed=7).apply(values)
        np.testing.assert_array_equal(a, b)

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            build_plan(spatial_features(PixelGrid(2, 2), 1.0), "gpu")


class TestFeatureConstruction:
    def test_spatial_scaling(self):
        field = spatial_features(PixelGrid(3, 2), theta_gamma=2.0)
        assert field.dim == 2
        # pixel 4 = (x=1, y=1) scaled by 1/2
        np.testing.assert_allclose(field.features[4], [0.5, 0.5])

    def test_bilateral_dimension(self, rng):
        img = rng.uniform(0, 255, size=(2, 3, 3))
        field = bilateral_features(PixelGrid(3, 2), img, 60.0, 10.0)
        assert field.dim == 5

    def test_bilateral_requires_image(self):
        spec = KernelSpec("bilateral", 1.0)
        with pytest.raises(ValueError):
            features_for_kernel(spec, PixelGrid(2, 2), None)
