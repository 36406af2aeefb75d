"""High-dimensional Gaussian filtering of per-label channels.

This is the message-passing bottleneck of dense-CRF mean field.  Two backends
share one contract:

    out_i = sum_{j != i} exp(-0.5 ||f_i - f_j||^2) * values_j

i.e. the inclusive Gaussian-weighted sum minus the self term (exp(0) = 1).
The "brute" backend evaluates the kernel matrix exactly in O(N^2); the
"lattice" backend approximates it in O(N d) via the permutohedral lattice.
No per-pixel normalization is applied: outputs are raw kernel sums.

The kernel matrix is symmetric with zero diagonal after self-exclusion, so the
filter is its own adjoint; ``filter_adjoint`` exists to make that contract
explicit for reverse-mode differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import KernelSpec, PixelGrid
from .permutohedral import PermutohedralLattice, estimate_row_sums

BACKENDS = ("brute", "lattice")

# Row-block size for the brute backend; bounds peak memory at ~block*N floats.
_BRUTE_BLOCK = 512


@dataclass(frozen=True)
class FeatureField:
    """Per-pixel feature vectors, already scaled by the kernel bandwidths."""

    grid: PixelGrid
    features: np.ndarray

    def __post_init__(self):
        f = np.ascontiguousarray(self.features)
        if f.ndim != 2 or f.shape[0] != self.grid.num_pixels:
            raise ValueError("features must have shape (N, d)")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)
        f.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def spatial_features(grid: PixelGrid, theta_gamma: float) -> FeatureField:
    """2-d positions (x, y) / theta_gamma."""
    ys, xs = np.mgrid[0 : grid.height, 0 : grid.width]
    f = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    return FeatureField(grid, f / theta_gamma)


def bilateral_features(
    grid: PixelGrid, image: np.ndarray, theta_alpha: float, theta_beta: float
) -> FeatureField:
    """5-d positions: (x, y) / theta_alpha concatenated with RGB / theta_beta.

    ``image`` has shape (H, W, C) on the 0-255 scale.
    """
    if image.shape[:2] != (grid.height, grid.width):
        raise ValueError("image shape does not match grid")
    ys, xs = np.mgrid[0 : grid.height, 0 : grid.width]
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64) / theta_alpha
    chan = image.reshape(grid.num_pixels, -1).astype(np.float64) / theta_beta
    return FeatureField(grid, np.concatenate([pos, chan], axis=1))


def features_for_kernel(
    spec: KernelSpec, grid: PixelGrid, image: np.ndarray | None
) -> FeatureField:
    if spec.kind == "spatial":
        return spatial_features(grid, spec.theta_gamma)
    if image is None:
        raise ValueError("bilateral kernel requires an image")
    return bilateral_features(grid, image, spec.theta_alpha, spec.theta_beta)


class FilterPlan:
    """Reusable filtering structure for fixed features.

    Immutable after construction; one plan serves any number of channels and
    iterations, and may be shared across threads.

    The lattice backend averages a few lattices built on rotated copies of the
    feature space (first rotation is the identity, the rest drawn from a fixed
    seed).  The lattice's shape error is anisotropic, so rotation averaging
    cancels part of it; one lattice suffices in 2-d.
    """

    DEFAULT_SEED = 0x7EC5

    def __init__(self, field: FeatureField, backend: str = "brute",
                 rotations: int | None = None, seed: int | None = None):
        if backend not in BACKENDS:
            raise ValueError("unknown backend %r" % backend)
        self.field = field
        self.backend = backend
        self.num_points = field.grid.num_pixels
        self._lattices = []
        if backend == "lattice":
            d = field.dim
            if rotations is None:
                rotations = 1 if d <= 2 else 3
            seed = self.DEFAULT_SEED if seed is None else seed
            rng = np.random.default_rng(seed)
            # One row-sum estimate serves every rotated copy: the kernel is
            # isometry-invariant, only the discretization wobble is not.
            row_sums = estimate_row_sums(field.features, seed=seed)
            for r in range(max(1, rotations)):
                if r == 0:
                    feats = field.features
                else:
                    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
                    feats = field.features @ q.T
                self._lattices.append(
                    PermutohedralLattice(feats, row_sums=row_sums))

    def inclusive(self, values: np.ndarray) -> np.ndarray:
        """K @ values including the unit self term."""
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[0] != self.num_points:
            raise ValueError("values must have shape (N, C)")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        if self.backend == "lattice":
            acc = self._lattices[0].filter(values)
            for lat in self._lattices[1:]:
                acc += lat.filter(values)
            acc /= len(self._lattices)
            return acc.astype(values.dtype, copy=False)
        return _brute_inclusive(self.field.features, values)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Self-excluded Gaussian filtering: inclusive result minus values."""
        return self.inclusive(values) - values


def _brute_inclusive(features: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact K @ values in row blocks; dtype follows ``values``."""
    feats = features.astype(values.dtype, copy=False)
    sq = (feats * feats).sum(axis=1)
    n = feats.shape[0]
    out = np.empty_like(values)
    for start in range(0, n, _BRUTE_BLOCK):
        stop = min(start + _BRUTE_BLOCK, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (feats[start:stop] @ feats.T)
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-0.5 * d2)
        out[start:stop] = k @ values
    return out


def build_plan(
    field: FeatureField, backend: str = "brute",
    rotations: int | None = None, seed: int | None = None,
) -> FilterPlan:
    return FilterPlan(field, backend, rotations, seed)


def build_plans(
    kernels, grid: PixelGrid, image: np.ndarray | None,
    backend: str = "brute", seed: int | None = None,
) -> list[FilterPlan]:
    """One plan per kernel of a pairwise mixture."""
    return [
        build_plan(features_for_kernel(spec, grid, image), backend, seed=seed)
        for spec in kernels
    ]


def filter_values(plan: FilterPlan, values: np.ndarray) -> np.ndarray:
    return plan.apply(values)


def filter_adjoint(plan: FilterPlan, grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of ``filter_values``; equals it because K is symmetric with
    zero diagonal after self-exclusion."""
    return plan.apply(grad_out)


def kernel_matrix(field: FeatureField, dtype=np.float64) -> np.ndarray:
    """Dense exp(-0.5 d^2) kernel with zero diagonal, for oracles and tests."""
    f = field.features.astype(dtype)
    d2 = ((f[:, None, :] - f[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-0.5 * d2)
    np.fill_diagonal(k, 0.0)
    return k


def combined_kernel_matrix(kernels, grid, image=None) -> np.ndarray:
    """Weighted sum of kernel matrices for a pairwise mixture (oracle use)."""
    n = grid.num_pixels
    total = np.zeros((n, n))
    for spec in kernels:
        total += spec.weight * kernel_matrix(features_for_kernel(spec, grid, image))
    return total
