"""Permutohedral lattice for approximate high-dimensional Gaussian filtering.

Implements the splat / blur / slice pipeline over the d-dimensional
permutohedral lattice, vectorized in numpy.  One constructed lattice is
reusable for any number of value channels with the same feature positions.

The lattice approximates v_out = K v with K_ij = exp(-0.5 ||f_i - f_j||^2),
including the self term (K_ii = 1).  The raw splat-blur-slice chain carries
two amplitude errors that we correct at build time:

* a per-point multiplicative wobble (each point's splat/slice response
  depends on where it lands inside its simplex).  The operator is built to be
  exactly symmetric, so the wobble factors as D K D; given an independent
  estimate of the true row sums K 1, the factors are recovered from the
  lattice's own ones-response and divided out on both sides, keeping the
  operator symmetric;
* a residual global scale, fixed against exact kernel row sums computed at a
  small deterministic pixel sample.

Row sums are estimated by ``estimate_row_sums``: ones-responses of a few
lattices built on randomly rotated and translated feature copies (the kernel
is isometry-invariant, the discretization wobble is not, so averaging cancels
it), with a smooth residual-bias field interpolated from the exact sample
rows.
"""

from __future__ import annotations

import numpy as np


def _rowview(arr: np.ndarray) -> np.ndarray:
    """View int rows as opaque scalars so rows can be sorted/compared as units."""
    arr = np.ascontiguousarray(arr)
    return arr.view([("", arr.dtype)] * arr.shape[1]).ravel()


class PermutohedralLattice:
    """Lattice built from feature positions, shape (N, d).

    Features must already be scaled so the target kernel is the unit-variance
    Gaussian exp(-0.5 ||f_i - f_j||^2).

    ``row_sums`` is an optional estimate of the true inclusive row sums K 1
    (see ``estimate_row_sums``); when given, the per-point simplex wobble is
    divided out symmetrically before the global calibration.
    """

    def __init__(self, features: np.ndarray, calibration_samples: int = 64,
                 row_sums: np.ndarray | None = None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must have shape (N, d)")
        n, d = features.shape
        self.num_points = n
        self.dim = d

        # Elevate into the hyperplane sum(x) = 0 in d+1 coordinates.  The
        # column scaling makes nearest-lattice-point rounding approximate the
        # unit Gaussian.
        inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
        scale = inv_std / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
        cf = features * scale[None, :]
        elevated = np.empty((n, d + 1))
        sm = np.zeros(n)
        for j in range(d, 0, -1):
            elevated[:, j] = sm - j * cf[:, j - 1]
            sm += cf[:, j - 1]
        elevated[:, 0] = sm

        # Nearest remainder-0 lattice point, then the simplex rank of each
        # coordinate (descending residual order, index tie-break).
        down = np.floor(elevated / (d + 1)) * (d + 1)
        up = down + (d + 1)
        rem0 = np.where(up - elevated < elevated - down, up, down)
        diff = elevated - rem0
        order = np.argsort(-diff, axis=1, kind="stable")
        rank = np.empty((n, d + 1), dtype=np.int64)
        np.put_along_axis(rank, order, np.arange(d + 1)[None, :], axis=1)

        # Walk back onto the sum-0 sublattice when rounding left it.
        h = np.rint(rem0.sum(axis=1) / (d + 1)).astype(np.int64)
        rank += h[:, None]
        low = rank < 0
        high = rank > d
        rank[low] += d + 1
        rem0[low] += d + 1
        rank[high] -= d + 1
        rem0[high] -= d + 1

        # Barycentric weights inside the enclosing simplex.
        v = (elevated - rem0) / (d + 1)
        bary = np.zeros((n, d + 2))
        rows = np.arange(n)[:, None]
        bary[rows, d - rank] += v
        bary[rows, d + 1 - rank] -= v
        bary[:, 0] += 1.0 + bary[:, d + 1]
        self.barycentric = bary[:, : d + 1]  # (N, d+1)

        # Keys of the d+1 enclosing simplex vertices (first d coords only; the
        # last is implied by the zero-sum constraint).
        rem0_int = np.rint(rem0).astype(np.int64)
        keys = np.empty((d + 1, n, d), dtype=np.int64)
        for k in range(d + 1):
            offset = np.where(rank[:, :d] >= d + 1 - k, k - (d + 1), k)
            keys[k] = rem0_int[:, :d] + offset

        flat = keys.reshape(-1, d)

        # Mixed-radix packing of keys into int64 scalars makes the unique /
        # searchsorted vertex bookkeeping ~10x faster than structured-dtype
        # row comparisons; margin keeps blur-neighbor keys encodable.
        margin = d + 1
        key_min = flat.min(axis=0) - margin
        ranges = flat.max(axis=0) + margin + 1 - key_min
        packable = float(np.prod(ranges.astype(np.float64))) < 2.0**62

        if packable:
            strides = np.ones(d, dtype=np.int64)
            for j in range(d - 2, -1, -1):
                strides[j] = strides[j + 1] * ranges[j + 1]

            def encode(k):
                return (k - key_min) @ strides

            uniq, inverse = np.unique(encode(flat), return_inverse=True)
        else:
            encode = None
            uniq, inverse = np.unique(_rowview(flat), return_inverse=True)
        self.num_vertices = uniq.shape[0]
        self.offsets = inverse.reshape(d + 1, n)  # vertex index per point/vertex

        if packable:
            uniq_keys = flat[np.unique(inverse, return_index=True)[1]]
        else:
            uniq_keys = uniq.view(np.int64).reshape(-1, d)

        # Blur neighbors along each lattice axis; misses map to a padding slot
        # (index num_vertices) holding zeros.
        m = self.num_vertices
        self.blur_n1 = np.empty((d + 1, m), dtype=np.int64)
        self.blur_n2 = np.empty((d + 1, m), dtype=np.int64)
        for j in range(d + 1):
            step = np.ones(d, dtype=np.int64)
            if j < d:
                step[j] = -d
            for target, sgn in ((self.blur_n1, 1), (self.blur_n2, -1)):
                shifted = uniq_keys + sgn * step
                nb = encode(shifted) if packable else _rowview(shifted)
                pos = np.searchsorted(uniq, nb)
                pos = np.clip(pos, 0, m - 1)
                hit = uniq[pos] == nb
                target[j] = np.where(hit, pos, m)

        self.alpha = 1.0 / (1.0 + 2.0 ** (-d))
        self.scale_correction = 1.0
        self.inv_wobble = np.ones(n)
        if row_sums is not None:
            self._fit_wobble(np.asarray(row_sums, dtype=np.float64))
        if calibration_samples > 0:
            self._calibrate(features, calibration_samples)

    def _fit_wobble(self, row_sums: np.ndarray):
        """Per-point amplitude factors from the ones-response vs the estimated
        true row sums; split symmetrically (the operator is D K D)."""
        ones_response = self.filter(np.ones((self.num_points, 1)))[:, 0]
        w2 = ones_response / np.maximum(row_sums, 1e-300)
        w2 = w2 / np.exp(np.mean(np.log(np.maximum(w2, 1e-300))))
        self.inv_wobble = 1.0 / np.sqrt(np.clip(w2, 1e-3, 1e3))

    def _calibrate(self, features: np.ndarray, samples: int):
        """Global amplitude fix: match lattice-filtered ones against exact
        inclusive kernel row sums at a deterministic pixel sample."""
        n = self.num_points
        idx = sample_indices(n, samples)
        exact = exact_row_sums(features, idx)
        approx = self.filter(np.ones((n, 1)))[idx, 0]
        ratio = exact / np.maximum(approx, 1e-300)
        self.scale_correction = float(np.median(ratio))

    def filter(self, values: np.ndarray) -> np.ndarray:
        """Approximate K @ values (inclusive of the self term), shape (N, C)."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != self.num_points:
            raise ValueError("values must have shape (N, C)")
        n, c = values.shape
        d = self.dim
        m = self.num_vertices
        values = values * self.inv_wobble[:, None]

        # Splat: scatter barycentric-weighted values onto the lattice.
        flat_idx = self.offsets.ravel()
        lattice = np.empty((m + 1, c))
        for ch in range(c):
            contrib = (self.barycentric.T * values[:, ch][None, :]).ravel()
            lattice[:, ch] = np.bincount(flat_idx, weights=contrib, minlength=m + 1)

        # Blur: [0.5, 1, 0.5] along each of the d+1 lattice axes.  Each axis
        # pass is a symmetric matrix but the passes do not commute, so the
        # composition is averaged with its reversed-order transpose to keep
        # the overall operator exactly self-adjoint.
        forward = lattice.copy()
        for j in range(d + 1):
            forward[m] = 0.0
            forward[:m] = forward[:m] + 0.5 * (
                forward[self.blur_n1[j]] + forward[self.blur_n2[j]]
            )
        for j in range(d, -1, -1):
            lattice[m] = 0.0
            lattice[:m] = lattice[:m] + 0.5 * (
                lattice[self.blur_n1[j]] + lattice[self.blur_n2[j]]
            )
        lattice = 0.5 * (forward + lattice)

        # Slice: gather back with barycentric weights.
        lattice[m] = 0.0
        gathered = lattice[self.offsets]  # (d+1, N, C)
        out = np.einsum("kn,knc->nc", self.barycentric.T, gathered)
        out *= self.inv_wobble[:, None]
        return out * (self.alpha * self.scale_correction)


def sample_indices(n: int, samples: int) -> np.ndarray:
    """Deterministic evenly spaced point sample used for calibration."""
    return np.unique(np.linspace(0, n - 1, min(samples, n)).astype(np.int64))


def exact_row_sums(features: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Exact inclusive Gaussian kernel row sums at the sampled points."""
    d2 = ((features[idx, None, :] - features[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-0.5 * d2).sum(axis=1)


def estimate_row_sums(
    features: np.ndarray,
    copies: int = 8,
    samples: int = 64,
    seed: int = 0x5EED,
) -> np.ndarray:
    """Estimate the inclusive row sums K 1 for every point in ~O(copies * N).

    Averages the ones-responses of ``copies`` lattices built on randomly
    rotated and translated feature copies (each globally anchored to the exact
    sample rows), then multiplies by a smooth residual-bias field interpolated
    from the samples with a Nadaraya-Watson estimate under the same kernel.
    """
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    idx = sample_indices(n, samples)
    exact = exact_row_sums(features, idx)
    ones = np.ones((n, 1))

    rng = np.random.default_rng(seed)
    acc = np.zeros(n)
    first = None
    for k in range(max(copies, 1)):
        if k == 0:
            feats = features
        else:
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            shift = rng.uniform(0.0, 10.0, size=d)
            feats = features @ q.T + shift
        lat = PermutohedralLattice(feats, calibration_samples=0)
        if k == 0:
            first = lat
        response = lat.filter(ones)[:, 0]
        anchor = np.median(exact / np.maximum(response[idx], 1e-300))
        acc += response * anchor
    estimate = acc / max(copies, 1)

    # Smooth multiplicative residual vs the exact sample rows, spread over all
    # points by kernel-weighted interpolation of the sparse sample field.
    sparse = np.zeros((n, 2))
    sparse[idx, 0] = exact / np.maximum(estimate[idx], 1e-300)
    sparse[idx, 1] = 1.0
    smoothed = first.filter(sparse)
    bias = np.where(
        smoothed[:, 1] > 1e-3,
        smoothed[:, 0] / np.maximum(smoothed[:, 1], 1e-3),
        1.0,
    )
    return estimate * np.clip(bias, 0.5, 2.0)
