"""Core CRF state: label spaces, grids, unaries, marginals, detections, pairwise config.

Energies are stored as negative log-potentials everywhere.  Probabilities are
derived on demand and never stored alongside energies.  All containers are
immutable after construction so they can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SCORE_EPS = 1e-6


class DegenerateDetectionError(ValueError):
    """Raised for detections with an empty foreground or a zero-area box."""


@dataclass(frozen=True)
class LabelSpace:
    """K foreground classes plus a background class at index 0."""

    num_foreground: int
    names: tuple[str, ...] | None = None

    background_index: int = 0

    def __post_init__(self):
        if self.num_foreground < 1:
            raise ValueError("need at least one foreground class")
        if self.names is not None and len(self.names) != self.total:
            raise ValueError("names must cover all %d labels" % self.total)

    @property
    def total(self) -> int:
        return self.num_foreground + 1

    def foreground_labels(self) -> range:
        return range(1, self.total)


@dataclass(frozen=True)
class PixelGrid:
    """Row-major W x H pixel grid; pixel i = y * width + x."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must contain at least one pixel")

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def index(self, x, y):
        return y * self.width + x

    def box_indices(self, box) -> np.ndarray:
        """Pixel indices covered by a half-open box [x0, y0, x1, y1)."""
        x0, y0, x1, y1 = box
        x0 = max(int(x0), 0)
        y0 = max(int(y0), 0)
        x1 = min(int(x1), self.width)
        y1 = min(int(y1), self.height)
        if x1 <= x0 or y1 <= y0:
            return np.empty(0, dtype=np.int64)
        xs = np.arange(x0, x1)
        ys = np.arange(y0, y1)
        return (ys[:, None] * self.width + xs[None, :]).ravel()


def _check_field(grid, labels, arr, name):
    if arr.shape != (grid.num_pixels, labels.total):
        raise ValueError(
            "%s shape %s does not match N=%d, L=%d"
            % (name, arr.shape, grid.num_pixels, labels.total)
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("%s contains non-finite entries" % name)


@dataclass(frozen=True)
class UnaryField:
    """Per-pixel, per-label energies (negative log-potentials), shape N x (K+1)."""

    grid: PixelGrid
    labels: LabelSpace
    energies: np.ndarray

    def __post_init__(self):
        _check_field(self.grid, self.labels, self.energies, "unary energies")
        self.energies.setflags(write=False)


@dataclass(frozen=True)
class DistributionField:
    """Per-pixel marginals; rows sum to 1.  The instance stage reuses this with
    a dynamic label count, so ``num_labels`` is taken from the array, not from
    a LabelSpace."""

    grid: PixelGrid
    q: np.ndarray

    def __post_init__(self):
        n, _ = self.q.shape
        if n != self.grid.num_pixels:
            raise ValueError("q rows do not match pixel count")
        if np.any(self.q < -1e-12) or np.any(self.q > 1 + 1e-12):
            raise ValueError("q entries outside [0, 1]")
        rowsums = self.q.sum(axis=1)
        if np.max(np.abs(rowsums - 1.0)) > 1e-9:
            raise ValueError("q rows are not normalized")
        self.q.setflags(write=False)

    @property
    def num_labels(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class Labeling:
    """Hard per-pixel assignment, values in [0, num_labels)."""

    grid: PixelGrid
    num_labels: int
    x: np.ndarray

    def __post_init__(self):
        if self.x.shape != (self.grid.num_pixels,):
            raise ValueError("labeling length does not match pixel count")
        if self.x.min(initial=0) < 0 or self.x.max(initial=0) >= self.num_labels:
            raise ValueError("label out of range")
        self.x.setflags(write=False)


def clamp_score(s: float) -> float:
    """Clamp a detector confidence into the open interval (0, 1)."""
    return float(min(max(s, SCORE_EPS), 1.0 - SCORE_EPS))


@dataclass(frozen=True)
class Detection:
    """One detection hypothesis: class label, confidence, foreground pixel set,
    bounding box, and the marginal of its latent validity variable."""

    class_label: int
    score: float
    box: tuple[int, int, int, int]
    foreground: np.ndarray
    y_marginal: float = field(default=-1.0)

    def __post_init__(self):
        if self.foreground.size == 0:
            raise DegenerateDetectionError("detection has empty foreground")
        s = clamp_score(self.score)
        object.__setattr__(self, "score", s)
        if self.y_marginal < 0:
            object.__setattr__(self, "y_marginal", s)
        if not (0.0 <= self.y_marginal <= 1.0):
            raise ValueError("y_marginal outside [0, 1]")
        fg = np.asarray(self.foreground, dtype=np.int64)
        object.__setattr__(self, "foreground", fg)
        fg.setflags(write=False)

    def with_y(self, y: float) -> "Detection":
        return replace(self, y_marginal=float(y))

    def validate_against(self, grid: PixelGrid):
        inside = np.isin(self.foreground, grid.box_indices(self.box))
        if not inside.all():
            raise ValueError("foreground pixels fall outside the detection box")


def y_unary_pair(score: float) -> tuple[float, float]:
    """Energies (psi(y=0), psi(y=1)) for the latent validity variable.

    The log-odds form makes the no-other-evidence fixed point of the Y update
    equal to the clamped detector confidence.
    """
    s = clamp_score(score)
    return (-np.log1p(-s), -np.log(s))


@dataclass(frozen=True)
class DetectionParams:
    """Per-class detection clique weights, indexed by class label (entry 0 is
    the background slot and is never used)."""

    class_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("class weights must be finite and non-negative")
        object.__setattr__(self, "class_weights", w)
        w.setflags(write=False)

    @classmethod
    def uniform(cls, labels: LabelSpace, weight: float = 1.0) -> "DetectionParams":
        w = np.full(labels.total, float(weight))
        w[labels.background_index] = 0.0
        return cls(w)

    def weight_for(self, det: Detection) -> float:
        return float(self.class_weights[det.class_label])

    def coefficient(self, det: Detection) -> float:
        """w_l * s_d / |F_d|, the per-pixel strength of the detection clique."""
        return self.weight_for(det) * det.score / det.foreground.size


@dataclass(frozen=True)
class KernelSpec:
    """One Gaussian kernel of the pairwise mixture.

    kind="spatial" uses pixel coordinates scaled by 1/theta_gamma;
    kind="bilateral" concatenates coordinates scaled by 1/theta_alpha with
    image channels scaled by 1/theta_beta.
    """

    kind: str
    weight: float
    theta_gamma: float = 3.0
    theta_alpha: float = 60.0
    theta_beta: float = 10.0

    def __post_init__(self):
        if self.kind not in ("spatial", "bilateral"):
            raise ValueError("unknown kernel kind %r" % self.kind)
        if self.weight < 0 or not np.isfinite(self.weight):
            raise ValueError("kernel weight must be finite and non-negative")


def potts_matrix(num_labels: int, scale: float = 1.0) -> np.ndarray:
    """Potts compatibility: cost ``scale`` for differing labels, 0 on the diagonal."""
    mu = np.full((num_labels, num_labels), float(scale))
    np.fill_diagonal(mu, 0.0)
    return mu


@dataclass(frozen=True)
class PairwiseConfig:
    """Gaussian kernel mixture plus a full label-compatibility matrix."""

    kernels: tuple[KernelSpec, ...]
    compatibility: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.compatibility, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] != mu.shape[1]:
            raise ValueError("compatibility must be a square matrix")
        if not np.all(np.isfinite(mu)):
            raise ValueError("compatibility must be finite")
        object.__setattr__(self, "compatibility", mu)
        object.__setattr__(self, "kernels", tuple(self.kernels))
        mu.setflags(write=False)

    @property
    def kernel_weights(self) -> np.ndarray:
        return np.array([k.weight for k in self.kernels])

    @classmethod
    def potts(cls, num_labels: int, kernels, scale: float = 1.0) -> "PairwiseConfig":
        return cls(tuple(kernels), potts_matrix(num_labels, scale))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
