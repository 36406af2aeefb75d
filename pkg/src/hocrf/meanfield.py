"""Mean-field inference for the detection-augmented dense CRF.

Parallel mode updates all pixel marginals simultaneously from the previous
round (filter-based message passing), then refreshes every detection's latent
validity marginal from the new pixel marginals.  Sequential mode performs true
coordinate ascent one variable at a time, which makes the free energy
non-increasing and is used for monotonicity testing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Detection,
    DetectionParams,
    DistributionField,
    Labeling,
    PairwiseConfig,
    UnaryField,
    clamp_score,
    softmax_rows,
)
from .energy import free_energy
from .filters import FilterPlan


@dataclass(frozen=True)
class InferenceSettings:
    iterations: int = 5
    mode: str = "parallel"
    epsilon: float = 0.0  # early stop on max |dQ|; 0 disables
    record_tape: bool = False
    track_free_energy: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.mode not in ("parallel", "sequential"):
            raise ValueError("unknown mode %r" % self.mode)


@dataclass
class SemanticResult:
    q: DistributionField
    detections: list[Detection]  # y_marginal updated in place of the inputs
    iterations_run: int
    free_energy: float | None = None
    free_energy_trace: list[float] | None = None
    tape: object | None = None

    @property
    def y_marginals(self) -> np.ndarray:
        return np.array([d.y_marginal for d in self.detections])


def init_state(
    unary: UnaryField, dets: list[Detection], params: DetectionParams
) -> tuple[np.ndarray, np.ndarray]:
    """Q = softmax(-unary); y marginals start at the clamped detector scores."""
    q = softmax_rows(-unary.energies)
    y = np.array([clamp_score(d.score) for d in dets])
    return q, y


def detection_message(
    q_shape: tuple[int, int],
    y: np.ndarray,
    dets: list[Detection],
    params: DetectionParams,
) -> np.ndarray | None:
    """Per-pixel detection energies D_i(l); None when every clique is inert.

    D_i(l) = sum over detections covering i of
             w_l * s_d / |F_d| * ([l = l_d](1 - y_d) + [l != l_d] y_d).
    """
    if not dets:
        return None
    coeffs = [params.coefficient(d) for d in dets]
    if all(c == 0.0 for c in coeffs):
        return None
    msg = np.zeros(q_shape)
    for det, coeff, yd in zip(dets, coeffs, y):
        if coeff == 0.0:
            continue
        msg[det.foreground, :] += coeff * yd
        msg[det.foreground, det.class_label] += coeff * (1.0 - 2.0 * yd)
    return msg


def pairwise_message(
    q: np.ndarray, plans: list[FilterPlan], weights: np.ndarray, mu: np.ndarray
) -> np.ndarray:
    """P_i(l) = sum_l' mu(l, l') sum_m w_m filter_m(Q(:, l'))_i."""
    mixed = np.zeros_like(q)
    for plan, w in zip(plans, weights):
        if w != 0.0:
            mixed += w * plan.apply(q)
    return mixed @ mu.T


def x_update(
    q: np.ndarray,
    y: np.ndarray,
    unary: UnaryField,
    plans: list[FilterPlan],
    config: PairwiseConfig,
    dets: list[Detection],
    params: DetectionParams,
) -> np.ndarray:
    """One parallel pixel-marginal update; rows renormalized by softmax."""
    logits = -unary.energies - pairwise_message(
        q, plans, config.kernel_weights, config.compatibility
    )
    msg = detection_message(q.shape, y, dets, params)
    if msg is not None:
        logits = logits - msg
    return softmax_rows(logits)


def y_update(
    q: np.ndarray, dets: list[Detection], params: DetectionParams
) -> np.ndarray:
    """Latent-validity update.  With agreement mass S = sum_{i in F} Q_i(l_d),
    the new marginal is sigma(logit(s) + c * (2 S - |F|)), which leaves the
    score unchanged under symmetric evidence."""
    out = np.empty(len(dets))
    for d, det in enumerate(dets):
        s = clamp_score(det.score)
        coeff = params.coefficient(det)
        agree = float(q[det.foreground, det.class_label].sum())
        h = np.log(s) - np.log1p(-s) + coeff * (2.0 * agree - det.foreground.size)
        out[d] = 1.0 / (1.0 + np.exp(-h))
    return out


def decode(q: DistributionField) -> Labeling:
    """Per-pixel argmax; ties break toward the lowest label index."""
    x = np.argmax(q.q, axis=1)
    return Labeling(q.grid, q.num_labels, x)


def _sequential_sweep(
    q, y, unary, pair_kernel, mu, dets, params, trace, track
):
    """One raster-order coordinate-ascent sweep over pixels then detections.

    Uses the exact kernel matrix, so each step minimizes the free energy over
    one coordinate.
    """
    n = q.shape[0]
    coeffs = [params.coefficient(d) for d in dets]
    for i in range(n):
        logits = -unary.energies[i] - mu @ (pair_kernel[i] @ q)
        for det, coeff, yd in zip(dets, coeffs, y):
            if coeff == 0.0 or i not in det.foreground:
                continue
            logits -= coeff * yd
            logits[det.class_label] -= coeff * (1.0 - 2.0 * yd)
        shifted = logits - logits.max()
        e = np.exp(shifted)
        q[i] = e / e.sum()
        if track:
            trace.append(
                free_energy(
                    DistributionField(unary.grid, q.copy()),
                    y, unary, pair_kernel, mu, dets, params,
                )
            )
    for d in range(len(dets)):
        y[d] = y_update(q, [dets[d]], params)[0]
        if track:
            trace.append(
                free_energy(
                    DistributionField(unary.grid, q.copy()),
                    y, unary, pair_kernel, mu, dets, params,
                )
            )


def run(
    unary: UnaryField,
    dets: list[Detection],
    config: PairwiseConfig,
    params: DetectionParams,
    settings: InferenceSettings = InferenceSettings(),
    plans: list[FilterPlan] | None = None,
    pair_kernel: np.ndarray | None = None,
) -> SemanticResult:
    """Run mean-field inference.

    Parallel mode needs ``plans`` (one per kernel); sequential mode needs the
    explicit ``pair_kernel`` matrix.  Returns marginals, detections with
    recalibrated scores, and optionally the free-energy trace or a gradient
    tape (see hocrf.autodiff).
    """
    if settings.mode == "sequential":
        if pair_kernel is None:
            raise ValueError("sequential mode requires pair_kernel")
        return _run_sequential(unary, dets, pair_kernel, config, params, settings)
    if plans is None:
        raise ValueError("parallel mode requires filter plans")
    if len(plans) != len(config.kernels):
        raise ValueError("one plan per kernel required")

    tape = None
    if settings.record_tape:
        from .autodiff import Tape

        tape = Tape(unary, dets, config, params, settings)

    q, y = init_state(unary, dets, params)
    iterations = 0
    for _ in range(settings.iterations):
        q_new = x_update(q, y, unary, plans, config, dets, params)
        y_new = y_update(q_new, dets, params)
        if tape is not None:
            tape.record_round(q, y, q_new, y_new, plans)
        delta = float(np.abs(q_new - q).max())
        q, y = q_new, y_new
        iterations += 1
        if settings.epsilon > 0 and delta < settings.epsilon:
            break

    field = DistributionField(unary.grid, q)
    new_dets = [d.with_y(y[k]) for k, d in enumerate(dets)]
    fe = None
    if settings.track_free_energy and pair_kernel is not None:
        fe = free_energy(field, y, unary, pair_kernel,
                         config.compatibility, dets, params)
    if tape is not None:
        tape.finalize(q, y)
    return SemanticResult(field, new_dets, iterations, fe, None, tape)


def _run_sequential(unary, dets, pair_kernel, config, params, settings):
    mu = config.compatibility
    q, y = init_state(unary, dets, params)
    trace: list[float] = []
    track = settings.track_free_energy
    if track:
        trace.append(
            free_energy(
                DistributionField(unary.grid, q.copy()),
                y, unary, pair_kernel, mu, dets, params,
            )
        )
    for sweep in range(settings.iterations):
        q_before = q.copy()
        _sequential_sweep(q, y, unary, pair_kernel, mu, dets, params, trace, track)
        if settings.epsilon > 0 and float(np.abs(q - q_before).max()) < settings.epsilon:
            break
    field = DistributionField(unary.grid, q)
    new_dets = [d.with_y(y[k]) for k, d in enumerate(dets)]
    fe = trace[-1] if track else None
    return SemanticResult(field, new_dets, sweep + 1, fe, trace if track else None, None)


def fixed_point_residual(
    result: SemanticResult,
    unary: UnaryField,
    plans: list[FilterPlan],
    config: PairwiseConfig,
    params: DetectionParams,
) -> float:
    """Max |change| of one extra parallel round; ~0 at a mean-field fixed point."""
    q = result.q.q
    y = result.y_marginals
    q2 = x_update(q, y, unary, plans, config, result.detections, params)
    y2 = y_update(q2, result.detections, params)
    res = float(np.abs(q2 - q).max())
    if y.size:
        res = max(res, float(np.abs(y2 - y).max()))
    return res
