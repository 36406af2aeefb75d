"""Reverse-mode differentiation through the unrolled mean-field iterations.

A Tape records the per-round intermediates of a parallel semantic run
(pixel marginals, per-kernel filter outputs, latent marginals).  ``backward``
replays the rounds in reverse, producing exact gradients of the recorded
T-iteration forward map with respect to the unaries, the kernel mixture
weights, the compatibility matrix, the per-class detection weights, and the
clamped scores feeding the latent-variable unaries.

``gradcheck`` validates the whole chain against central finite differences,
both for the semantic stage alone and composed with instance identification
and the instance CRF.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Detection,
    DetectionParams,
    DistributionField,
    LabelSpace,
    PairwiseConfig,
    UnaryField,
    clamp_score,
    potts_matrix,
    softmax_rows,
)
from .filters import FilterPlan, filter_adjoint
from .instances import IDENTIFY_FLOOR, UNARY_FLOOR, identify_instances


def _adjoint(plan: FilterPlan, grad: np.ndarray) -> np.ndarray:
    # Indirection point so tests can corrupt the adjoint deliberately.
    return filter_adjoint(plan, grad)


def _softmax_backward(q_out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient through row-wise softmax: returns d(logits)."""
    inner = (d_out * q_out).sum(axis=1, keepdims=True)
    return q_out * (d_out - inner)


@dataclass
class _Round:
    q_in: np.ndarray
    y_in: np.ndarray
    filtered: list[np.ndarray]  # per kernel, filter_m(q_in)
    q_out: np.ndarray
    y_out: np.ndarray


class TapeMismatchError(RuntimeError):
    """Tape does not match the settings or shapes it is replayed with."""


class Tape:
    """Forward record of a parallel semantic mean-field run."""

    def __init__(self, unary, dets, config, params, settings):
        self.unary = unary
        self.dets = list(dets)
        self.config = config
        self.params = params
        self.settings = settings
        self.plans: list[FilterPlan] | None = None
        self.rounds: list[_Round] = []
        self.q_final: np.ndarray | None = None
        self.y_final: np.ndarray | None = None

    def record_round(self, q_in, y_in, q_out, y_out, plans):
        if self.plans is None:
            self.plans = plans
        filtered = [plan.apply(q_in) for plan in plans]
        self.rounds.append(
            _Round(q_in.copy(), y_in.copy(), filtered, q_out.copy(), y_out.copy())
        )

    def finalize(self, q, y):
        self.q_final = q.copy()
        self.y_final = y.copy()

    def replay(self) -> tuple[np.ndarray, np.ndarray]:
        """Re-run the recorded forward map; reproduces the outputs bitwise."""
        from .meanfield import init_state, x_update, y_update

        q, y = init_state(self.unary, self.dets, self.params)
        for _ in self.rounds:
            q = x_update(q, y, self.unary, self.plans, self.config,
                         self.dets, self.params)
            y = y_update(q, self.dets, self.params)
        return q, y


@dataclass
class GradientBundle:
    d_unary: np.ndarray
    d_kernel_weights: np.ndarray
    d_compatibility: np.ndarray
    d_class_weights: np.ndarray
    d_y_unary_inputs: np.ndarray

    def groups(self) -> dict[str, np.ndarray]:
        return {
            "unary": self.d_unary,
            "kernel_weights": self.d_kernel_weights,
            "compatibility": self.d_compatibility,
            "class_weights": self.d_class_weights,
            "y_unary_inputs": self.d_y_unary_inputs,
        }

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.groups().values()])


def backward(
    tape: Tape, d_output: np.ndarray, d_y_output: np.ndarray | None = None
) -> GradientBundle:
    """Exact reverse-mode gradients of the recorded forward map.

    ``d_output`` is the upstream gradient on the final pixel marginals
    (N x L); ``d_y_output`` optionally on the final latent marginals.
    """
    if tape.q_final is None or tape.plans is None:
        raise TapeMismatchError("tape was not finalized by a recorded run")
    if d_output.shape != tape.q_final.shape:
        raise TapeMismatchError(
            "upstream gradient shape %s does not match recorded output %s"
            % (d_output.shape, tape.q_final.shape)
        )

    unary = tape.unary
    dets = tape.dets
    params = tape.params
    mu = tape.config.compatibility
    weights = tape.config.kernel_weights
    plans = tape.plans
    coeffs = np.array([params.coefficient(d) for d in dets])
    scores = np.array([clamp_score(d.score) for d in dets])
    sizes = np.array([d.foreground.size for d in dets], dtype=np.float64)
    labels_d = [d.class_label for d in dets]

    d_unary = np.zeros_like(unary.energies)
    d_w = np.zeros(len(plans))
    d_mu = np.zeros_like(mu)
    d_class = np.zeros_like(params.class_weights)
    d_score = np.zeros(len(dets))

    dq = d_output.copy()
    dy = (
        d_y_output.copy()
        if d_y_output is not None
        else np.zeros(len(dets))
    )

    for rnd in reversed(tape.rounds):
        # y_update backward: y_out = sigma(logit(s) + c (2 S - |F|)),
        # S = agreement mass over the foreground of q_out.
        for d, det in enumerate(dets):
            g = dy[d]
            if g == 0.0:
                continue
            yv = rnd.y_out[d]
            gh = g * yv * (1.0 - yv)
            agree = float(rnd.q_out[det.foreground, labels_d[d]].sum())
            dq[det.foreground, labels_d[d]] += gh * 2.0 * coeffs[d]
            dc = gh * (2.0 * agree - sizes[d])
            # c = w_l s / |F| depends on both the class weight and the score.
            d_class[labels_d[d]] += dc * scores[d] / sizes[d]
            d_score[d] += dc * coeffs[d] / scores[d]
            d_score[d] += gh / (scores[d] * (1.0 - scores[d]))

        # x_update backward: q_out = softmax(-U - M mu^T - D).
        dz = _softmax_backward(rnd.q_out, dq)
        d_unary -= dz
        dp = -dz
        mixed = np.zeros_like(rnd.q_in)
        for f, w in zip(rnd.filtered, weights):
            if w != 0.0:
                mixed += w * f
        d_mu += dp.T @ mixed
        dm = dp @ mu
        dq = np.zeros_like(dq)
        for m, (plan, f) in enumerate(zip(plans, rnd.filtered)):
            d_w[m] += float((dm * f).sum())
            if weights[m] != 0.0:
                dq += weights[m] * _adjoint(plan, dm)

        # detection message backward: D_i(l) = c (y + [l = l_d](1 - 2y)).
        dd = -dz
        dy_prev = np.zeros(len(dets))
        for d, det in enumerate(dets):
            block = dd[det.foreground]
            t_all = float(block.sum())
            t_lbl = float(block[:, labels_d[d]].sum())
            y_in = rnd.y_in[d]
            dy_prev[d] = coeffs[d] * (t_all - 2.0 * t_lbl)
            dc = (1.0 - y_in) * t_lbl + y_in * (t_all - t_lbl)
            d_class[labels_d[d]] += dc * scores[d] / sizes[d]
            d_score[d] += dc * coeffs[d] / scores[d]
        dy = dy_prev

    # Initialization: Q_0 = softmax(-U), y_0 = clamped score.
    q0 = softmax_rows(-unary.energies)
    d_unary -= _softmax_backward(q0, dq)
    d_score += dy

    return GradientBundle(d_unary, d_w, d_mu, d_class, d_score)


# ---------------------------------------------------------------------------
# Instance-stage forward/backward used by the composed gradient check.


def instance_rounds_forward(
    identified: np.ndarray,
    plans: list[FilterPlan],
    weights: np.ndarray,
    potts_scale: float,
    iterations: int,
):
    """Mirror of the instance CRF loop that also returns a round tape."""
    mu = potts_matrix(identified.shape[1], potts_scale)
    unary = -np.log(np.maximum(identified, UNARY_FLOOR))
    q = softmax_rows(-unary)
    rounds = []
    for _ in range(iterations):
        filtered = [plan.apply(q) for plan in plans]
        mixed = np.zeros_like(q)
        for f, w in zip(filtered, weights):
            if w != 0.0:
                mixed += w * f
        q_new = softmax_rows(-unary - mixed @ mu.T)
        rounds.append((q, filtered, q_new))
        q = q_new
    return q, (rounds, unary, identified, mu, weights, plans)


def instance_rounds_backward(inst_tape, d_q_final: np.ndarray) -> np.ndarray:
    """Gradient with respect to the identified (pre-log) probabilities."""
    rounds, unary, identified, mu, weights, plans = inst_tape
    dq = d_q_final.copy()
    d_unary = np.zeros_like(unary)
    for q_in, filtered, q_out in reversed(rounds):
        dz = _softmax_backward(q_out, dq)
        d_unary -= dz
        dm = -dz @ mu
        dq = np.zeros_like(dq)
        for w, plan in zip(weights, plans):
            if w != 0.0:
                dq += w * _adjoint(plan, dm)
    q0 = softmax_rows(-unary)
    d_unary -= _softmax_backward(q0, dq)
    # unary = -ln(max(p, floor)); clamped entries pass no gradient.
    clipped = np.maximum(identified, UNARY_FLOOR)
    return np.where(identified > UNARY_FLOOR, -d_unary / clipped, 0.0)


def identify_backward(
    d_identified: np.ndarray,
    identified: np.ndarray,
    mass: np.ndarray,
    q_sem: np.ndarray,
    y: np.ndarray,
    dets: list[Detection],
    labels: LabelSpace,
    grid,
):
    """Backward through mass assembly and row normalization of Eq.-style
    instance identification.  Returns (d_q_sem, d_y)."""
    rowsum = mass.sum(axis=1, keepdims=True)
    inner = (d_identified * identified).sum(axis=1, keepdims=True)
    d_mass = (d_identified - inner) / rowsum

    d_q = np.zeros_like(q_sem)
    d_y = np.zeros(len(dets))
    bg = labels.background_index
    open_bg = q_sem[:, bg] > IDENTIFY_FLOOR
    d_q[open_bg, bg] += d_mass[open_bg, 0]
    for k, det in enumerate(dets, start=1):
        px = grid.box_indices(det.box)
        raw = q_sem[px, det.class_label] * y[k - 1]
        passthrough = raw > IDENTIFY_FLOOR
        sel = px[passthrough]
        d_q[sel, det.class_label] += d_mass[sel, k] * y[k - 1]
        d_y[k - 1] += float(
            (d_mass[sel, k] * q_sem[sel, det.class_label]).sum()
        )
    return d_q, d_y


# ---------------------------------------------------------------------------
# Gradient checking against central finite differences.


@dataclass(frozen=True)
class GradCheckInstance:
    """Everything needed to rebuild the forward map from raw parameters."""

    grid_shape: tuple[int, int] = (6, 6)
    num_foreground: int = 2
    iterations: int = 3
    seed: int = 0
    composed: bool = False
    instance_iterations: int = 2
    instance_weights: tuple[float, ...] = (0.6, 0.4)
    instance_potts: float = 0.8


@dataclass
class GradCheckReport:
    group_errors: dict[str, float]
    dot_product_error: float
    tolerance: float
    dot_tolerance: float = 1e-4
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(
            np.isfinite(e) and e <= self.tolerance
            for e in self.group_errors.values()
        ) and self.dot_product_error <= self.dot_tolerance

    def format_table(self) -> str:
        lines = ["%-16s %12s %s" % ("group", "max rel err", "status")]
        for name, err in self.group_errors.items():
            status = "PASS" if err <= self.tolerance else "FAIL"
            lines.append("%-16s %12.3e %s" % (name, err, status))
        lines.append(
            "%-16s %12.3e" % ("dot-product", self.dot_product_error)
        )
        lines.append("overall: %s (tolerance %.1e)"
                     % ("PASS" if self.passed else "FAIL", self.tolerance))
        return "\n".join(lines)


def _build_problem(spec: GradCheckInstance):
    from .core import KernelSpec, PixelGrid
    from .filters import build_plans

    rng = np.random.default_rng(spec.seed)
    w, h = spec.grid_shape
    grid = PixelGrid(w, h)
    labels = LabelSpace(spec.num_foreground)
    n, nl = grid.num_pixels, labels.total

    image = rng.uniform(0, 255, (h, w, 3))
    kernels = (
        KernelSpec("spatial", weight=0.7, theta_gamma=1.5),
        KernelSpec("bilateral", weight=0.4, theta_alpha=3.0, theta_beta=40.0),
    )
    plans = build_plans(kernels, grid, image, backend="brute")

    theta = {
        "unary": rng.normal(0.0, 1.0, (n, nl)),
        "kernel_weights": np.array([k.weight for k in kernels]),
        "compatibility": potts_matrix(nl) + rng.normal(0, 0.05, (nl, nl)),
        # Entry 0 (background) is never used by any detection; kept strictly
        # positive so central differences stay inside the valid domain.
        "class_weights": np.concatenate([[0.5], rng.uniform(0.5, 1.5, nl - 1)]),
        "y_unary_inputs": np.array([0.7, 0.4]),
    }
    boxes = [(0, 0, 3, 3), (2, 2, 6, 5)]
    det_classes = [1, 2]
    fgs = [grid.box_indices(b) for b in boxes]
    fixed = {
        "grid": grid,
        "labels": labels,
        "kernels": kernels,
        "plans": plans,
        "boxes": boxes,
        "det_classes": det_classes,
        "foregrounds": fgs,
        "iterations": spec.iterations,
        "spec": spec,
    }
    return theta, fixed


def _assemble(theta, fixed):
    from .meanfield import InferenceSettings, run

    kernels = tuple(
        type(k)(k.kind, float(w), k.theta_gamma, k.theta_alpha, k.theta_beta)
        for k, w in zip(fixed["kernels"], theta["kernel_weights"])
    )
    config = PairwiseConfig(kernels, theta["compatibility"].copy())
    params = DetectionParams(theta["class_weights"].copy())
    dets = [
        Detection(c, float(s), b, f)
        for c, s, b, f in zip(
            fixed["det_classes"],
            theta["y_unary_inputs"],
            fixed["boxes"],
            fixed["foregrounds"],
        )
    ]
    unary = UnaryField(fixed["grid"], fixed["labels"], theta["unary"].copy())
    settings = InferenceSettings(iterations=fixed["iterations"], record_tape=True)
    return unary, dets, config, params, settings


def _forward(theta, fixed, want_tape=False):
    """Semantic run (optionally composed with the instance stage).

    Returns (outputs, tape_info); outputs is (q, y) or the instance marginals.
    """
    from .meanfield import run

    unary, dets, config, params, settings = _assemble(theta, fixed)
    result = run(unary, dets, config, params, settings, plans=fixed["plans"])
    q_sem = result.q.q
    y = result.y_marginals
    spec = fixed["spec"]
    if not spec.composed:
        return (q_sem, y), result.tape if want_tape else None

    identified, space = identify_instances(result.q, result.detections,
                                           fixed["labels"])
    mass = _identify_mass(q_sem, y, result.detections, fixed)
    q_inst, inst_tape = instance_rounds_forward(
        identified.q,
        fixed["plans"],
        np.asarray(spec.instance_weights),
        spec.instance_potts,
        spec.instance_iterations,
    )
    if want_tape:
        return (q_inst,), (result.tape, inst_tape, identified.q, mass,
                           q_sem, y, result.detections)
    return (q_inst,), None


def _identify_mass(q_sem, y, dets, fixed):
    """Unnormalized identification masses (kept for normalization backward)."""
    grid = fixed["grid"]
    labels = fixed["labels"]
    mass = np.zeros((q_sem.shape[0], len(dets) + 1))
    mass[:, 0] = np.maximum(q_sem[:, labels.background_index], IDENTIFY_FLOOR)
    for k, det in enumerate(dets, start=1):
        px = grid.box_indices(det.box)
        mass[px, k] = np.maximum(
            q_sem[px, det.class_label] * y[k - 1], IDENTIFY_FLOOR
        )
    return mass


def _loss_and_grad(theta, fixed, g_q, g_y):
    outputs, tapes = _forward(theta, fixed, want_tape=True)
    spec = fixed["spec"]
    if not spec.composed:
        q, y = outputs
        loss = float((g_q * q).sum() + (g_y * y).sum())
        bundle = backward(tapes, g_q, g_y)
        return loss, bundle
    (q_inst,) = outputs
    sem_tape, inst_tape, identified, mass, q_sem, y, dets = tapes
    loss = float((g_q * q_inst).sum())
    d_ident = instance_rounds_backward(inst_tape, g_q)
    d_q_sem, d_y = identify_backward(
        d_ident, identified, mass, q_sem, y, dets,
        fixed["labels"], fixed["grid"],
    )
    bundle = backward(sem_tape, d_q_sem, d_y)
    return loss, bundle


def _loss_only(theta, fixed, g_q, g_y):
    outputs, _ = _forward(theta, fixed)
    spec = fixed["spec"]
    if not spec.composed:
        q, y = outputs
        return float((g_q * q).sum() + (g_y * y).sum())
    return float((g_q * outputs[0]).sum())


def _fd_group(theta, fixed, g_q, g_y, name):
    base = theta[name]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        step = 1e-5 * max(1.0, abs(base[idx]))
        saved = base[idx]
        base[idx] = saved + step
        fp = _loss_only(theta, fixed, g_q, g_y)
        base[idx] = saved - step
        fm = _loss_only(theta, fixed, g_q, g_y)
        base[idx] = saved
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(
    spec: GradCheckInstance = GradCheckInstance(),
    tolerance: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences, plus a
    dot-product (Jacobian adjoint) consistency test."""
    theta, fixed = _build_problem(spec)
    rng = np.random.default_rng(spec.seed + 1)

    outputs, _ = _forward(theta, fixed)
    if spec.composed:
        g_q = rng.normal(size=outputs[0].shape)
        g_y = np.zeros(0)
    else:
        g_q = rng.normal(size=outputs[0].shape)
        g_y = rng.normal(size=outputs[1].shape)

    _, bundle = _loss_and_grad(theta, fixed, g_q, g_y)
    groups = bundle.groups()

    errors = {}
    for name in theta:
        fd = _fd_group(theta, fixed, g_q, g_y, name)
        an = groups[name]
        if not np.all(np.isfinite(an)):
            raise FloatingPointError(
                "non-finite analytic gradient in group %r" % name
            )
        errors[name] = _rel_err(an, fd)

    # Dot-product test: <J u, v> by finite differences vs <u, J^T v>.
    direction = {
        name: rng.normal(size=theta[name].shape) for name in theta
    }
    eps = 1e-6
    theta_p = {k: theta[k] + eps * direction[k] for k in theta}
    theta_m = {k: theta[k] - eps * direction[k] for k in theta}
    fp = _loss_only(theta_p, fixed, g_q, g_y)
    fm = _loss_only(theta_m, fixed, g_q, g_y)
    lhs = (fp - fm) / (2.0 * eps)
    rhs = sum(
        float((groups[name] * direction[name]).sum()) for name in theta
    )
    dot_err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-8)

    return GradCheckReport(errors, dot_err, tolerance)
