"""Energies and exact oracles for the detection-augmented dense CRF.

The energy of a joint assignment (x, y) is

    E(x, y) = sum_i U_i(x_i)
            + sum_{i<j} W_ij * mu(x_i, x_j)
            + sum_d clique_d(x on F_d, y_d)
            + sum_d yU_d(y_d)

where W is the weighted sum of Gaussian kernel matrices (zero diagonal) and
mu the label-compatibility matrix.  Everything here is O(N^2 L) or worse and
exists for tests and oracles, not production inference.
"""

from __future__ import annotations

import itertools

import numpy as np

from .core import (
    Detection,
    DetectionParams,
    DistributionField,
    Labeling,
    UnaryField,
    y_unary_pair,
)

# Enumeration guard: L^N * 2^D state spaces beyond this are refused.
MAX_ORACLE_BITS = 20.0


def _xlogx(p: np.ndarray) -> np.ndarray:
    """p * log(p) with the 0 log 0 = 0 convention."""
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def detection_clique_energy(
    det: Detection, x_on_f: np.ndarray, y: int, params: DetectionParams
) -> float:
    """Energy of one detection clique for labels ``x_on_f`` over F_d and the
    latent state y: penalizes agreement with l_d when y=0 and disagreement
    when y=1, scaled by w_l * s_d / |F_d|."""
    x_on_f = np.asarray(x_on_f)
    if x_on_f.shape != (det.foreground.size,):
        raise ValueError("x_on_f must cover exactly the foreground pixels")
    coeff = params.coefficient(det)
    agree = int(np.count_nonzero(x_on_f == det.class_label))
    if y == 0:
        return coeff * agree
    return coeff * (x_on_f.size - agree)


def total_energy(
    labeling: Labeling,
    y: np.ndarray,
    unary: UnaryField,
    pair_kernel: np.ndarray,
    mu: np.ndarray,
    dets: list[Detection],
    params: DetectionParams,
) -> float:
    """Exact E(x, y).  ``pair_kernel`` is the combined weighted kernel matrix
    with zero diagonal; the i<j sum is half its full contraction."""
    x = labeling.x
    n = x.size
    if pair_kernel.shape != (n, n):
        raise ValueError("pair_kernel shape mismatch")
    e = float(unary.energies[np.arange(n), x].sum())
    e += 0.5 * float(mu[x[:, None], x[None, :]].ravel() @ pair_kernel.ravel())
    for d, det in enumerate(dets):
        e += detection_clique_energy(det, x[det.foreground], int(y[d]), params)
        psi0, psi1 = y_unary_pair(det.score)
        e += psi1 if y[d] else psi0
    return e


def expected_detection_energies(
    q: np.ndarray, det: Detection, params: DetectionParams
) -> tuple[float, float]:
    """(E_Q[clique | y=0], E_Q[clique | y=1]) under a factorized Q."""
    coeff = params.coefficient(det)
    agree = float(q[det.foreground, det.class_label].sum())
    return coeff * agree, coeff * (det.foreground.size - agree)


def free_energy(
    q: DistributionField,
    y_marginals: np.ndarray,
    unary: UnaryField,
    pair_kernel: np.ndarray,
    mu: np.ndarray,
    dets: list[Detection],
    params: DetectionParams,
) -> float:
    """Variational free energy E_Q[E(x, y)] - H(Q) of the factorized family.

    Upper-bounds -log Z; non-increasing under sequential coordinate updates.
    """
    qm = q.q
    e = float((qm * unary.energies).sum())
    # 0.5 * sum_{l,l'} mu(l,l') q_l^T W q_l'
    s = qm.T @ pair_kernel @ qm
    e += 0.5 * float((mu * s).sum())
    y = np.asarray(y_marginals, dtype=np.float64)
    for d, det in enumerate(dets):
        a, b = expected_detection_energies(qm, det, params)
        e += (1.0 - y[d]) * a + y[d] * b
        psi0, psi1 = y_unary_pair(det.score)
        e += y[d] * psi1 + (1.0 - y[d]) * psi0
    entropy = -float(_xlogx(qm).sum())
    entropy -= float(_xlogx(y).sum() + _xlogx(1.0 - y).sum())
    return e - entropy


class OracleTooLargeError(ValueError):
    """Exhaustive enumeration refused: state space too large."""


def exact_marginals_bruteforce(
    unary: UnaryField,
    pair_kernel: np.ndarray,
    mu: np.ndarray,
    dets: list[Detection],
    params: DetectionParams,
):
    """Exact pixel and Y marginals plus log Z by enumerating all label
    assignments.  Detections factorize given x, so the 2^D sum is carried
    analytically per assignment.

    Returns (DistributionField, y_marginals, log_z).
    """
    n = unary.grid.num_pixels
    num_labels = unary.labels.total
    d_count = len(dets)
    bits = n * np.log2(num_labels) + d_count
    if bits > MAX_ORACLE_BITS:
        raise OracleTooLargeError(
            "state space of ~2^%.1f exceeds the 2^%.0f oracle limit"
            % (bits, MAX_ORACLE_BITS)
        )

    psi_pairs = [y_unary_pair(det.score) for det in dets]
    coeffs = [params.coefficient(det) for det in dets]

    log_weights = []
    det_log_pair = []  # per state: list of (log phi_{y=0}, log phi_{y=1})
    states = list(itertools.product(range(num_labels), repeat=n))
    idx = np.arange(n)
    for state in states:
        x = np.asarray(state)
        e = float(unary.energies[idx, x].sum())
        e += 0.5 * float(mu[x[:, None], x[None, :]].ravel() @ pair_kernel.ravel())
        log_weights.append(-e)
        per_det = []
        for det, (psi0, psi1), coeff in zip(dets, psi_pairs, coeffs):
            agree = int(np.count_nonzero(x[det.foreground] == det.class_label))
            e0 = coeff * agree + psi0
            e1 = coeff * (det.foreground.size - agree) + psi1
            per_det.append((-e0, -e1))
        det_log_pair.append(per_det)

    # log of the per-state weight with detections summed out
    log_w = np.asarray(log_weights)
    det_lse = np.zeros(len(states))
    for si in range(len(states)):
        for l0, l1 in det_log_pair[si]:
            det_lse[si] += np.logaddexp(l0, l1)
    log_total = log_w + det_lse
    shift = log_total.max()
    w = np.exp(log_total - shift)
    z = w.sum()
    log_z = shift + np.log(z)

    marg = np.zeros((n, num_labels))
    for si, state in enumerate(states):
        marg[idx, np.asarray(state)] += w[si]
    marg /= z

    y_marg = np.zeros(d_count)
    for di in range(d_count):
        for si in range(len(states)):
            l0, l1 = det_log_pair[si][di]
            p1 = np.exp(l1 - np.logaddexp(l0, l1))
            y_marg[di] += w[si] * p1
    y_marg /= z

    field = DistributionField(unary.grid, marg)
    return field, y_marg, float(log_z)
