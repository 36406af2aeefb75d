"""Energies, the variational free energy, and the exhaustive tiny-graph oracle."""

import itertools

import numpy as np
import pytest

from hocrf.core import (
    DegenerateDetectionError,
    Detection,
    DetectionParams,
    DistributionField,
    LabelSpace,
    Labeling,
    PixelGrid,
    UnaryField,
    clamp_score,
    potts_matrix,
    softmax_rows,
    y_unary_pair,
)
from hocrf.energy import (
    OracleTooLargeError,
    detection_clique_energy,
    exact_marginals_bruteforce,
    free_energy,
    total_energy,
)

from conftest import make_problem, problem_kernel

BG, PERSON, CAR = 0, 1, 2


def _person_detection(score=0.8, n=4):
    grid = PixelGrid(n, 1)
    return Detection(PERSON, score, (0, 0, n, 1), np.arange(n))


class TestDetectionCliqueEnergy:
    def setup_method(self):
        self.labels = LabelSpace(2)
        self.params = DetectionParams.uniform(self.labels, 1.0)
        self.det = _person_detection()

    def test_all_agree_invalid_state(self):
        # y=0 with every foreground pixel labeled person costs w * s_d
        x = np.full(4, PERSON)
        assert detection_clique_energy(self.det, x, 0, self.params) == pytest.approx(0.8)

    def test_all_agree_valid_state(self):
        x = np.full(4, PERSON)
        assert detection_clique_energy(self.det, x, 1, self.params) == 0.0

    def test_partial_disagreement(self):
        # 3 of 4 pixels disagree: 1 * 0.8 / 4 * 3
        x = np.array([PERSON, CAR, CAR, BG])
        assert detection_clique_energy(self.det, x, 1, self.params) == pytest.approx(0.6)

    def test_partition_identity(self, rng):
        # the agree/disagree counts partition F_d, so the two branches always
        # sum to w * s_d
        for _ in range(20):
            x = rng.integers(0, 3, size=4)
            e0 = detection_clique_energy(self.det, x, 0, self.params)
            e1 = detection_clique_energy(self.det, x, 1, self.params)
            assert e0 + e1 == pytest.approx(1.0 * self.det.score)

    def test_empty_foreground_rejected(self):
        with pytest.raises(DegenerateDetectionError):
            Detection(PERSON, 0.8, (0, 0, 1, 1), np.array([], dtype=np.int64))

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            detection_clique_energy(self.det, np.zeros(3), 0, self.params)


class TestScoreHandling:
    def test_clamp(self):
        assert clamp_score(0.0) == 1e-6
        assert clamp_score(1.0) == 1.0 - 1e-6
        assert clamp_score(0.42) == 0.42

    def test_y_unary_fixed_point_form(self):
        # pair is (-ln(1-s), -ln s): softmax of the negated pair returns s
        psi0, psi1 = y_unary_pair(0.8)
        p1 = np.exp(-psi1) / (np.exp(-psi0) + np.exp(-psi1))
        assert p1 == pytest.approx(0.8, abs=1e-12)


class TestTotalEnergy:
    def test_all_zero(self):
        grid = PixelGrid(2, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.zeros((2, 2)))
        lab = Labeling(grid, 2, np.zeros(2, dtype=np.int64))
        e = total_energy(lab, np.zeros(0), unary, np.zeros((2, 2)),
                         potts_matrix(2), [], DetectionParams.uniform(labels))
        assert e == 0.0

    def test_single_pixel_unary(self):
        grid = PixelGrid(1, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.array([[0.3, 1.0]]))
        lab = Labeling(grid, 2, np.array([0]))
        e = total_energy(lab, np.zeros(0), unary, np.zeros((1, 1)),
                         potts_matrix(2), [], DetectionParams.uniform(labels))
        assert e == pytest.approx(0.3)

    def test_single_disagreement_pair(self):
        # 2x1 grid, Potts, unit kernel entry between the pixels, differing
        # labels, zero unaries: energy equals the pairwise weight
        grid = PixelGrid(2, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.zeros((2, 2)))
        w1 = 0.7
        k = np.array([[0.0, w1], [w1, 0.0]])
        lab = Labeling(grid, 2, np.array([0, 1]))
        e = total_energy(lab, np.zeros(0), unary, k, potts_matrix(2), [],
                         DetectionParams.uniform(labels))
        assert e == pytest.approx(w1)

    def test_agreeing_pair_costs_nothing(self):
        grid = PixelGrid(2, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.zeros((2, 2)))
        k = np.array([[0.0, 0.7], [0.7, 0.0]])
        lab = Labeling(grid, 2, np.array([1, 1]))
        e = total_energy(lab, np.zeros(0), unary, k, potts_matrix(2), [],
                         DetectionParams.uniform(labels))
        assert e == 0.0


def _naive_free_energy(q, y, unary, kernel, mu, dets, params):
    """Independent reference: enumerate every joint (x, y) state, weight by
    the factorized Q, and add the exact entropy term."""
    n, num_labels = q.shape
    e = 0.0
    for state in itertools.product(range(num_labels), repeat=n):
        x = np.asarray(state)
        px = float(np.prod(q[np.arange(n), x]))
        if px == 0.0:
            continue
        for ys in itertools.product((0, 1), repeat=len(dets)):
            py = 1.0
            for d, yv in enumerate(ys):
                py *= y[d] if yv else (1.0 - y[d])
            if py == 0.0:
                continue
            lab = Labeling(unary.grid, num_labels, x)
            e += px * py * total_energy(lab, np.asarray(ys), unary, kernel,
                                        mu, dets, params)
    h = 0.0
    for p in q.ravel():
        if p > 0:
            h -= p * np.log(p)
    for yd in y:
        for p in (yd, 1.0 - yd):
            if p > 0:
                h -= p * np.log(p)
    return e - h


class TestFreeEnergy:
    def test_one_hot_equals_total_energy(self, rng):
        grid, labels, unary, config, dets, params = make_problem(rng, 2, 2)
        kernel = problem_kernel(grid, config)
        x = rng.integers(0, labels.total, size=grid.num_pixels)
        q = np.zeros((grid.num_pixels, labels.total))
        q[np.arange(grid.num_pixels), x] = 1.0
        y = np.array([0.0])
        fe = free_energy(DistributionField(grid, q), y, unary, kernel,
                         config.compatibility, dets, params)
        te = total_energy(Labeling(grid, labels.total, x), np.array([0]),
                          unary, kernel, config.compatibility, dets, params)
        assert fe == pytest.approx(te, abs=1e-12)

    def test_pure_entropy_case(self):
        # uniform Q over 2 labels, one pixel, all energies zero: F = -ln 2
        grid = PixelGrid(1, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.zeros((1, 2)))
        q = DistributionField(grid, np.array([[0.5, 0.5]]))
        fe = free_energy(q, np.zeros(0), unary, np.zeros((1, 1)),
                         potts_matrix(2), [], DetectionParams.uniform(labels))
        assert fe == pytest.approx(-np.log(2.0), abs=1e-14)

    def test_matches_enumeration_reference(self, rng):
        for _ in range(5):
            grid, labels, unary, config, dets, params = make_problem(rng, 2, 2)
            kernel = problem_kernel(grid, config)
            q = softmax_rows(rng.normal(size=(grid.num_pixels, labels.total)))
            y = rng.uniform(0.05, 0.95, size=len(dets))
            fe = free_energy(DistributionField(grid, q), y, unary, kernel,
                             config.compatibility, dets, params)
            ref = _naive_free_energy(q, y, unary, kernel,
                                     config.compatibility, dets, params)
            assert fe == pytest.approx(ref, rel=1e-10)


class TestExactOracle:
    def test_zero_energies_uniform(self):
        grid = PixelGrid(2, 1)
        labels = LabelSpace(2)
        unary = UnaryField(grid, labels, np.zeros((2, 3)))
        det = Detection(1, 0.5, (0, 0, 2, 1), np.arange(2))
        params = DetectionParams.uniform(labels, 0.0)
        # w=0 decouples the detection; its unary at s=0.5 is symmetric too
        field, y, log_z = exact_marginals_bruteforce(
            unary, np.zeros((2, 2)), potts_matrix(3), [det], params)
        assert np.allclose(field.q, 1.0 / 3.0, atol=1e-12)
        assert y[0] == pytest.approx(0.5, abs=1e-12)
        # Z = L^N * 2^D * (1/2)^D here because the y unary pair sums to 1
        assert log_z == pytest.approx(2 * np.log(3.0), abs=1e-10)

    def test_single_pixel_softmax(self):
        grid = PixelGrid(1, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.array([[0.0, np.log(3.0)]]))
        field, _, _ = exact_marginals_bruteforce(
            unary, np.zeros((1, 1)), potts_matrix(2), [],
            DetectionParams.uniform(labels))
        assert np.allclose(field.q, [[0.75, 0.25]], atol=1e-12)

    def test_two_pixel_potts_hand_table(self):
        # 2x1 grid, kernel entry k, Potts scale m: states (0,0) and (1,1) have
        # weight exp(-u), mixed states exp(-u - k*m); hand-normalize
        grid = PixelGrid(2, 1)
        labels = LabelSpace(1)
        u = np.array([[0.2, 0.5], [0.1, 0.3]])
        unary = UnaryField(grid, labels, u)
        k, m = 0.6, 1.0
        kernel = np.array([[0.0, k], [k, 0.0]])
        weights = {}
        for s0 in (0, 1):
            for s1 in (0, 1):
                e = u[0, s0] + u[1, s1] + (k * m if s0 != s1 else 0.0)
                weights[(s0, s1)] = np.exp(-e)
        z = sum(weights.values())
        field, _, log_z = exact_marginals_bruteforce(
            unary, kernel, potts_matrix(2, m), [],
            DetectionParams.uniform(labels))
        assert log_z == pytest.approx(np.log(z), abs=1e-12)
        p00 = (weights[(0, 0)] + weights[(0, 1)]) / z
        assert field.q[0, 0] == pytest.approx(p00, abs=1e-12)
        p10 = (weights[(0, 0)] + weights[(1, 0)]) / z
        assert field.q[1, 0] == pytest.approx(p10, abs=1e-12)

    def test_refuses_large_instances(self):
        grid = PixelGrid(8, 8)
        labels = LabelSpace(2)
        unary = UnaryField(grid, labels, np.zeros((64, 3)))
        with pytest.raises(OracleTooLargeError):
            exact_marginals_bruteforce(unary, np.zeros((64, 64)),
                                       potts_matrix(3), [],
                                       DetectionParams.uniform(labels))

    def test_free_energy_upper_bounds_neg_log_z(self, rng):
        # the variational bound: F(Q) >= -log Z for any normalized Q
        for _ in range(10):
            grid, labels, unary, config, dets, params = make_problem(rng, 2, 2)
            kernel = problem_kernel(grid, config)
            _, _, log_z = exact_marginals_bruteforce(
                unary, kernel, config.compatibility, dets, params)
            q = softmax_rows(rng.normal(size=(grid.num_pixels, labels.total)))
            y = rng.uniform(0.05, 0.95, size=len(dets))
            fe = free_energy(DistributionField(grid, q), y, unary, kernel,
                             config.compatibility, dets, params)
            assert fe >= -log_z - 1e-10
