"""Mean-field updates: hand values, reductions, monotonicity, fixed points."""

import numpy as np
import pytest

from hocrf.core import (
    Detection,
    DetectionParams,
    DistributionField,
    KernelSpec,
    LabelSpace,
    PairwiseConfig,
    PixelGrid,
    UnaryField,
    potts_matrix,
    softmax_rows,
)
from hocrf.energy import exact_marginals_bruteforce, free_energy
from hocrf.filters import build_plans
from hocrf.meanfield import (
    InferenceSettings,
    decode,
    detection_message,
    fixed_point_residual,
    init_state,
    run,
    x_update,
    y_update,
)

from conftest import make_problem, problem_kernel, problem_plans


def _simple(num_foreground=1, n=4, score=0.8, weight=1.0):
    grid = PixelGrid(n, 1)
    labels = LabelSpace(num_foreground)
    det = Detection(1, score, (0, 0, n, 1), np.arange(n))
    params = DetectionParams.uniform(labels, weight)
    return grid, labels, det, params


class TestInitState:
    def test_softmax_row(self):
        grid = PixelGrid(1, 1)
        labels = LabelSpace(1)
        unary = UnaryField(grid, labels, np.array([[0.0, np.log(3.0)]]))
        q, _ = init_state(unary, [], DetectionParams.uniform(labels))
        np.testing.assert_allclose(q, [[0.75, 0.25]], atol=1e-12)

    def test_y_starts_at_score(self):
        grid, labels, det, params = _simple()
        unary = UnaryField(grid, labels, np.zeros((4, 2)))
        _, y = init_state(unary, [det], params)
        assert y[0] == 0.8

    def test_zero_unary_uniform(self):
        grid = PixelGrid(3, 2)
        labels = LabelSpace(2)
        unary = UnaryField(grid, labels, np.zeros((6, 3)))
        q, _ = init_state(unary, [], DetectionParams.uniform(labels))
        np.testing.assert_allclose(q, 1.0 / 3.0, atol=1e-14)


class TestXUpdate:
    def test_zero_weights_reduce_to_softmax(self, rng):
        grid, labels, unary, config, dets, params = make_problem(
            rng, 3, 2, kernel_weight=0.0, detection_weight=0.0)
        plans = problem_plans(grid, config)
        q_in = softmax_rows(rng.normal(size=(6, 2)))
        out = x_update(q_in, np.array([0.5]), unary, plans, config, dets, params)
        np.testing.assert_allclose(out, softmax_rows(-unary.energies),
                                   atol=1e-12)

    def test_near_zero_score_detection_is_inert(self, rng):
        # a score of 0 clamps to 1e-6, so the clique coefficient is ~1e-7 and
        # the update matches the detection-free one to that order
        grid, labels, unary, config, _, params = make_problem(
            rng, 3, 2, num_detections=0)
        plans = problem_plans(grid, config)
        det = Detection(1, 0.0, (0, 1, 2, 2), grid.box_indices((0, 1, 2, 2)))
        q_in = softmax_rows(rng.normal(size=(6, 2)))
        with_det = x_update(q_in, np.array([det.score]), unary, plans, config,
                            [det], params)
        without = x_update(q_in, np.zeros(0), unary, plans, config, [], params)
        np.testing.assert_allclose(with_det, without, atol=1e-6)

    def test_hand_iterated_two_pixels(self):
        # 2x1 grid, Potts scale 1, kernel k between the pixels; one update
        # from uniform Q must match the formula evaluated by hand
        grid = PixelGrid(2, 1)
        labels = LabelSpace(1)
        u = np.array([[0.0, 1.0], [0.5, 0.0]])
        unary = UnaryField(grid, labels, u)
        config = PairwiseConfig.potts(
            2, (KernelSpec("spatial", 1.0, theta_gamma=1.0),), 1.0)
        plans = problem_plans(grid, config)
        k = np.exp(-0.5)  # unit pixel distance at theta_gamma = 1
        q_in = np.full((2, 2), 0.5)
        out = x_update(q_in, np.zeros(0), unary, plans, config, [],
                       DetectionParams.uniform(labels))
        for i, other in ((0, 1), (1, 0)):
            logits = -u[i] - k * np.array([q_in[other, 1], q_in[other, 0]])
            expect = np.exp(logits) / np.exp(logits).sum()
            np.testing.assert_allclose(out[i], expect, atol=1e-12)

    def test_rows_stay_normalized(self, rng):
        grid, labels, unary, config, dets, params = make_problem(rng, 4, 3)
        plans = problem_plans(grid, config)
        q = softmax_rows(rng.normal(size=(12, 2)))
        out = x_update(q, np.array([0.7]), unary, plans, config, dets, params)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


class TestYUpdate:
    def test_full_agreement_hand_value(self):
        grid, labels, det, params = _simple(score=0.8, weight=1.0)
        q = np.zeros((4, 2))
        q[:, 1] = 1.0
        y = y_update(q, [det], params)
        # sigma(logit(0.8) + c*(2*4 - 4)) with c = 0.8/4 reduces to
        # 0.8 / (0.8 + 0.2 * exp(-0.8))
        expect = 0.8 / (0.8 + 0.2 * np.exp(-0.8))
        assert y[0] == pytest.approx(expect, abs=1e-12)
        assert y[0] == pytest.approx(0.8990, abs=5e-5)

    def test_symmetric_evidence_returns_score(self):
        grid, labels, det, params = _simple(score=0.8)
        q = np.full((4, 2), 0.5)
        y = y_update(q, [det], params)
        assert y[0] == pytest.approx(0.8, abs=1e-9)

    def test_zero_class_weight_returns_score(self, rng):
        grid, labels, det, _ = _simple(score=0.37)
        params = DetectionParams.uniform(labels, 0.0)
        q = softmax_rows(rng.normal(size=(4, 2)))
        y = y_update(q, [det], params)
        assert y[0] == pytest.approx(0.37, abs=1e-12)

    def test_monotone_in_agreement(self):
        grid, labels, det, params = _simple(score=0.6, weight=2.0)
        prev = -1.0
        for agree in np.linspace(0.0, 1.0, 11):
            q = np.zeros((4, 2))
            q[:, 1] = agree
            q[:, 0] = 1.0 - agree
            y = y_update(q, [det], params)[0]
            assert y >= prev
            prev = y

    def test_contradicting_evidence_lowers_score(self):
        grid, labels, det, params = _simple(score=0.8)
        q = np.zeros((4, 2))
        q[:, 0] = 1.0  # every foreground pixel is background
        assert y_update(q, [det], params)[0] < 0.8


class TestDetectionMessage:
    def test_no_detections_is_none(self):
        assert detection_message((4, 2), np.zeros(0), [],
                                 DetectionParams(np.zeros(2))) is None

    def test_zero_weight_is_none(self):
        grid, labels, det, _ = _simple()
        params = DetectionParams.uniform(labels, 0.0)
        assert detection_message((4, 2), np.array([0.8]), [det], params) is None

    def test_message_values(self):
        grid, labels, det, params = _simple(score=0.8, weight=1.0)
        y = np.array([0.25])
        msg = detection_message((4, 2), y, [det], params)
        c = 1.0 * 0.8 / 4
        # label 1 (matching): c * (1 - y); others: c * y
        np.testing.assert_allclose(msg[:, 1], c * 0.75, atol=1e-14)
        np.testing.assert_allclose(msg[:, 0], c * 0.25, atol=1e-14)


class TestRun:
    def test_t1_no_coupling_equals_init(self, rng):
        grid, labels, unary, config, dets, params = make_problem(
            rng, 3, 2, kernel_weight=0.0, detection_weight=0.0)
        plans = problem_plans(grid, config)
        res = run(unary, dets, config, params,
                  InferenceSettings(iterations=1), plans=plans)
        np.testing.assert_allclose(res.q.q, softmax_rows(-unary.energies),
                                   atol=1e-12)

    def test_detection_free_reduction_bitwise(self, rng):
        # w_l = 0 must be bitwise identical to running without detections
        grid, labels, unary, config, dets, params = make_problem(
            rng, 4, 3, detection_weight=0.0)
        plans = problem_plans(grid, config)
        settings = InferenceSettings(iterations=5)
        with_dets = run(unary, dets, config, params, settings, plans=plans)
        without = run(unary, [], config, params, settings, plans=plans)
        np.testing.assert_array_equal(with_dets.q.q, without.q.q)

    def test_fixed_point_residual_small_after_convergence(self, rng):
        grid, labels, unary, config, dets, params = make_problem(rng, 3, 2)
        plans = problem_plans(grid, config)
        res = run(unary, dets, config, params,
                  InferenceSettings(iterations=200), plans=plans)
        assert fixed_point_residual(res, unary, plans, config, params) < 1e-10

    def test_false_positive_detection_recalibrated_down(self, rng):
        # foreground unaries strongly favor background: y ends below s_d
        grid = PixelGrid(3, 2)
        labels = LabelSpace(1)
        u = np.zeros((6, 2))
        u[:, 1] = 4.0  # strong background preference
        unary = UnaryField(grid, labels, u)
        config = PairwiseConfig.potts(
            2, (KernelSpec("spatial", 0.3, theta_gamma=1.5),), 1.0)
        plans = problem_plans(grid, config)
        det = Detection(1, 0.7, (0, 0, 3, 2), np.arange(6))
        res = run(unary, [det], config, DetectionParams.uniform(labels, 1.0),
                  InferenceSettings(iterations=5), plans=plans)
        assert res.detections[0].y_marginal < 0.7

    def test_supported_detection_recalibrated_up(self, rng):
        grid = PixelGrid(3, 2)
        labels = LabelSpace(1)
        u = np.zeros((6, 2))
        u[:, 0] = 4.0  # strong foreground preference
        unary = UnaryField(grid, labels, u)
        config = PairwiseConfig.potts(
            2, (KernelSpec("spatial", 0.3, theta_gamma=1.5),), 1.0)
        plans = problem_plans(grid, config)
        det = Detection(1, 0.7, (0, 0, 3, 2), np.arange(6))
        res = run(unary, [det], config, DetectionParams.uniform(labels, 1.0),
                  InferenceSettings(iterations=5), plans=plans)
        assert res.detections[0].y_marginal > 0.7

    def test_early_stop(self, rng):
        grid, labels, unary, config, dets, params = make_problem(rng, 3, 2)
        plans = problem_plans(grid, config)
        res = run(unary, dets, config, params,
                  InferenceSettings(iterations=100, epsilon=1e-9), plans=plans)
        assert res.iterations_run < 100

    def test_close_to_exact_marginals_on_easy_instance(self, rng):
        # weak coupling: mean field should land near the exhaustive marginals
        grid, labels, unary, config, dets, params = make_problem(
            rng, 3, 2, kernel_weight=0.1)
        plans = problem_plans(grid, config)
        kernel = problem_kernel(grid, config)
        res = run(unary, dets, config, params,
                  InferenceSettings(iterations=100), plans=plans)
        exact, exact_y, _ = exact_marginals_bruteforce(
            unary, kernel, config.compatibility, dets, params)
        assert np.abs(res.q.q - exact.q).max() < 0.05
        assert np.abs(res.y_marginals - exact_y).max() < 0.05


class TestSequentialMode:
    def test_free_energy_nonincreasing(self, rng):
        for seed in range(3):
            local = np.random.default_rng(seed)
            grid, labels, unary, config, dets, params = make_problem(
                local, 3, 2, kernel_weight=0.8)
            kernel = problem_kernel(grid, config)
            res = run(unary, dets, config, params,
                      InferenceSettings(iterations=10, mode="sequential",
                                        track_free_energy=True),
                      pair_kernel=kernel)
            trace = np.asarray(res.free_energy_trace)
            scale = max(1.0, np.abs(trace).max())
            assert (np.diff(trace) <= 1e-9 * scale).all()

    def test_final_free_energy_bounds_log_z(self, rng):
        grid, labels, unary, config, dets, params = make_problem(rng, 3, 2)
        kernel = problem_kernel(grid, config)
        res = run(unary, dets, config, params,
                  InferenceSettings(iterations=30, mode="sequential",
                                    track_free_energy=True),
                  pair_kernel=kernel)
        _, _, log_z = exact_marginals_bruteforce(
            unary, kernel, config.compatibility, dets, params)
        assert res.free_energy >= -log_z - 1e-10

    def test_requires_kernel_matrix(self, rng):
        grid, labels, unary, config, dets, params = make_problem(rng, 2, 2)
        with pytest.raises(ValueError):
            run(unary, dets, config, params,
                InferenceSettings(mode="sequential"))


class TestDecode:
    def test_one_hot(self):
        grid = PixelGrid(2, 1)
        q = DistributionField(grid, np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(decode(q).x, [1, 0])

    def test_tie_breaks_low(self):
        grid = PixelGrid(1, 1)
        q = DistributionField(grid, np.array([[0.5, 0.5]]))
        assert decode(q).x[0] == 0

    def test_matches_scan_oracle(self, rng):
        grid = PixelGrid(5, 4)
        q = softmax_rows(rng.normal(size=(20, 3)))
        out = decode(DistributionField(grid, q)).x
        for i in range(20):
            best, best_p = 0, q[i, 0]
            for l in range(1, 3):
                if q[i, l] > best_p:
                    best, best_p = l, q[i, l]
            assert out[i] == best


class TestSettings:
    def test_rejects_zero_iterations(self):
        with pytest.raises(ValueError):
            InferenceSettings(iterations=0)

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            InferenceSettings(mode="async")
