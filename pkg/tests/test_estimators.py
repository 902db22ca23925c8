"""Gradient estimators against the closed-form Gaussian toy and each other,
plus expected-IoU surfaces and their kink smoothing."""

import numpy as np
import pytest

from varmatch.distributions import draw_noise
from varmatch.estimators import (
    FINITE_DIFF,
    ProposalParams,
    QuadraticObjective,
    SceneObjective,
    expected_iou_surface,
    finite_diff_gradient,
    kink_derivative_jump,
    mc_expected_value,
    pack,
    reparam_gradient,
    sample_block,
    score_function_gradient,
    unpack,
    zero_params,
)
from varmatch.geometry import FA, FCOS, box, decode, iou
from varmatch.scenes import build_anchor_grid


def toy_setup(seed=0):
    rng = np.random.default_rng(seed)
    center = rng.normal(0, 1, (1, 4))
    params = ProposalParams(
        cls_logits=np.zeros(1),
        mu=rng.normal(0, 1, (1, 4)),
        log_sigma=rng.normal(0, 0.3, (1, 4)),
    )
    return QuadraticObjective(center), params


def small_scene_objective(n_side=2, seed=3):
    rng = np.random.default_rng(seed)
    grid = build_anchor_grid((n_side * 8, n_side * 8), 8, (6, 10))
    gts = np.stack(
        [
            [rng.uniform(3, n_side * 8 - 3), rng.uniform(4, n_side * 8 - 4), 6.0, 9.0]
            for _ in range(2)
        ]
    )
    obj = SceneObjective(gts, grid.boxes, bag_size=3)
    params = ProposalParams(
        cls_logits=rng.normal(0, 0.5, len(grid)),
        mu=rng.normal(0, 0.2, (len(grid), 4)),
        log_sigma=rng.normal(-0.5, 0.2, (len(grid), 4)),
    )
    return obj, params


class TestPackUnpack:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        p = ProposalParams(rng.normal(size=5), rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
        q = unpack(pack(p), 5)
        np.testing.assert_array_equal(p.cls_logits, q.cls_logits)
        np.testing.assert_array_equal(p.mu, q.mu)
        np.testing.assert_array_equal(p.log_sigma, q.log_sigma)

    def test_zero_params(self):
        z = zero_params(3)
        assert pack(z).shape == (27,)
        assert np.all(pack(z) == 0)


class TestReparamOnToy:
    def test_point_mass_limit_matches_deterministic_gradient(self):
        obj, params = toy_setup()
        params.log_sigma[:] = np.log(1e-12)
        est = reparam_gradient(obj, params, 5, seed=0)
        _, _, d_z = obj.value_and_grad(params.cls_logits, params.mu)
        np.testing.assert_allclose(est.grad[1:5], d_z.ravel(), atol=1e-8)
        np.testing.assert_allclose(est.grad[5:], 0.0, atol=1e-8)

    def test_matches_closed_form_within_three_se(self):
        obj, params = toy_setup(1)
        analytic = obj.expected_gradient(params)
        reps = 60
        estimates = np.stack(
            [reparam_gradient(obj, params, 2000, seed=0, stream=(r,)).grad for r in range(reps)]
        )
        mean = estimates.mean(axis=0)
        se = estimates.std(axis=0, ddof=1) / np.sqrt(reps)
        active = slice(1, 9)  # mu and log_sigma coordinates
        assert np.all(np.abs(mean - analytic)[active] < 3.5 * se[active])

    def test_deterministic(self):
        obj, params = toy_setup(2)
        a = reparam_gradient(obj, params, 64, seed=9, stream=(4,))
        b = reparam_gradient(obj, params, 64, seed=9, stream=(4,))
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_sample_prefix_shared_across_counts(self):
        obj, params = toy_setup(3)
        eps1 = sample_block(11, (3,), 1, params.mu.shape)
        eps2 = sample_block(11, (3,), 2, params.mu.shape)
        np.testing.assert_array_equal(eps1[0], eps2[0])
        one = reparam_gradient(obj, params, 1, seed=11, stream=(3,))
        two = reparam_gradient(obj, params, 2, seed=11, stream=(3,))
        sigma = np.exp(params.log_sigma)
        v2 = obj.value(params.cls_logits, params.mu + sigma * eps2[1])
        assert two.value == pytest.approx((one.value + v2) / 2, rel=1e-12)


class TestScoreFunction:
    def test_matches_closed_form_within_three_se(self):
        obj, params = toy_setup(4)
        analytic = obj.expected_gradient(params)
        reps = 60
        estimates = np.stack(
            [
                score_function_gradient(obj, params, 4000, seed=1, stream=(r,), baseline="mean").grad
                for r in range(reps)
            ]
        )
        mean = estimates.mean(axis=0)
        se = estimates.std(axis=0, ddof=1) / np.sqrt(reps)
        active = slice(1, 9)
        assert np.all(np.abs(mean - analytic)[active] < 3.5 * se[active])

    def test_constant_objective_scores_to_zero(self):
        class Constant:
            n_anchors = 1

            def value_and_grad(self, logits, z):
                return 3.25, np.zeros_like(logits), np.zeros_like(z)

            def value(self, logits, z):
                return 3.25

        params = ProposalParams(np.zeros(1), np.zeros((1, 4)), np.zeros((1, 4)))
        reps = 40
        grads = np.stack(
            [
                score_function_gradient(Constant(), params, 500, seed=2, stream=(r,), baseline="none").grad
                for r in range(reps)
            ]
        )
        mean = grads.mean(axis=0)
        se = grads.std(axis=0, ddof=1) / np.sqrt(reps) + 1e-12
        assert np.all(np.abs(mean[1:]) < 4 * se[1:])

    def test_higher_variance_than_reparam(self):
        obj, params = toy_setup(5)
        reps = 100
        rp = np.stack([reparam_gradient(obj, params, 64, seed=3, stream=(r,)).grad for r in range(reps)])
        sf = np.stack(
            [
                score_function_gradient(obj, params, 64, seed=3, stream=(r,), baseline="mean").grad
                for r in range(reps)
            ]
        )
        var_rp = rp.var(axis=0)[1:9].sum()
        var_sf = sf.var(axis=0)[1:9].sum()
        assert var_sf > var_rp

    def test_mean_baseline_needs_two_samples(self):
        obj, params = toy_setup(6)
        with pytest.raises(ValueError):
            score_function_gradient(obj, params, 1, seed=0, baseline="mean")


class TestFiniteDiff:
    def test_matches_toy_closed_form(self):
        # the FD of the S-sample surrogate deviates from the expectation
        # gradient by the surrogate's own Monte-Carlo error, which has a
        # closed form on the toy: var(d/dmu) = 4 sigma^2 and
        # var(d/dlog_sigma) = 4 sigma^2 ((mu-c)^2 + 2 sigma^2) per sample
        obj, params = toy_setup(7)
        n = 4000
        est = finite_diff_gradient(obj, params, n, seed=5, step=1e-4)
        analytic = obj.expected_gradient(params)
        sigma = np.exp(params.log_sigma).ravel()
        dev = (params.mu - obj.center).ravel()
        se_mu = 2 * sigma / np.sqrt(n)
        se_ls = 2 * sigma * np.sqrt(dev**2 + 2 * sigma**2) / np.sqrt(n)
        tol = 4 * np.concatenate([se_mu, se_ls]) + 1e-4
        assert np.all(np.abs(est.grad[1:9] - analytic[1:9]) < tol)
        assert est.estimator == FINITE_DIFF

    def test_common_random_numbers_match_reparam_on_scene(self):
        obj, params = small_scene_objective()
        rp = reparam_gradient(obj, params, 1000, seed=6, stream=(0,))
        fd = finite_diff_gradient(obj, params, 1000, seed=6, stream=(0,), step=1e-5)
        cos = np.dot(rp.grad, fd.grad) / (np.linalg.norm(rp.grad) * np.linalg.norm(fd.grad))
        assert cos > 0.999
        assert fd.value == pytest.approx(rp.value, rel=1e-12)

    def test_zero_objective_scene(self):
        grid = build_anchor_grid((16, 16), 8, (6, 10))
        obj = SceneObjective(np.zeros((0, 4)), grid.boxes, bag_size=3)
        params = zero_params(len(grid))
        params.cls_logits[:] = -40.0  # suppressed background, flat objective
        est = finite_diff_gradient(obj, params, 4, seed=7, step=1e-5)
        assert np.max(np.abs(est.grad)) < 1e-8

    def test_step_bounds(self):
        obj, params = toy_setup(8)
        with pytest.raises(ValueError):
            finite_diff_gradient(obj, params, 4, seed=0, step=1e-2)


class TestExpectedIoUSurface:
    def test_sigma_zero_peak_at_gt_point(self):
        grid = expected_iou_surface(FA, ("x", -1, 1, 41), ("w", 0.2, 2.2, 41), sigma=0.0)
        assert grid.values.max() == pytest.approx(1.0)
        i = np.argwhere(grid.values == grid.values.max())
        assert grid.axis_values[0][i[0][0]] == pytest.approx(0.0)
        assert grid.axis_values[1][i[0][1]] == pytest.approx(1.0)

    def test_sigma_zero_equals_pointwise_iou(self):
        grid = expected_iou_surface(FA, ("x", -0.8, 0.8, 9), ("w", 0.5, 1.5, 9), sigma=0.0)
        gt = box(0, 0, 1, 1)
        for i, x in enumerate(grid.axis_values[0]):
            for j, w in enumerate(grid.axis_values[1]):
                direct = iou(decode(np.array([x, 0, np.log(w), 0]), gt, FA), gt)
                assert abs(grid.values[i, j] - direct) < 1e-12

    def test_fcos_surface_peaks_at_gt(self):
        grid = expected_iou_surface(FCOS, ("r", 0.1, 1.3, 25), ("l", 0.1, 1.3, 25), sigma=0.0)
        assert grid.values.max() == pytest.approx(1.0)

    def test_monte_carlo_self_convergence(self):
        coarse = expected_iou_surface(FA, ("x", -0.5, 0.5, 5), ("w", 0.8, 1.2, 5), 0.1, 10_000, seed=1)
        fine = expected_iou_surface(FA, ("x", -0.5, 0.5, 5), ("w", 0.8, 1.2, 5), 0.1, 100_000, seed=2)
        assert np.max(np.abs(coarse.values - fine.values)) < 0.01

    def test_values_in_unit_interval(self):
        grid = expected_iou_surface(FA, ("x", -1, 1, 7), ("w", 0.5, 2, 7), 0.2, 2000, seed=3)
        assert np.all(grid.values >= 0) and np.all(grid.values <= 1)

    def test_csv_round_trip(self, tmp_path):
        grid = expected_iou_surface(FA, ("x", -0.2, 0.2, 3), ("w", 0.9, 1.1, 3), 0.0)
        path = tmp_path / "surface.csv"
        grid.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x,w,expected_iou"
        assert len(lines) == 1 + 9
        x, w, v = lines[1].split(",")
        assert float(v) == grid.values[0, 0]

    def test_pointwise_limit_to_deterministic_surface(self):
        base = expected_iou_surface(FA, ("x", -0.6, 0.6, 7), ("w", 0.7, 1.4, 7), 0.0)
        sups = []
        for sigma in (0.1, 0.01, 0.001):
            s = expected_iou_surface(FA, ("x", -0.6, 0.6, 7), ("w", 0.7, 1.4, 7), sigma, 40_000, seed=4)
            sups.append(np.max(np.abs(s.values - base.values)))
        assert sups[0] > sups[1] > sups[2]


class TestKinkSmoothing:
    def test_jump_decreases_with_sigma(self):
        jumps = [kink_derivative_jump(FA, s, n_samples=20_000, seed=0) for s in (0.0, 0.05, 0.1, 0.2)]
        assert all(b < a for a, b in zip(jumps, jumps[1:])), jumps

    def test_sigma_zero_jump_is_the_raw_kink(self):
        # (1-x)/(1+x) slope at 0+ is -2/(1+delta); jump ~ 2 * 2/(1+delta)
        jump = kink_derivative_jump(FA, 0.0, delta=1e-2)
        assert jump == pytest.approx(4.0 / 1.01, rel=1e-2)

    def test_fcos_jump_also_shrinks(self):
        j0 = kink_derivative_jump(FCOS, 0.0, n_samples=5_000, seed=1)
        j2 = kink_derivative_jump(FCOS, 0.2, n_samples=5_000, seed=1)
        assert j2 < j0
