import math
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from kernel import Autodiff, Loss
from kernel.DataFactory import DepthMap, StereoBatch, gen_scene, stack_samples
from kernel.Loss import LossOptions, LossWeights
from kernel.StereoGeometry import Calib
from kernel.Verification import berhu_oracle


class TestBerhu:
    @pytest.mark.parametrize('d, delta, expected', [(0.5, 1.0, 0.5), (-0.5, 1.0, 0.5), (2.0, 1.0, 2.5),
                                                    (-3.0, 1.0, 5.0), (1.0, 1.0, 1.0), (0.0, 0.2, 0.0)])
    def test_values(self, d, delta, expected):
        assert Loss.berhu(d, delta) == pytest.approx(expected)

    def test_random_cases_match_oracle(self, rng):
        d = rng.normal(0.0, 3.0, 500)
        delta = 1.3
        np.testing.assert_allclose(Loss.berhu(d, delta), [berhu_oracle(v, delta) for v in d], atol=1e-12)
        assert np.all(Loss.berhu(d, delta) >= np.abs(d))

    def test_slope_is_continuous_at_threshold(self):
        assert Loss.berhu_slope(1.0, 1.0) == pytest.approx(Loss.berhu_slope(1.0 + 1e-9, 1.0), abs=1e-8)

    def test_threshold_must_be_positive(self):
        with pytest.raises(Loss.LossDomainError):
            Loss.berhu(1.0, 0.0)


class TestSchedule:
    @pytest.mark.parametrize('t', [1, 10, 100])
    def test_values(self, t):
        assert Loss.lambda_schedule(t, 0.7) == pytest.approx(0.7 * math.exp(-10.0 / t), abs=1e-12)

    def test_t_zero_rejected(self):
        with pytest.raises(Loss.LossDomainError):
            Loss.lambda_schedule(0, 1.0)

    def test_zero_beta(self):
        assert Loss.lambda_schedule(50, 0.0) == 0.0


def _gt(depth, valid):
    return DepthMap(np.asarray(depth, dtype=float)[None, None], np.asarray(valid, dtype=bool)[None, None])


class TestAdaptiveDelta:
    def test_twenty_percent_of_largest_residual(self):
        gt = _gt([[2.0, 3.0]], [[True, True]])
        assert Loss.adaptive_delta(np.array([[[[2.5, 5.0]]]]), gt) == pytest.approx(0.4)

    def test_floor(self):
        gt = _gt([[2.0]], [[True]])
        assert Loss.adaptive_delta(np.array([[[[2.0]]]]), gt) == Loss.DELTA_FLOOR

    def test_pooled_over_views(self):
        a, b = _gt([[1.0]], [[True]]), _gt([[1.0]], [[True]])
        assert Loss.adaptive_delta([np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 6.0)], [a, b]) == \
            pytest.approx(1.0)

    def test_single_dense_map(self):
        pred = np.full((3, 4), 10.0)
        pred[1, 2] = 15.0
        assert Loss.adaptive_delta(pred, DepthMap.dense(np.full((3, 4), 10.0))) == pytest.approx(1.0)

    def test_no_ground_truth_raises(self):
        with pytest.raises(Loss.EmptyPixelSetError):
            Loss.adaptive_delta(np.ones((1, 1, 1, 2)), _gt([[1.0, 1.0]], [[False, False]]))


class TestSupervised:
    def test_hand_evaluated(self):
        # depths 2 and 4 against 2 and 3, one pixel without ground truth
        Z = _gt([[2.0, 3.0, 0.0]], [[True, True, False]])
        rho = np.array([[[[0.5, 0.25, 1.0]]]])
        loss, delta = Loss.supervised_loss(rho, rho, Z, Z)
        assert delta == pytest.approx(0.2)
        # berHu(1, 0.2) = (1 + 0.04) / 0.4 = 2.6 per view, averaged over 4 samples
        assert loss == pytest.approx(2 * 2.6 / 4)

    def test_l2_norm(self):
        Z = _gt([[2.0, 3.0]], [[True, True]])
        rho = np.array([[[[0.5, 0.25]]]])
        loss, _ = Loss.supervised_loss(rho, rho, Z, Z, norm='l2', normalize=False)
        assert loss == pytest.approx(2.0)

    def test_perfect_prediction_is_zero(self):
        Z = _gt([[2.0, 5.0]], [[True, True]])
        rho = 1.0 / np.array([[[[2.0, 5.0]]]])
        assert Loss.supervised_loss(rho, rho, Z, Z)[0] == pytest.approx(0.0, abs=1e-12)

    def test_no_ground_truth_raises(self):
        Z = _gt([[2.0]], [[False]])
        with pytest.raises(Loss.EmptyPixelSetError):
            Loss.supervised_loss(np.ones((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), Z, Z)


@pytest.fixture
def scene(scene_cfg):
    return gen_scene(replace(scene_cfg, texture_contrast=0.3), 5)


class TestUnsupervised:
    def test_zero_at_truth_on_non_occluded_pixels(self, scene):
        batch = stack_samples([scene])
        residuals = Loss.alignment_residuals(batch.I_l, batch.I_r, batch.true_rho_l, batch.true_rho_r, scene.calib,
                                             sigma=0.0)
        for (residual, valid), mask in zip(residuals, (scene.nonoccluded_l, scene.nonoccluded_r)):
            keep = valid[0] & mask
            assert keep.sum() > 100
            assert residual[0, 0][keep].max() < 1e-6

    @pytest.mark.parametrize('scale', [0.8, 0.9, 1.1, 1.2])
    def test_wrong_depth_costs_more(self, scene, scale):
        batch = stack_samples([scene])
        truth = Loss.unsupervised_loss(batch.I_l, batch.I_r, batch.true_rho_l, batch.true_rho_r, scene.calib)
        off = Loss.unsupervised_loss(batch.I_l, batch.I_r, scale * batch.true_rho_l, scale * batch.true_rho_r,
                                     scene.calib)
        assert off > truth

    @pytest.mark.parametrize('seed', range(10))
    def test_truth_is_the_minimum_over_scales_on_generated_scenes(self, scene_cfg, seed):
        batch = stack_samples([gen_scene(scene_cfg, seed)])

        def loss(scale):
            return Loss.unsupervised_loss(batch.I_l, batch.I_r, scale * batch.true_rho_l,
                                          scale * batch.true_rho_r, batch.calib)

        truth = loss(1.0)
        assert all(loss(scale) > truth for scale in (0.8, 0.9, 1.1, 1.2))

    def test_swapping_views_and_sign_is_symmetric(self, scene):
        batch = stack_samples([scene])
        rho_l, rho_r = batch.true_rho_l * 0.95, batch.true_rho_r * 1.02
        forward = Loss.unsupervised_loss(batch.I_l, batch.I_r, rho_l, rho_r, scene.calib)
        flipped = Loss.unsupervised_loss(batch.I_r, batch.I_l, rho_r, rho_l, scene.calib, left_sign=-1)
        assert forward == pytest.approx(flipped, rel=1e-12)

    def test_excluded_pixels_do_not_count(self, scene):
        batch = stack_samples([scene])
        everything = np.ones_like(batch.Z_l.valid)
        loss = Loss.unsupervised_loss(batch.I_l, batch.I_r, batch.true_rho_l * 1.1, batch.true_rho_r * 1.1,
                                      scene.calib, exclude_l=everything, exclude_r=everything)
        assert loss == 0.0


class TestRegularizer:
    def test_constant_inverse_depth_is_free(self, rng):
        image = rng.uniform(size=(1, 1, 6, 8))
        rho = np.full((1, 1, 6, 8), 0.2)
        assert Loss.regularization_loss(image, image, rho, rho) == 0.0

    def test_hand_evaluated_on_flat_image(self):
        image = np.zeros((1, 1, 1, 3))
        rho = np.array([[[[0.0, 1.0, 3.0]]]])
        # flat image: weights are 1, sum |drho| = 1 + 2 per view, averaged over 3 pixels
        assert Loss.regularization_loss(image, image, rho, rho) == pytest.approx(2.0)

    def test_edges_reduce_the_penalty(self):
        flat = np.zeros((1, 1, 1, 2))
        edge = np.array([[[[0.0, 1.0]]]])
        rho = np.array([[[[0.0, 1.0]]]])
        assert Loss.regularization_loss(edge, edge, rho, rho) == pytest.approx(2 * math.exp(-1.0) / 2)
        assert Loss.regularization_loss(edge, edge, rho, rho) < Loss.regularization_loss(flat, flat, rho, rho)


class TestTotal:
    def test_breakdown_identity(self, scene):
        rho_l, rho_r = scene.true_rho_l[None, None] * 1.05, scene.true_rho_r[None, None] * 0.97
        weights = LossWeights(beta=1.0, gamma=0.5, t=20, reg_weight=0.3)
        b = Loss.total_loss(scene, rho_l, rho_r, weights)
        assert b.total == pytest.approx(b.lambda_t * b.supervised + 0.5 * b.unsupervised + 0.3 * b.regularizer)
        assert b.lambda_t == pytest.approx(math.exp(-0.5))
        assert b.graph is None
        assert set(b.as_dict()) == {'L_S', 'L_U', 'L_R', 'lambda_t', 'total'}

    def test_no_ground_truth_with_zero_beta(self, scene):
        empty = DepthMap(np.zeros_like(scene.Z_l.depth), np.zeros_like(scene.Z_l.valid))
        sample = replace(scene, Z_l=empty, Z_r=empty)
        b = Loss.total_loss(sample, scene.true_rho_l[None, None], scene.true_rho_r[None, None],
                            LossWeights(beta=0.0, gamma=1.0, t=1))
        assert b.supervised == 0.0

    def test_no_ground_truth_with_positive_beta_raises(self, scene):
        empty = DepthMap(np.zeros_like(scene.Z_l.depth), np.zeros_like(scene.Z_l.valid))
        sample = replace(scene, Z_l=empty, Z_r=empty)
        with pytest.raises(Loss.EmptyPixelSetError):
            Loss.total_loss(sample, scene.true_rho_l[None, None], scene.true_rho_r[None, None],
                            LossWeights(beta=1.0, gamma=1.0, t=1))

    def test_shape_mismatch_raises(self, scene):
        with pytest.raises(ValueError):
            Loss.total_loss(scene, np.ones((1, 1, 4, 4)), np.ones((1, 1, 4, 4)), LossWeights(1.0, 1.0, 1))

    def test_gradients_match_finite_differences(self, rng):
        h, w = 8, 16
        images = rng.uniform(0.1, 0.9, size=(2, 1, 1, h, w))
        depth = rng.uniform(2.0, 12.0, size=(1, 1, h, w))
        gt = DepthMap(depth, rng.uniform(size=(1, 1, h, w)) < 0.4)
        batch = StereoBatch(images[0], images[1], gt, gt, Calib(10.0, 0.5))
        params = OrderedDict((('rho_l', rng.uniform(0.1, 0.4, size=(1, 1, h, w))),
                              ('rho_r', rng.uniform(0.1, 0.4, size=(1, 1, h, w)))))
        weights = LossWeights(beta=1.0, gamma=0.5, t=30)
        delta = Loss.total_loss(batch, params['rho_l'], params['rho_r'], weights).delta

        def f(tape, p):
            return Loss.total_loss(batch, p['rho_l'], p['rho_r'], weights, LossOptions(), delta=delta).graph

        report = Autodiff.grad_check(f, params, eps=1e-6, tol=1e-4, atol=1e-9, max_coords=30)
        assert report.passed, report.worst

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(beta=-1.0, gamma=0.5, t=1)
