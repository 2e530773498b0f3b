import numpy as np
import pandas as pd
import pytest

from app.body.model import pose_body
from app.body.params import CameraParams, PoseParams, ShapeParams
from app.core.errors import ConfigurationError, DimensionError, DivergenceError, EmptyTargetError, NumericError
from app.fitting.correspondence import anchor_landmarks, build_iuv_index, match_pixels
from app.fitting.experiments import EXPERIMENT_COLUMNS, run_recovery_experiment
from app.fitting.fitter import SCALE_FLOOR, fit, mean_params, parameter_scales, step
from app.fitting.losses import GradientVector
from app.metrics.evaluation import M_TO_MM, mpjpe, mse_params
from app.moca.sampling import sample_perturbation
from app.render.camera import project
from app.render.iuv import IUVImage
from app.render.raster import render_params
from app.schemas.fitting import LOSS_LOG_COLUMNS, FitConfig, SupervisionFlags

SIZE = (64, 64)


def anchored_target(model, params):
    image, _, body = render_params(model, params, SIZE)
    pairs = match_pixels(image, build_iuv_index(model), 0.05, 2)
    return image, anchor_landmarks(pairs, project(body.posed_vertices, params.camera)), body


@pytest.fixture(scope="module")
def perturbed(small_model):
    truth, _ = sample_perturbation([5, 0], mean_params(small_model, SIZE), small_model.skeleton, joints=4)
    image, pairs, body = anchored_target(small_model, truth)
    return truth, image, pairs, body


class TestFitConfig:
    def test_sigma_anneals_over_the_first_half(self):
        config = FitConfig(max_iterations=100)
        assert config.sigma_at(0) == pytest.approx(2.0)
        assert config.sigma_at(25) == pytest.approx(1.25)
        assert config.sigma_at(50) == pytest.approx(0.5)
        assert config.sigma_at(99) == pytest.approx(0.5)

    def test_shape_frozen_for_the_first_tenth(self):
        config = FitConfig(max_iterations=100)
        assert config.shape_frozen(9)
        assert not config.shape_frozen(10)

    def test_supervision_from_text(self):
        config = FitConfig(supervision="rpj, rec")
        assert config.supervision.tokens() == ["rpj", "rec"]

    @pytest.mark.parametrize("overrides", [
        {"supervision": "rpj,depth"},
        {"max_iterations": 0},
        {"step_theta": 0.0},
        {"sigma_end": -1.0},
        {"shape_freeze_fraction": 1.5},
        {"stride": 0},
        {"tau": -0.01},
    ])
    def test_invalid_settings(self, overrides):
        with pytest.raises(ConfigurationError):
            FitConfig(**overrides)


class TestStep:
    def test_gradient_is_clipped(self, small_model):
        params = mean_params(small_model, SIZE)
        d_theta = np.zeros((small_model.joint_count, 3))
        d_theta[0, 0] = 1e6
        grad = GradientVector(d_theta, np.zeros(small_model.shape_rank), np.zeros(3))
        moved = step(params, grad, FitConfig(step_theta=1e-5, clip_norm=1e3))
        delta = moved.pose.rotations - params.pose.rotations
        assert np.linalg.norm(delta) == pytest.approx(1e-2)
        assert delta[0, 0] == pytest.approx(-1e-2)

    def test_frozen_shape_does_not_move(self, small_model):
        params = mean_params(small_model, SIZE)
        grad = GradientVector(np.zeros((small_model.joint_count, 3)), np.ones(small_model.shape_rank), np.zeros(3))
        assert np.array_equal(step(params, grad, FitConfig(), freeze_shape=True).shape.coefficients,
                              params.shape.coefficients)
        assert not np.array_equal(step(params, grad, FitConfig()).shape.coefficients, params.shape.coefficients)

    def test_camera_scale_stays_positive(self, small_model):
        params = mean_params(small_model, SIZE).copy_with(camera=CameraParams(100.0, 0.0, 0.0))
        grad = GradientVector(np.zeros((small_model.joint_count, 3)), np.zeros(small_model.shape_rank),
                              np.array([1e3, 0.0, 0.0]))
        moved = step(params, grad, FitConfig(step_alpha=0.1))
        assert moved.camera.f == pytest.approx(50.0)

    def test_backoff_scale(self, small_model):
        params = mean_params(small_model, SIZE)
        grad = GradientVector(np.zeros((small_model.joint_count, 3)), np.zeros(small_model.shape_rank),
                              np.array([0.0, 1.0, 0.0]))
        moved = step(params, grad, FitConfig(step_alpha=0.1), scale=0.5)
        assert moved.camera.x == pytest.approx(params.camera.x - 0.05)

    def test_non_finite_gradient(self, small_model):
        params = mean_params(small_model, SIZE)
        grad = GradientVector(np.full((small_model.joint_count, 3), np.nan), np.zeros(small_model.shape_rank),
                              np.zeros(3))
        with pytest.raises(NumericError):
            step(params, grad, FitConfig())


class TestParameterScales:
    def test_blocks_are_floored(self, small_model):
        params = mean_params(small_model, SIZE)
        scales = parameter_scales(small_model, params)
        for block in (scales.d_theta, scales.d_beta, scales.d_alpha):
            assert np.all(block >= SCALE_FLOOR * block.max() - 1e-12)
        assert scales.d_alpha[1:].tolist() == [1.0, 1.0]

    def test_root_rotation_moves_more_than_a_wrist(self, small_model):
        params = mean_params(small_model, SIZE)
        scales = parameter_scales(small_model, params)
        wrist = small_model.skeleton.lsp14_indices()[6]
        assert scales.d_theta[0].max() > scales.d_theta[wrist].max()

    def test_restricted_to_matched_vertices(self, small_model, perturbed):
        _, _, pairs, _ = perturbed
        params = mean_params(small_model, SIZE)
        everywhere = parameter_scales(small_model, params)
        matched = parameter_scales(small_model, params, pairs.vertex_ids)
        assert matched.d_theta.shape == everywhere.d_theta.shape
        assert not np.allclose(matched.d_theta, everywhere.d_theta)


class TestFit:
    def test_fixed_point_converges_immediately(self, small_model):
        start = mean_params(small_model, SIZE)
        image, pairs, _ = anchored_target(small_model, start)
        result = fit(image, small_model, FitConfig(supervision="rpj,adv", stride=2), pairs=pairs)
        assert result.converged
        assert result.iterations == 1
        assert result.final_loss == 0.0
        assert result.params.max_abs_difference(start) == 0.0

    def test_ground_truth_refit(self, small_model, perturbed):
        truth, image, pairs, body = perturbed
        result = fit(image, small_model, FitConfig(supervision="rpj,adv,rec,rgr", stride=2),
                     gt_joints=body.lsp14, gt_params=truth, initial=truth, pairs=pairs)
        assert result.converged
        assert result.final_loss < 1e-6

    def test_empty_target(self, small_model):
        with pytest.raises(EmptyTargetError):
            fit(IUVImage.background(*SIZE), small_model, FitConfig(stride=2))

    def test_too_few_pairs(self, small_model, perturbed):
        _, image, _, _ = perturbed
        with pytest.raises(EmptyTargetError):
            fit(image, small_model, FitConfig(stride=2, min_pairs=10 ** 6))

    def test_size_mismatch(self, small_model, perturbed):
        _, image, _, _ = perturbed
        with pytest.raises(DimensionError):
            fit(image, small_model, FitConfig(stride=2, image_size=(32, 32)))

    def test_foreign_part(self, small_model):
        part = np.zeros(SIZE, dtype=np.uint8)
        part[20:30, 20:30] = small_model.part_count + 1
        target = IUVImage(part, np.zeros(SIZE), np.zeros(SIZE))
        with pytest.raises(DimensionError):
            fit(target, small_model, FitConfig(stride=2))

    def test_best_loss_never_increases(self, small_model, perturbed):
        _, image, pairs, _ = perturbed
        result = fit(image, small_model, FitConfig(max_iterations=12, stride=2), pairs=pairs)
        best = result.best_losses()
        assert len(best) == result.iterations
        assert np.all(np.diff(best) <= 0.0)
        assert result.final_loss == best[-1]
        assert result.final_loss <= result.initial_loss

    def test_loss_log(self, small_model, perturbed, tmp_path):
        _, image, pairs, _ = perturbed
        result = fit(image, small_model, FitConfig(max_iterations=4, stride=2, supervision="rpj,adv"), pairs=pairs)
        log = pd.read_csv(result.save_loss_log(tmp_path / "loss.csv"))
        assert list(log.columns) == LOSS_LOG_COLUMNS
        assert log["iter"].tolist() == list(range(result.iterations))
        assert np.all(log["l_msk"] == 0.0)
        np.testing.assert_allclose(log["total"], log["l_rpj"] + log["l_adv"], rtol=1e-8)

    def test_divergence_keeps_the_partial_result(self, small_model, perturbed):
        _, image, pairs, _ = perturbed
        config = FitConfig(max_iterations=5, stride=2, divergence_factor=0.0, divergence_patience=1)
        with pytest.raises(DivergenceError) as excinfo:
            fit(image, small_model, config, pairs=pairs)
        partial = excinfo.value.partial_result
        assert partial.iterations == 1
        assert partial.initial_loss > 0.0

    def test_dense_landmarks_recover_the_pose(self, small_model, perturbed):
        truth, image, pairs, body = perturbed
        rest = pose_body(small_model, PoseParams.zeros(small_model.joint_count),
                         ShapeParams.zeros(small_model.shape_rank))
        result = fit(image, small_model, FitConfig(stride=2, supervision="rpj,adv"), pairs=pairs)
        fitted = pose_body(small_model, result.params.pose, result.params.shape)
        assert result.iterations <= 500
        assert 5.0 * mpjpe(fitted.lsp14, body.lsp14) <= mpjpe(rest.lsp14, body.lsp14)

    def test_rejected_steps_keep_the_parameters(self, small_model, perturbed):
        _, image, pairs, _ = perturbed
        config = FitConfig(max_iterations=15, stride=2, supervision="rpj,adv", step_theta=50.0, step_alpha=50.0)
        result = fit(image, small_model, config, pairs=pairs)
        totals = [report.total for report in result.reports]
        assert np.all(np.diff(totals) <= 0.0)
        assert result.final_loss == totals[-1]

    def test_plain_steps_without_backoff(self, small_model, perturbed):
        _, image, pairs, _ = perturbed
        config = FitConfig(max_iterations=3, stride=2, supervision="rpj,adv", backoff=False,
                           jacobian_scaling=False, step_theta=1e-3, step_beta=1e-3, step_alpha=1e-2)
        result = fit(image, small_model, config, pairs=pairs)
        assert result.iterations == 3
        assert len({report.total for report in result.reports}) == 3

    def test_rematching(self, small_model, perturbed):
        _, image, _, _ = perturbed
        result = fit(image, small_model, FitConfig(max_iterations=4, stride=2, rematch_every=2))
        assert result.iterations == 4
        assert len(result.pairs) > 0

    def test_summary(self, small_model, perturbed):
        _, image, pairs, _ = perturbed
        result = fit(image, small_model, FitConfig(max_iterations=2, stride=2, supervision="rpj"), pairs=pairs)
        summary = result.summary("0000-s000_0000")
        assert summary.sample_id == "0000-s000_0000"
        assert len(summary.theta) == small_model.joint_count
        assert len(summary.beta) == small_model.shape_rank
        assert len(summary.alpha) == 3


class TestRecoveryExperiment:
    def test_table_layout(self, small_model):
        config = FitConfig(max_iterations=3, stride=2)
        frame = run_recovery_experiment(small_model, count=2, seed=0, config=config, image_size=SIZE,
                                        ladder=("rpj,adv", "rpj,adv,rec"))
        assert list(frame.columns) == EXPERIMENT_COLUMNS
        assert frame["supervision"].tolist() == ["rpj,adv", "rpj,adv,rec"]
        assert (frame["samples"] + frame["failed"] == 2).all()

    @pytest.mark.slow
    def test_full_supervision_recovers_the_pose(self, small_model, perturbed):
        truth, image, pairs, body = perturbed
        config = FitConfig(max_iterations=300, stride=2, supervision=SupervisionFlags.parse("rpj,msk,adv,rec,rgr"))
        result = fit(image, small_model, config, gt_joints=body.lsp14, gt_params=truth, pairs=pairs)
        start = pose_body(small_model, PoseParams.zeros(small_model.joint_count),
                          ShapeParams.zeros(small_model.shape_rank))
        fitted = pose_body(small_model, result.params.pose, result.params.shape)
        assert mpjpe(fitted.lsp14, body.lsp14) < mpjpe(start.lsp14, body.lsp14)
        assert mpjpe(fitted.lsp14, body.lsp14) < 0.05 * small_model.body_height

    @pytest.mark.slow
    def test_regression_lowers_the_parameter_error(self, small_model, perturbed):
        truth, image, pairs, body = perturbed
        errors = {}
        for supervision in ("rpj,msk,adv", "rpj,msk,adv,rgr"):
            config = FitConfig(stride=2, supervision=supervision)
            result = fit(image, small_model, config, gt_params=truth, pairs=pairs)
            errors[supervision] = mse_params(result.params, truth)
        assert errors["rpj,msk,adv,rgr"] < errors["rpj,msk,adv"]

    @pytest.mark.slow
    def test_each_rung_of_the_ladder_helps(self, small_model):
        config = FitConfig(max_iterations=300, stride=2)
        frame = run_recovery_experiment(small_model, count=8, seed=0, config=config, image_size=SIZE)
        base, with_joints, with_params = frame.to_dict("records")
        assert 5.0 * base["final_mpjpe"] <= base["initial_mpjpe"]
        assert base["final_mpjpe"] < 0.05 * small_model.body_height * M_TO_MM
        assert with_joints["final_mpvpe"] < base["final_mpvpe"]
        assert with_params["final_mse"] < with_joints["final_mse"]
