import shutil

import numpy as np
import pytest

from app.body.model_io import load_model
from app.body.params import CameraParams, ModelParams, PoseParams, ShapeParams
from app.core.errors import (
    ConfigurationError,
    DatasetIOError,
    DimensionError,
    EmptyTargetError,
    FormatError,
    InputError,
    ParameterError,
)
from app.fitting.correspondence import load_correspondences
from app.fitting.fitter import fit, mean_params
from app.moca.generator import MODEL_FILE, SequencePlan, generate, plan_sequences, sample_configuration, sample_id
from app.moca.manifest import load_manifest, manifest_path, split_leaks, summarize, verify_manifest
from app.moca.preprocess import frame_to_canvas, occlude_rectangle, saliency_select
from app.moca.sampling import (
    clamp_to_limits,
    quantize,
    quantize_params,
    sample_camera,
    sample_perturbation,
    sample_pose_sequence,
    sample_shape,
)
from app.render.iuv import IUVImage, load_iuv
from app.schemas.dataset import GenerateConfig
from app.schemas.fitting import FitConfig
from tests.conftest import TINY_DATASET


def block_image(rows, cols, size=(64, 64), label=3):
    part = np.zeros(size, dtype=np.uint8)
    part[rows, cols] = label
    u = np.where(part > 0, 0.25, 0.0)
    v = np.where(part > 0, 0.75, 0.0)
    return IUVImage(part, u, v)


class TestSampling:
    def test_pose_sequence_is_reproducible(self, small_model):
        first = sample_pose_sequence([3, 0], 5, small_model.skeleton)
        second = sample_pose_sequence([3, 0], 5, small_model.skeleton)
        other = sample_pose_sequence([3, 1], 5, small_model.skeleton)
        assert all(np.array_equal(a.rotations, b.rotations) for a, b in zip(first, second))
        assert not np.array_equal(first[0].rotations, other[0].rotations)

    def test_pose_sequence_respects_limits(self, full_model):
        limits = full_model.skeleton.angle_limits
        for pose in sample_pose_sequence(11, 30, full_model.skeleton):
            assert np.all(np.linalg.norm(pose.rotations, axis=1) <= 0.95 * limits + 1e-12)

    def test_pose_sequence_length(self, small_model):
        with pytest.raises(ParameterError):
            sample_pose_sequence(0, 0, small_model.skeleton)

    def test_clamp_to_limits(self):
        clamped = clamp_to_limits(np.array([[3.0, 0.0, 0.0], [0.0, 0.2, 0.0]]), np.array([1.0, 1.0]))
        np.testing.assert_allclose(clamped, [[1.0, 0.0, 0.0], [0.0, 0.2, 0.0]])

    def test_shape_is_truncated(self):
        shape = sample_shape(4, 500)
        assert shape.rank == 500
        assert np.all(np.abs(shape.coefficients) <= 3.0)
        assert np.array_equal(shape.coefficients, sample_shape(4, 500).coefficients)

    def test_camera_jitter(self, small_model):
        mean = mean_params(small_model, (100, 200)).camera
        for seed in range(20):
            camera = sample_camera(seed, (100, 200), mean)
            assert 0.8 * mean.f <= camera.f <= 1.2 * mean.f
            assert abs(camera.x - mean.x) <= 20.0
            assert abs(camera.y - mean.y) <= 10.0

    def test_perturbation_moves_only_limbs(self, small_model):
        base = mean_params(small_model, (64, 64))
        moved, chosen = sample_perturbation(9, base, small_model.skeleton, joints=3)
        changed = np.flatnonzero(np.any(moved.pose.rotations != base.pose.rotations, axis=1))
        assert set(changed.tolist()) <= set(chosen.tolist())
        assert np.all(np.linalg.norm(moved.pose.rotations, axis=1) <= 0.2 + 1e-12)
        assert np.all(np.abs(moved.shape.coefficients) <= 0.5)

    def test_quantize(self):
        assert quantize(1.0 / 3.0) == 0.333333333
        params = ModelParams(PoseParams([[np.pi, 0.0, 0.0]]), ShapeParams([2.0 / 3.0]),
                             CameraParams(1.0 / 7.0, 0.0, 1e-20))
        q = quantize_params(params)
        assert q.pose.rotations[0, 0] == 3.14159265
        assert q.shape.coefficients[0] == 0.666666667
        assert quantize_params(q).max_abs_difference(q) == 0.0

    def test_sample_configuration_is_reproducible(self, small_model):
        first = sample_configuration(small_model, 5, (64, 64))
        second = sample_configuration(small_model, 5, (64, 64))
        assert first.max_abs_difference(second) == 0.0


class TestPlans:
    def test_split_by_animation(self):
        config = GenerateConfig(sequences=10, frames=5, seed=7)
        plans = plan_sequences(config)
        assert len(plans) == 20
        test = [plan for plan in plans if plan.split == "test"]
        assert len({plan.animation for plan in test}) == 1
        assert len(test) * config.frames == 10

    def test_test_shapes_never_reach_training(self):
        plans = plan_sequences(GenerateConfig(sequences=20, shapes_per_sequence=3, seed=1))
        train = {plan.shape for plan in plans if plan.split == "train"}
        test = {plan.shape for plan in plans if plan.split == "test"}
        assert train.isdisjoint(test)

    def test_reproducible(self):
        config = GenerateConfig(sequences=6, seed=3)
        assert plan_sequences(config) == plan_sequences(config)
        assert plan_sequences(config) != plan_sequences(config.model_copy(update={"seed": 4}))

    def test_split_sizes(self):
        assert GenerateConfig(sequences=3, test_ratio=0.5).test_sequences == 2
        assert GenerateConfig(sequences=2, test_ratio=0.9).test_sequences == 1
        assert GenerateConfig(sequences=10).pool_size == 20

    def test_identifiers(self):
        plan = SequencePlan(3, 7, "train")
        assert plan.sequence_id == "0003-s007"
        assert sample_id(plan, 2) == "0003-s007_0002"

    @pytest.mark.parametrize("overrides", [
        {"sequences": 1},
        {"frames": 0},
        {"test_ratio": 1.0},
        {"image_size": (0, 10)},
        {"occlusion_min": 0.5, "occlusion_max": 0.2},
    ])
    def test_invalid_settings(self, overrides):
        with pytest.raises(ConfigurationError):
            GenerateConfig(**overrides)


class TestPreprocess:
    def test_saliency_prefers_large_central_masks(self):
        big = np.zeros((64, 64), dtype=bool)
        big[20:44, 24:40] = True
        small = np.zeros((64, 64), dtype=bool)
        small[0:4, 0:4] = True
        assert saliency_select([small, big], (64, 64)) == 1

    def test_saliency_ties_go_to_the_first_mask(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[4:8, 4:8] = True
        assert saliency_select([mask, mask.copy()], (32, 32)) == 0

    def test_saliency_input_checks(self):
        with pytest.raises(InputError):
            saliency_select([], (8, 8))
        with pytest.raises(DimensionError):
            saliency_select([np.zeros((4, 4), dtype=bool)], (8, 8))

    def test_canvas_framing(self):
        framed = frame_to_canvas(block_image(slice(10, 40), slice(20, 36)))
        assert framed.size == (224, 224)
        r0, c0, r1, c1 = framed.bounding_box()
        assert r1 - r0 == 165
        assert r0 == (224 - 165) // 2
        assert c1 - c0 == 88
        assert set(np.unique(framed.part)) == {0, 3}
        assert np.all(framed.u[framed.foreground] == np.float32(0.25))

    def test_canvas_crops_wide_people(self):
        framed = frame_to_canvas(block_image(slice(30, 34), slice(0, 64)), canvas=64, person_height=40)
        assert framed.size == (64, 64)
        assert framed.foreground[:, 0].any() and framed.foreground[:, -1].any()

    def test_canvas_needs_a_person(self):
        with pytest.raises(EmptyTargetError):
            frame_to_canvas(IUVImage.background(8, 8))
        with pytest.raises(ParameterError):
            frame_to_canvas(block_image(slice(1, 4), slice(1, 4)), canvas=0)

    def test_occlusion_inside_the_person(self, rng):
        image = block_image(slice(10, 50), slice(20, 40))
        occluded, (top, left, bottom, right) = occlude_rectangle(image, rng, 0.1, 0.2)
        assert 10 <= top < bottom <= 50
        assert 20 <= left < right <= 40
        assert not occluded.foreground[top:bottom, left:right].any()
        removed = image.foreground_count - occluded.foreground_count
        assert removed == (bottom - top) * (right - left)
        assert 0.05 * 800 <= removed <= 0.3 * 800

    def test_occlusion_of_an_empty_image(self, rng):
        image = IUVImage.background(8, 8)
        occluded, rectangle = occlude_rectangle(image, rng)
        assert rectangle == (0, 0, 0, 0)
        assert occluded.identical_to(image)

    def test_occlusion_fractions(self, rng):
        with pytest.raises(ParameterError):
            occlude_rectangle(block_image(slice(1, 4), slice(1, 4)), rng, 0.5, 0.1)


class TestGeneratedDataset:
    def test_counts(self, tiny_dataset):
        _, manifest = tiny_dataset
        assert len(manifest.records) == 6
        assert manifest.counts == {"train": 4, "test": 2}
        assert manifest.stride == 2
        assert manifest.part_count == 12
        assert manifest.dropped == 0

    def test_manifest_is_clean(self, tiny_dataset):
        root, manifest = tiny_dataset
        assert verify_manifest(manifest, root) == []
        assert split_leaks(manifest) == []
        summary = summarize(manifest)
        assert summary.sequences == {"train": 2, "test": 1}

    def test_manifest_reloads(self, tiny_dataset):
        root, manifest = tiny_dataset
        loaded = load_manifest(root)
        assert [r.sample_id for r in loaded.records] == [r.sample_id for r in manifest.records]
        assert loaded.config.template.part_count == 12
        assert loaded.find(manifest.records[0].sample_id).theta == manifest.records[0].theta
        assert loaded.find("no-such-sample") is None

    def test_records_point_at_files(self, tiny_dataset):
        root, manifest = tiny_dataset
        for record in manifest.records:
            image = load_iuv(root / record.iuv_path)
            assert image.size == (64, 64)
            assert image.foreground_count > 0
            assert len(load_correspondences(root / record.corr_path, manifest.tau)) == record.pair_count
            assert record.sample_id.startswith(record.sequence_id)

    def test_parameters_are_quantized(self, tiny_dataset):
        _, manifest = tiny_dataset
        for record in manifest.records:
            theta = np.array(record.theta)
            assert np.array_equal(quantize(theta), theta)

    def test_regeneration_is_byte_identical(self, tiny_dataset, small_model, tmp_path):
        root, manifest = tiny_dataset
        again = tmp_path / "again"
        generate(TINY_DATASET, again, model=small_model)
        assert manifest_path(again).read_bytes() == manifest_path(root).read_bytes()
        assert (again / MODEL_FILE).read_bytes() == (root / MODEL_FILE).read_bytes()
        for record in manifest.records:
            assert (again / record.iuv_path).read_bytes() == (root / record.iuv_path).read_bytes()
            assert (again / record.corr_path).read_bytes() == (root / record.corr_path).read_bytes()

    def test_ground_truth_refit_from_disk(self, tiny_dataset):
        root, manifest = tiny_dataset
        model = load_model(root / MODEL_FILE)
        config = FitConfig(supervision="rpj,adv,rec,rgr", stride=manifest.stride)
        for record in manifest.records[:2]:
            truth = record.params()
            result = fit(load_iuv(root / record.iuv_path), model, config,
                         gt_joints=np.array(record.joints14), gt_params=truth, initial=truth,
                         pairs=load_correspondences(root / record.corr_path, manifest.tau))
            assert result.final_loss < 1e-6

    def test_occlusion_only_on_training_frames(self, small_model, tmp_path):
        config = TINY_DATASET.model_copy(update={"occlusion": True})
        manifest = generate(config, tmp_path / "occluded", model=small_model)
        for record in manifest.records:
            if record.split == "test":
                assert record.occlusion is None
            else:
                top, left, bottom, right = record.occlusion
                image = load_iuv(tmp_path / "occluded" / record.iuv_path)
                assert not image.foreground[top:bottom, left:right].any()

    def test_verify_reports_damage(self, tiny_dataset, tmp_path):
        root, manifest = tiny_dataset
        copy = tmp_path / "copy"
        shutil.copytree(root, copy)
        victim = manifest.records[0]
        (copy / victim.iuv_path).unlink()
        (copy / manifest.records[1].corr_path).write_text("pixel_x,vertex_id\n1.5,3\n")
        problems = verify_manifest(manifest, copy)
        assert any(victim.sample_id in problem and "missing" in problem for problem in problems)
        assert any(manifest.records[1].sample_id in problem for problem in problems)

    def test_verify_reports_leaks(self, tiny_dataset):
        root, manifest = tiny_dataset
        leaked = manifest.model_copy(deep=True)
        test_record = leaked.split("test")[0]
        test_record.split = "train"
        leaked.counts = {"train": 5, "test": 1}
        assert any("animations in both splits" in problem for problem in verify_manifest(leaked, root))

    def test_manifest_errors(self, tmp_path):
        with pytest.raises(DatasetIOError):
            load_manifest(tmp_path)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_sparse_samples_are_dropped(self, tiny_dataset, small_model, tmp_path):
        _, manifest = tiny_dataset
        config = TINY_DATASET.model_copy(update={"min_pairs": 10**6})
        sparse = generate(config, tmp_path / "sparse", model=small_model)
        assert sparse.records == []
        assert sparse.dropped == len(manifest.records)
        assert load_manifest(tmp_path / "sparse").dropped == sparse.dropped
