"""Synthetic paired dataset generation.

A rendered sequence is one (animation, shape) pair with its own camera.
Animations and shapes are split into train and test pools up front, so no
test animation or test shape is ever rendered into the training split.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from app.body.model import BodyModel, build_procedural_template, pose_body
from app.body.model_io import load_model, save_model
from app.body.params import ModelParams
from app.core.errors import DatasetIOError
from app.fitting.correspondence import (
    anchor_landmarks,
    build_iuv_index,
    calibrate_stride,
    match_pixels,
    save_correspondences,
)
from app.moca.manifest import save_manifest
from app.moca.preprocess import occlude_rectangle
from app.moca.sampling import (
    quantize,
    quantize_params,
    sample_camera,
    sample_pose_sequence,
    sample_shape,
)
from app.render.camera import mean_camera, project
from app.render.iuv import save_iuv
from app.render.raster import rasterize
from app.schemas.dataset import GenerateConfig, DatasetManifest, SampleRecord

logger = logging.getLogger(__name__)

MODEL_FILE = "model.drbm"
IUV_DIR = "iuv"
CORR_DIR = "corr"

# Stream tags keep the random draws of different concerns independent
_POSE, _SHAPE, _CAMERA, _OCCLUSION, _SPLIT, _ASSIGN = range(6)


@dataclass(frozen=True)
class SequencePlan:
    animation: int
    shape: int
    split: str

    @property
    def shape_id(self) -> str:
        return f"s{self.shape:03d}"

    @property
    def sequence_id(self) -> str:
        return f"{self.animation:04d}-{self.shape_id}"


def plan_sequences(config: GenerateConfig) -> List[SequencePlan]:
    """Assign animations and shapes to splits and pick the shapes of every animation"""
    rng = np.random.default_rng([config.seed, _SPLIT])
    animations = rng.permutation(config.sequences)
    test_animations = set(animations[:config.test_sequences].tolist())
    shapes = rng.permutation(config.pool_size)
    pools = {
        "test": np.sort(shapes[:config.test_shapes]),
        "train": np.sort(shapes[config.test_shapes:]),
    }

    plans = []
    for animation in range(config.sequences):
        split = "test" if animation in test_animations else "train"
        chooser = np.random.default_rng([config.seed, _ASSIGN, animation])
        picked = np.sort(chooser.choice(pools[split], size=config.shapes_per_sequence, replace=False))
        plans.extend(SequencePlan(animation, int(shape), split) for shape in picked)
    return plans


def sample_id(plan: SequencePlan, frame: int) -> str:
    return f"{plan.sequence_id}_{frame:04d}"


def sample_configuration(model: BodyModel, seed: int, image_size) -> ModelParams:
    """One pose, shape and camera drawn from the same streams as a generated sequence"""
    size = tuple(image_size)
    pose = sample_pose_sequence([seed, _POSE, 0], 1, model.skeleton)[0]
    shape = sample_shape([seed, _SHAPE, 0], model.shape_rank)
    camera = sample_camera([seed, _CAMERA, 0, 0], size, mean_camera(model.mesh.vertices, size))
    return quantize_params(ModelParams(pose, shape, camera))


def render_sequence(model: BodyModel, plan: SequencePlan, config: GenerateConfig, stride: int,
                    root: Union[str, Path]) -> Tuple[List[SampleRecord], int]:
    """Render, match and write every frame of one sequence; returns its records and the dropped count"""
    root = Path(root)
    size = tuple(config.image_size)
    poses = sample_pose_sequence([config.seed, _POSE, plan.animation], config.frames, model.skeleton, config.style)
    shape = sample_shape([config.seed, _SHAPE, plan.shape], model.shape_rank)
    camera = sample_camera([config.seed, _CAMERA, plan.animation, plan.shape], size,
                           mean_camera(model.mesh.vertices, size))
    index = build_iuv_index(model)

    records = []
    dropped = 0
    for frame, pose in enumerate(poses):
        params = quantize_params(ModelParams(pose, shape, camera))
        body = pose_body(model, params.pose, params.shape)
        image, _ = rasterize(body, params.camera, size)

        rectangle = None
        if config.occlusion and plan.split == "train":
            rng = np.random.default_rng([config.seed, _OCCLUSION, plan.animation, plan.shape, frame])
            image, rectangle = occlude_rectangle(image, rng, config.occlusion_min, config.occlusion_max)

        pairs = match_pixels(image, index, config.tau, stride)
        pairs = anchor_landmarks(pairs, project(body.posed_vertices, params.camera))
        if len(pairs) < config.min_pairs:
            dropped += 1
            continue

        name = sample_id(plan, frame)
        iuv_path = f"{IUV_DIR}/{name}.driu"
        corr_path = f"{CORR_DIR}/{name}.csv"
        save_iuv(image, root / iuv_path)
        save_correspondences(pairs, root / corr_path)
        records.append(SampleRecord(
            sample_id=name,
            sequence_id=plan.sequence_id,
            animation=plan.animation,
            shape_id=plan.shape_id,
            frame=frame,
            split=plan.split,
            iuv_path=iuv_path,
            corr_path=corr_path,
            theta=params.pose.rotations.tolist(),
            beta=params.shape.coefficients.tolist(),
            alpha=params.camera.as_array().tolist(),
            joints14=quantize(body.lsp14).tolist(),
            pair_count=len(pairs),
            occlusion=None if rectangle is None else list(rectangle),
        ))
    return records, dropped


def _render_task(args) -> Tuple[List[SampleRecord], int]:
    return render_sequence(*args)


def generate(config: GenerateConfig, root: Union[str, Path], model: Optional[BodyModel] = None,
             jobs: int = 1) -> DatasetManifest:
    root = Path(root)
    logger.info(f"Generating dataset {config.name}: {config.sequences} sequences x "
                f"{config.shapes_per_sequence} shapes x {config.frames} frames into {root}")
    stats: Dict[str, Any] = {"sequences": 0, "samples": 0, "dropped": 0}

    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / IUV_DIR).mkdir(exist_ok=True)
        (root / CORR_DIR).mkdir(exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Cannot create dataset directory {root}: {e}")

    # Step 1: model and matcher calibration
    model = model or build_procedural_template(config.template)
    # render with the single-precision model as stored, so refits from disk see identical geometry
    model = load_model(save_model(model, root / MODEL_FILE))
    size = tuple(config.image_size)
    stride = config.stride or calibrate_stride(model, config.tau, size)

    # Step 2: render every sequence; frames are independent so sequences fan out
    plans = plan_sequences(config)
    tasks = [(model, plan, config, stride, root) for plan in plans]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_render_task, tasks))
    else:
        results = [_render_task(task) for task in tasks]

    # Step 3: single writer assembles the manifest in plan order
    records: List[SampleRecord] = []
    for (sequence_records, dropped), plan in zip(results, plans):
        records.extend(sequence_records)
        stats["dropped"] += dropped
        stats["sequences"] += 1
        logger.debug(f"Sequence {plan.sequence_id} ({plan.split}): {len(sequence_records)} samples")
    stats["samples"] = len(records)

    manifest = DatasetManifest(
        name=config.name,
        seed=config.seed,
        model_path=MODEL_FILE,
        image_size=size,
        part_count=model.part_count,
        tau=config.tau,
        stride=stride,
        records=records,
        counts={split: sum(1 for r in records if r.split == split) for split in ("train", "test")},
        dropped=stats["dropped"],
        config=config,
    )
    save_manifest(manifest, root)
    logger.info(f"Dataset {config.name} done: {stats}")
    return manifest
