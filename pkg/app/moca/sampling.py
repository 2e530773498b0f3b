"""Random draws of poses, shapes and cameras for synthetic data.

Every function takes a seed (an int or a list of ints, as accepted by
numpy's default_rng) so the same arguments always give the same draw.
"""
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter1d

from app.body.params import CameraParams, ModelParams, PoseParams, ShapeParams
from app.body.skeleton import JointKind, Skeleton
from app.core.errors import ParameterError
from app.render.camera import ImageSize
from app.schemas.dataset import PoseStyle

SeedLike = Union[int, Sequence[int]]

SHAPE_TRUNCATION = 3.0
CAMERA_SCALE_JITTER = 0.2
CAMERA_OFFSET_JITTER = 0.1
NOISE_SMOOTHING = 3.0
PERTURBED_JOINT_KINDS = (JointKind.LIMB,)


def _rng(seed: SeedLike) -> np.random.Generator:
    return np.random.default_rng(seed)


def clamp_to_limits(rotations: np.ndarray, limits: np.ndarray, margin: float = 1.0) -> np.ndarray:
    """Shrink each axis-angle vector whose magnitude exceeds margin * limit"""
    rotations = np.asarray(rotations, dtype=np.float64)
    angles = np.linalg.norm(rotations, axis=-1)
    bound = margin * np.asarray(limits, dtype=np.float64)
    safe = np.where(angles > 0, angles, 1.0)
    factor = np.where(angles > bound, bound / safe, 1.0)
    return rotations * factor[..., None]


def sample_pose_sequence(seed: SeedLike, length: int, skeleton: Skeleton,
                         style: Optional[PoseStyle] = None) -> List[PoseParams]:
    """Smooth per-joint sinusoid-plus-noise trajectories kept inside the joint limits"""
    if length < 1:
        raise ParameterError(f"Sequence length must be >= 1, got {length}")
    style = style or PoseStyle()
    rng = _rng(seed)
    J = skeleton.joint_count
    limits = skeleton.angle_limits
    kinds = skeleton.kinds

    amplitude = np.zeros((J, 3))
    for j, kind in enumerate(kinds):
        if kind == JointKind.ROOT:
            amplitude[j] = [style.root_tilt, style.root_yaw, style.root_tilt]
        else:
            amplitude[j] = min(style.amplitude, 0.5 * limits[j])
    amplitude = amplitude * rng.uniform(0.0, 1.0, size=(J, 3))
    period = rng.uniform(style.min_period, style.max_period, size=(J, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(J, 3))

    t = np.arange(length, dtype=np.float64)[:, None, None]
    trajectory = amplitude * np.sin(2.0 * np.pi * t / period + phase)
    noise = rng.normal(0.0, 1.0, size=(length, J, 3))
    if length > 1:
        noise = gaussian_filter1d(noise, NOISE_SMOOTHING, axis=0, mode="nearest")
    trajectory = trajectory + style.noise * noise

    trajectory = clamp_to_limits(trajectory, limits, style.limit_margin)
    return [PoseParams(frame) for frame in trajectory]


def sample_shape(seed: SeedLike, rank: int) -> ShapeParams:
    """Unit-variance normal per mode, truncated at +-3"""
    if rank < 0:
        raise ParameterError(f"Shape rank must be >= 0, got {rank}")
    values = stats.truncnorm.rvs(-SHAPE_TRUNCATION, SHAPE_TRUNCATION, size=rank, random_state=_rng(seed))
    return ShapeParams(np.clip(np.atleast_1d(values), -SHAPE_TRUNCATION, SHAPE_TRUNCATION))


def sample_camera(seed: SeedLike, image_size: ImageSize, mean: CameraParams) -> CameraParams:
    """Mean camera with the scale jittered by +-20% and the offset by +-10% of the image"""
    height, width = image_size
    rng = _rng(seed)
    f = mean.f * (1.0 + rng.uniform(-CAMERA_SCALE_JITTER, CAMERA_SCALE_JITTER))
    x = mean.x + width * rng.uniform(-CAMERA_OFFSET_JITTER, CAMERA_OFFSET_JITTER)
    y = mean.y + height * rng.uniform(-CAMERA_OFFSET_JITTER, CAMERA_OFFSET_JITTER)
    return CameraParams(f, x, y)


def sample_perturbation(seed: SeedLike, base: ModelParams, skeleton: Skeleton, joints: int = 3,
                        max_angle: float = 0.2, max_shape: float = 0.5) -> Tuple[ModelParams, np.ndarray]:
    """Rotate a few limb joints by at most max_angle and move every shape mode by at most max_shape"""
    rng = _rng(seed)
    candidates = [j for j, kind in enumerate(skeleton.kinds) if kind in PERTURBED_JOINT_KINDS]
    chosen = np.sort(rng.choice(candidates, size=min(joints, len(candidates)), replace=False))

    rotations = base.pose.rotations.copy()
    directions = rng.normal(size=(chosen.size, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    rotations[chosen] += directions * rng.uniform(0.0, max_angle, size=(chosen.size, 1))
    beta = base.shape.coefficients + rng.uniform(-max_shape, max_shape, size=base.shape.rank)
    return base.copy_with(pose=PoseParams(rotations), shape=ShapeParams(beta)), chosen


def quantize(values, digits: int = 9) -> np.ndarray:
    """Round to `digits` significant decimal digits, as written to manifests"""
    values = np.asarray(values, dtype=np.float64)
    return np.vectorize(lambda x: float(f"{x:.{digits}g}"), otypes=[np.float64])(values) if values.size else values


def quantize_params(params: ModelParams, digits: int = 9) -> ModelParams:
    return ModelParams(PoseParams(quantize(params.pose.rotations, digits)),
                       ShapeParams(quantize(params.shape.coefficients, digits)),
                       CameraParams.from_array(quantize(params.camera.as_array(), digits)))
