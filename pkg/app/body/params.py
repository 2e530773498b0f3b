"""Parameter containers for pose (theta), shape (beta) and camera (alpha)."""
from dataclasses import dataclass

import numpy as np

from app.body.rotations import canonicalize_axis_angle
from app.core.errors import DimensionError, ParameterError


def _finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ParameterError(f"{name} contains non-finite values")


@dataclass(frozen=True, eq=False)
class PoseParams:
    """Per-joint axis-angle rotations, joint_count x 3 radians"""
    rotations: np.ndarray

    def __post_init__(self):
        rotations = np.array(self.rotations, dtype=np.float64)
        if rotations.ndim != 2 or rotations.shape[1] != 3:
            raise DimensionError(f"Pose must be joint_count x 3, got {rotations.shape}")
        _finite("Pose", rotations)
        object.__setattr__(self, "rotations", rotations)

    @classmethod
    def zeros(cls, joint_count: int) -> "PoseParams":
        return cls(np.zeros((joint_count, 3)))

    @property
    def joint_count(self) -> int:
        return self.rotations.shape[0]

    def canonical(self) -> "PoseParams":
        return PoseParams(canonicalize_axis_angle(self.rotations))


@dataclass(frozen=True, eq=False)
class ShapeParams:
    """Shape coefficients, one per basis mode"""
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=np.float64)
        if coefficients.ndim != 1:
            raise DimensionError(f"Shape must be a vector, got {coefficients.shape}")
        _finite("Shape", coefficients)
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, rank: int) -> "ShapeParams":
        return cls(np.zeros(rank))

    @property
    def rank(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class CameraParams:
    """Orthographic camera: scale f (pixels per meter) and axis offset (x, y) in pixels"""
    f: float
    x: float
    y: float

    def __post_init__(self):
        values = np.array([self.f, self.x, self.y], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ParameterError(f"Camera contains non-finite values: {values.tolist()}")
        if self.f <= 0:
            raise ParameterError(f"Camera scale must be positive, got f={self.f}")
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    def as_array(self) -> np.ndarray:
        return np.array([self.f, self.x, self.y])

    @classmethod
    def from_array(cls, values) -> "CameraParams":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape != (3,):
            raise DimensionError(f"Camera vector must have 3 entries, got {values.shape}")
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """The full (theta, beta, alpha) estimate handled by losses and the fitter"""
    pose: PoseParams
    shape: ShapeParams
    camera: CameraParams

    def copy_with(self, pose=None, shape=None, camera=None) -> "ModelParams":
        return ModelParams(
            pose=self.pose if pose is None else pose,
            shape=self.shape if shape is None else shape,
            camera=self.camera if camera is None else camera,
        )

    def max_abs_difference(self, other: "ModelParams") -> float:
        return float(max(
            np.max(np.abs(self.pose.rotations - other.pose.rotations), initial=0.0),
            np.max(np.abs(self.shape.coefficients - other.shape.coefficients), initial=0.0),
            np.max(np.abs(self.camera.as_array() - other.camera.as_array())),
        ))
