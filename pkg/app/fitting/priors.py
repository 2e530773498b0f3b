"""Plausibility priors on (pose, shape).

A prior is anything with `evaluate(pose, shape) -> (value, d_theta, d_beta)`.
The default penalizes joint rotation magnitudes beyond their anatomical limit
with a squared hinge, plus an optional ridge on the shape coefficients. A
learned discriminator can be dropped in behind the same interface.
"""
from typing import Protocol, Tuple, runtime_checkable

import numpy as np

from app.body.params import PoseParams, ShapeParams
from app.core.errors import DimensionError


@runtime_checkable
class PlausibilityPrior(Protocol):
    def evaluate(self, pose: PoseParams, shape: ShapeParams) -> Tuple[float, np.ndarray, np.ndarray]:
        ...


class JointLimitPrior:
    def __init__(self, limits: np.ndarray, shape_weight: float = 0.0):
        self.limits = np.asarray(limits, dtype=np.float64)
        self.shape_weight = float(shape_weight)

    def evaluate(self, pose: PoseParams, shape: ShapeParams) -> Tuple[float, np.ndarray, np.ndarray]:
        if pose.joint_count != self.limits.shape[0]:
            raise DimensionError(f"Prior covers {self.limits.shape[0]} joints, pose has {pose.joint_count}")
        angles = np.linalg.norm(pose.rotations, axis=1)
        excess = np.maximum(angles - self.limits, 0.0)
        value = float(np.sum(excess ** 2) + self.shape_weight * np.sum(shape.coefficients ** 2))

        safe = np.where(angles > 0, angles, 1.0)
        d_theta = (2.0 * excess / safe)[:, None] * pose.rotations
        d_beta = 2.0 * self.shape_weight * shape.coefficients
        return value, d_theta, d_beta

    def violations(self, pose: PoseParams) -> np.ndarray:
        """Indices of joints rotated beyond their limit"""
        return np.flatnonzero(np.linalg.norm(pose.rotations, axis=1) > self.limits)


class NullPrior:
    """Prior that accepts everything"""

    def evaluate(self, pose: PoseParams, shape: ShapeParams) -> Tuple[float, np.ndarray, np.ndarray]:
        return 0.0, np.zeros_like(pose.rotations), np.zeros_like(shape.coefficients)
