"""Orthographic camera p = f * (X, Y) + (x, y).

Pixel coordinates have their origin at the image top-left with +Y down.
Integer pixel (i, j) has its center at (j + 0.5, i + 0.5). Image sizes are
(height, width) throughout.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.body.params import CameraParams
from app.core.errors import DimensionError, ParameterError

ImageSize = Tuple[int, int]


def _points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionError(f"Expected N x 3 points, got {points.shape}")
    return points


def _check_camera(camera: CameraParams) -> None:
    if not camera.f > 0:
        raise ParameterError(f"Camera scale must be positive, got f={camera.f}")


def project(points, camera: CameraParams) -> np.ndarray:
    """N x 3 model points to N x 2 pixel coordinates; depth is points[:, 2] unchanged"""
    points = _points(points)
    _check_camera(camera)
    return camera.f * points[:, :2] + np.array([camera.x, camera.y])


@dataclass(frozen=True, eq=False)
class ProjectionJacobian:
    points: np.ndarray  # N x 2 x 3
    camera: np.ndarray  # N x 2 x 3, columns (f, x, y)


def project_jacobian(points, camera: CameraParams) -> ProjectionJacobian:
    points = _points(points)
    _check_camera(camera)
    N = points.shape[0]
    d_points = np.zeros((N, 2, 3))
    d_points[:, 0, 0] = camera.f
    d_points[:, 1, 1] = camera.f
    d_camera = np.zeros((N, 2, 3))
    d_camera[:, :, 0] = points[:, :2]
    d_camera[:, 0, 1] = 1.0
    d_camera[:, 1, 2] = 1.0
    return ProjectionJacobian(d_points, d_camera)


def project_backward(grad_pixels, points, camera: CameraParams) -> Tuple[np.ndarray, np.ndarray]:
    """Pull N x 2 pixel gradients back to (N x 3 point gradients, (f, x, y) gradient)"""
    points = _points(points)
    grad_pixels = np.asarray(grad_pixels, dtype=np.float64)
    if grad_pixels.shape != (points.shape[0], 2):
        raise DimensionError(f"Pixel gradient {grad_pixels.shape} does not match {points.shape[0]} points")
    grad_points = np.zeros_like(points)
    grad_points[:, :2] = camera.f * grad_pixels
    grad_camera = np.array([
        float(np.sum(grad_pixels * points[:, :2])),
        float(grad_pixels[:, 0].sum()),
        float(grad_pixels[:, 1].sum()),
    ])
    return grad_points, grad_camera


def mean_camera(vertices, image_size: ImageSize, fill: float = 0.8) -> CameraParams:
    """Camera framing the vertices' bounding box at `fill` of the image height, centered"""
    vertices = _points(vertices)
    height, width = image_size
    if height <= 0 or width <= 0:
        raise ParameterError(f"Image size must be positive, got {image_size}")
    low, high = vertices[:, :2].min(axis=0), vertices[:, :2].max(axis=0)
    extent = float(high[1] - low[1])
    if extent <= 0:
        raise ParameterError("Cannot frame a body with zero height")
    f = fill * height / extent
    center = 0.5 * (low + high)
    return CameraParams(f=f, x=0.5 * width - f * center[0], y=0.5 * height - f * center[1])
