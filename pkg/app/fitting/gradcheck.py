"""Finite-difference checks for every analytic gradient in the pipeline.

`central_difference` is the single oracle used by the test suite and by the
`gradcheck` command. Each registered check draws a random configuration from
the generator it is given and returns the relative error
max|a - n| / max(max|a|, max|n|, 1e-8) between analytic and numeric values.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from app.body.model import BodyModel, build_procedural_template, lbs_jacobian, pose_body
from app.body.params import CameraParams, ModelParams, PoseParams, ShapeParams
from app.body.rotations import rodrigues, rodrigues_jacobian
from app.body.skeleton import SkeletonPreset
from app.core.errors import ConfigurationError
from app.fitting.correspondence import CorrespondenceSet
from app.fitting.losses import (
    landmark_reprojection_loss,
    part_mask_loss,
    plausibility_prior,
    reconstruction_term,
    regression_loss,
)
from app.fitting.priors import JointLimitPrior
from app.render.camera import mean_camera, project, project_jacobian
from app.render.raster import rasterize_backward, rasterize_mesh, render_params
from app.render.soft_masks import soft_part_masks, soft_part_masks_mesh
from app.schemas.body import TemplateConfig

logger = logging.getLogger(__name__)

GRADCHECK_TEMPLATE = TemplateConfig(part_count=12, resolution=6, skeleton=SkeletonPreset.BODY,
                                    shape_rank=6, shape_scale=0.02, seed=0)


def central_difference(func: Callable[[np.ndarray], np.ndarray], x, step: float = 1e-6,
                       coordinates: Optional[Iterable[int]] = None) -> np.ndarray:
    """Numeric Jacobian, shaped output.shape + x.shape (or output.shape + (len(coordinates),))"""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    indices = list(range(flat.size)) if coordinates is None else list(coordinates)
    columns = []
    for i in indices:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        high = np.asarray(func(plus.reshape(x.shape)), dtype=np.float64)
        low = np.asarray(func(minus.reshape(x.shape)), dtype=np.float64)
        columns.append((high - low) / (2.0 * step))
    stacked = np.stack(columns, axis=-1)
    if coordinates is None:
        return stacked.reshape(stacked.shape[:-1] + x.shape)
    return stacked


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


@lru_cache(maxsize=1)
def gradcheck_model() -> BodyModel:
    return build_procedural_template(GRADCHECK_TEMPLATE)


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([params.pose.rotations.reshape(-1), params.shape.coefficients,
                           params.camera.as_array()])


def unflatten_params(vector: np.ndarray, joint_count: int, rank: int) -> ModelParams:
    vector = np.asarray(vector, dtype=np.float64)
    theta = vector[:3 * joint_count].reshape(joint_count, 3)
    beta = vector[3 * joint_count:3 * joint_count + rank]
    return ModelParams(PoseParams(theta), ShapeParams(beta), CameraParams.from_array(vector[-3:]))


def random_params(model: BodyModel, rng: np.random.Generator, image_size=(16, 16),
                  pose_scale: float = 0.2, shape_scale: float = 0.5) -> ModelParams:
    theta = pose_scale * rng.normal(size=(model.joint_count, 3))
    theta[0] = 0.05 * rng.normal(size=3)
    beta = shape_scale * rng.normal(size=model.shape_rank)
    camera = mean_camera(model.mesh.vertices, image_size)
    return ModelParams(PoseParams(theta), ShapeParams(beta), camera)


def _param_coordinates(rng: np.random.Generator, model: BodyModel, count: int = 10) -> List[int]:
    size = 3 * model.joint_count + model.shape_rank + 3
    chosen = rng.choice(size - 3, size=min(count, size - 3), replace=False)
    return sorted(int(i) for i in chosen) + [size - 3, size - 2, size - 1]


def _check_params_gradient(rng, model, params, loss_of_params, analytic_flat, step=1e-6) -> float:
    coordinates = _param_coordinates(rng, model)

    def value(vector):
        return loss_of_params(unflatten_params(vector, model.joint_count, model.shape_rank))

    numeric = central_difference(value, flatten_params(params), step, coordinates)
    return relative_error(analytic_flat[coordinates], numeric)


@dataclass(frozen=True)
class GradCheck:
    name: str
    tolerance: float
    run: Callable[[np.random.Generator], float]


CHECKS: Dict[str, GradCheck] = {}


def register(name: str, tolerance: float):
    def decorator(func: Callable[[np.random.Generator], float]):
        CHECKS[name] = GradCheck(name, tolerance, func)
        return func
    return decorator


@register("rodrigues", 1e-5)
def check_rodrigues(rng: np.random.Generator) -> float:
    r = rng.normal(size=3)
    return relative_error(rodrigues_jacobian(r), central_difference(rodrigues, r, 1e-6))


@register("rodrigues_small_angle", 1e-5)
def check_rodrigues_small(rng: np.random.Generator) -> float:
    r = rng.normal(size=3)
    r *= 1e-5 / np.linalg.norm(r)
    return relative_error(rodrigues_jacobian(r), central_difference(rodrigues, r, 1e-6))


@register("lbs_jacobian", 1e-4)
def check_lbs(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    params = random_params(model, rng)
    jac = lbs_jacobian(model, params.pose, params.shape)
    errors = []
    for flat in rng.choice(3 * model.joint_count, size=6, replace=False):
        j, k = divmod(int(flat), 3)

        def posed(value, j=j, k=k):
            theta = params.pose.rotations.copy()
            theta[j, k] = value
            body = pose_body(model, PoseParams(theta), params.shape)
            return np.concatenate([body.posed_vertices.reshape(-1), body.joint_positions.reshape(-1)])

        numeric = central_difference(posed, params.pose.rotations[j, k], 1e-5)
        analytic = np.concatenate([jac.vertices_theta[:, :, j, k].reshape(-1),
                                   jac.joints_theta[:, :, j, k].reshape(-1)])
        errors.append(relative_error(analytic, numeric))
    for k in rng.choice(model.shape_rank, size=2, replace=False):
        def shaped(value, k=int(k)):
            beta = params.shape.coefficients.copy()
            beta[k] = value
            return pose_body(model, params.pose, ShapeParams(beta)).posed_vertices

        numeric = central_difference(shaped, params.shape.coefficients[k], 1e-5)
        errors.append(relative_error(jac.vertices_beta[:, :, k], numeric))
    return max(errors)


@register("lbs_backward", 1e-4)
def check_lbs_backward(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    params = random_params(model, rng)
    body = pose_body(model, params.pose, params.shape)
    jac = lbs_jacobian(model, params.pose, params.shape)
    g = rng.normal(size=(model.vertex_count, 3))
    g_joints = rng.normal(size=(model.joint_count, 3))
    d_theta, d_beta = body.backward(g, g_joints)
    expected_theta = (np.einsum("va,vajk->jk", g, jac.vertices_theta)
                      + np.einsum("ia,iajk->jk", g_joints, jac.joints_theta))
    expected_beta = np.einsum("va,vak->k", g, jac.vertices_beta)
    return max(relative_error(d_theta, expected_theta), relative_error(d_beta, expected_beta))


@register("projection", 1e-8)
def check_projection(rng: np.random.Generator) -> float:
    points = rng.normal(size=(5, 3))
    camera = CameraParams(float(rng.uniform(50, 150)), float(rng.uniform(0, 200)), float(rng.uniform(0, 200)))
    jac = project_jacobian(points, camera)
    by_points = central_difference(lambda p: project(p, camera), points, 1e-3)  # 5 x 2 x 5 x 3
    analytic_points = np.zeros_like(by_points)
    for n in range(points.shape[0]):
        analytic_points[n, :, n, :] = jac.points[n]
    by_camera = central_difference(lambda a: project(points, CameraParams.from_array(a)),
                                   camera.as_array(), 1e-3)
    return max(relative_error(analytic_points, by_points), relative_error(jac.camera, by_camera))


def random_front_triangle(rng: np.random.Generator, size: int, min_area: float = 40.0) -> np.ndarray:
    """One triangle (3 x 3 screen coordinates) with negative signed area inside a size x size image"""
    while True:
        xy = rng.uniform(1.0, size - 1.0, size=(3, 2))
        area = (xy[1, 0] - xy[0, 0]) * (xy[2, 1] - xy[0, 1]) - (xy[1, 1] - xy[0, 1]) * (xy[2, 0] - xy[0, 0])
        if abs(area) < min_area:
            continue
        if area > 0:
            xy = xy[[0, 2, 1]]
        return np.column_stack([xy, rng.uniform(1.0, 3.0, size=3)])


def interior_pixels(triangle: np.ndarray, size: int, margin: float = 1.5) -> np.ndarray:
    """(row, col) pixels whose centers lie at least `margin` pixels inside the triangle"""
    rows, cols = np.mgrid[0:size, 0:size]
    p = np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], axis=-1)
    a, b, c = triangle[0, :2], triangle[1, :2], triangle[2, :2]
    distances = []
    for start, end in ((a, b), (b, c), (c, a)):
        edge = end - start
        # triangle has negative area, so interior points lie to the right of each edge
        signed = -((edge[0] * (p[:, 1] - start[1]) - edge[1] * (p[:, 0] - start[0])) / np.linalg.norm(edge))
        distances.append(signed)
    inside = np.min(distances, axis=0) >= margin
    return np.column_stack([rows.reshape(-1)[inside], cols.reshape(-1)[inside]])


def _pixel_attributes(trace, row: int, col: int) -> np.ndarray:
    """Float64 (u, v, depth) of one covered pixel, from the trace"""
    face = trace.face[row, col]
    corners = trace.faces[face]
    bary = trace.barycentric[row, col]
    uv = bary @ trace.vertex_uv[corners]
    return np.array([uv[0], uv[1], bary @ trace.screen[corners, 2]])


@register("raster_interior", 1e-3)
def check_raster(rng: np.random.Generator) -> float:
    size = 32
    while True:
        triangle = random_front_triangle(rng, size)
        candidates = interior_pixels(triangle, size)
        if len(candidates):
            break
    row, col = candidates[rng.integers(len(candidates))]
    faces = np.array([[0, 1, 2]])
    uv = rng.uniform(0.0, 1.0, size=(3, 2))
    _, trace = rasterize_mesh(triangle, faces, [1], uv, (size, size))
    upstream = rng.normal(size=3)
    planes = [np.zeros((size, size)) for _ in range(3)]
    for plane, value in zip(planes, upstream):
        plane[row, col] = value
    analytic = rasterize_backward(trace, *planes)

    def attribute(screen):
        _, perturbed = rasterize_mesh(screen, faces, [1], uv, (size, size))
        return float(upstream @ _pixel_attributes(perturbed, row, col))

    return relative_error(analytic, central_difference(attribute, triangle, 1e-3))


@register("soft_masks", 1e-4)
def check_soft_masks(rng: np.random.Generator) -> float:
    size, sigma = 12, 3.0
    triangles = [random_front_triangle(rng, size, min_area=6.0) for _ in range(3)]
    screen = np.concatenate(triangles)
    faces = np.arange(9).reshape(3, 3)
    face_part = np.array([1, 2, 1])
    upstream = rng.normal(size=(2, size, size))
    soft = soft_part_masks_mesh(screen, faces, face_part, 2, (size, size), sigma)
    analytic = soft.backward(upstream)

    def weighted(points):
        masks = soft_part_masks_mesh(points, faces, face_part, 2, (size, size), sigma).masks
        return float(np.sum(upstream * masks))

    numeric = central_difference(weighted, screen, 1e-6)
    return relative_error(analytic[:, :2], numeric[:, :2])


@register("loss_rpj", 1e-4)
def check_rpj(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    params = random_params(model, rng)
    body = pose_body(model, params.pose, params.shape)
    ids = rng.choice(model.vertex_count, size=20, replace=False)
    offsets = rng.uniform(1.0, 3.0, size=(20, 2)) * rng.choice([-1.0, 1.0], size=(20, 2))
    targets = project(body.posed_vertices[ids], params.camera) + offsets
    pairs = CorrespondenceSet(targets, ids, np.zeros(20), 0.1)
    _, grad = landmark_reprojection_loss(pairs, body, params.camera)

    def loss(p: ModelParams) -> float:
        return landmark_reprojection_loss(pairs, pose_body(model, p.pose, p.shape), p.camera)[0]

    return _check_params_gradient(rng, model, params, loss, grad.flat())


@register("loss_msk", 1e-4)
def check_msk(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    size, sigma = (16, 16), 4.0
    params = random_params(model, rng, size, pose_scale=0.1)
    other = random_params(model, rng, size, pose_scale=0.1)
    target, _, _ = render_params(model, other, size)
    body = pose_body(model, params.pose, params.shape)
    soft = soft_part_masks(body, params.camera, size, sigma)
    _, grad, _, _ = part_mask_loss(target, soft, body, params.camera)

    def loss(p: ModelParams) -> float:
        posed = pose_body(model, p.pose, p.shape)
        return part_mask_loss(target, soft_part_masks(posed, p.camera, size, sigma))[0]

    return _check_params_gradient(rng, model, params, loss, grad.flat())


@register("loss_prior", 1e-6)
def check_prior(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    prior = JointLimitPrior(model.skeleton.angle_limits, shape_weight=0.1)
    theta = 1.5 * rng.normal(size=(model.joint_count, 3))
    params = ModelParams(PoseParams(theta), ShapeParams(rng.normal(size=model.shape_rank)),
                         CameraParams(100.0, 8.0, 8.0))
    _, grad = plausibility_prior(prior, params)

    def loss(p: ModelParams) -> float:
        return plausibility_prior(prior, p)[0]

    return _check_params_gradient(rng, model, params, loss, grad.flat())


@register("loss_rec", 1e-5)
def check_rec(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    params = random_params(model, rng)
    gt_joints = pose_body(model, params.pose, params.shape).lsp14 + 0.05 * rng.normal(size=(14, 3))
    body = pose_body(model, params.pose, params.shape)
    _, grad = reconstruction_term(gt_joints, body, params.camera)

    def loss(p: ModelParams) -> float:
        return reconstruction_term(gt_joints, pose_body(model, p.pose, p.shape), p.camera)[0]

    return _check_params_gradient(rng, model, params, loss, grad.flat())


@register("loss_rgr", 1e-4)
def check_rgr(rng: np.random.Generator) -> float:
    model = gradcheck_model()
    params = random_params(model, rng)
    truth = random_params(model, rng)
    truth = truth.copy_with(camera=CameraParams(truth.camera.f * 1.1, truth.camera.x + 1.0, truth.camera.y))
    _, grad = regression_loss(params, truth)

    def loss(p: ModelParams) -> float:
        return regression_loss(p, truth)[0]

    return _check_params_gradient(rng, model, params, loss, grad.flat())


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    tolerance: float
    max_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)


def run_gradchecks(seeds: int = 100, seed: int = 0, names: Optional[Iterable[str]] = None,
                   inject_failure: bool = False) -> List[CheckOutcome]:
    selected = list(CHECKS) if names is None else list(names)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise ConfigurationError(f"Unknown gradient check(s) {unknown}; available: {list(CHECKS)}")
    outcomes = []
    for name in selected:
        check = CHECKS[name]
        worst = 0.0
        for index in range(seeds):
            error = check.run(np.random.default_rng([seed, index]))
            worst = max(worst, error)
        logger.info(f"Gradient check {name}: max relative error {worst:.3e} over {seeds} seeds "
                    f"(tolerance {check.tolerance:.0e})")
        outcomes.append(CheckOutcome(name, check.tolerance, worst, seeds))
    if inject_failure:
        outcomes.append(CheckOutcome("injected_failure", 0.0, float("inf"), 0))
    return outcomes
