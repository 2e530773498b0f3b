"""Analysis-by-synthesis fitting of (theta, beta, alpha) to a target IUV image.

Each iteration poses the model, renders soft part masks, evaluates the
enabled loss terms and proposes one clipped gradient step per parameter
block. Gradients are divided by the squared pixel motion of each parameter,
so a unit step moves the matched vertices by about one pixel. The best
parameters seen so far are returned.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from app.body.model import BodyModel, lbs_jacobian, pose_body
from app.body.params import CameraParams, ModelParams, PoseParams, ShapeParams
from app.body.rotations import canonicalize_axis_angle
from app.core.errors import DatasetIOError, DimensionError, DivergenceError, EmptyTargetError, NumericError
from app.fitting.correspondence import (
    CorrespondenceSet,
    build_iuv_index,
    calibrate_stride,
    match_pixels,
)
from app.fitting.losses import GradientVector, LossInputs, total_loss
from app.fitting.priors import JointLimitPrior, PlausibilityPrior
from app.render.camera import mean_camera
from app.render.iuv import IUVImage
from app.render.raster import rasterize
from app.render.soft_masks import soft_part_masks
from app.schemas.fitting import LOSS_LOG_COLUMNS, FitConfig, FitSummary, LossReport

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.9g"
# smallest per-parameter scale, as a share of the largest in its block
SCALE_FLOOR = 1e-2


@dataclass
class FitResult:
    params: ModelParams
    reports: List[LossReport] = field(default_factory=list)
    converged: bool = False
    duration: float = 0.0
    best_iteration: int = 0
    pairs: Optional[CorrespondenceSet] = None

    @property
    def iterations(self) -> int:
        return len(self.reports)

    @property
    def initial_loss(self) -> float:
        return self.reports[0].total if self.reports else 0.0

    @property
    def final_loss(self) -> float:
        return self.reports[self.best_iteration].total if self.reports else 0.0

    def best_losses(self) -> np.ndarray:
        """Running minimum of the total loss, one entry per iteration"""
        return np.minimum.accumulate([report.total for report in self.reports]) if self.reports else np.zeros(0)

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame([report.row(i) for i, report in enumerate(self.reports)], columns=LOSS_LOG_COLUMNS)

    def save_loss_log(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.loss_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        except OSError as e:
            raise DatasetIOError(f"Cannot write loss log {path}: {e}")
        return path

    def summary(self, sample_id: Optional[str] = None, error: Optional[str] = None) -> FitSummary:
        return FitSummary(
            sample_id=sample_id,
            converged=self.converged,
            iterations=self.iterations,
            initial_loss=self.initial_loss,
            final_loss=self.final_loss,
            duration_seconds=self.duration,
            theta=self.params.pose.rotations.tolist(),
            beta=self.params.shape.coefficients.tolist(),
            alpha=self.params.camera.as_array().tolist(),
            error=error,
        )


def mean_params(model: BodyModel, image_size) -> ModelParams:
    """Rest pose, zero shape and the camera framing the template"""
    return ModelParams(PoseParams.zeros(model.joint_count), ShapeParams.zeros(model.shape_rank),
                       mean_camera(model.mesh.vertices, image_size))


def step(params: ModelParams, grad: GradientVector, config: FitConfig, scale: float = 1.0,
         freeze_shape: bool = False) -> ModelParams:
    """One clipped gradient descent step with per-block step sizes"""
    if not grad.is_finite():
        raise NumericError("Gradient contains NaN or infinite values")
    norm = grad.norm()
    factor = config.clip_norm / norm if norm > config.clip_norm else 1.0

    theta = params.pose.rotations - scale * config.step_theta * factor * grad.d_theta
    beta = params.shape.coefficients
    if not freeze_shape:
        beta = beta - scale * config.step_beta * factor * grad.d_beta
    alpha = params.camera.as_array() - scale * config.step_alpha * factor * grad.d_alpha
    # keep the camera scale positive
    alpha[0] = max(alpha[0], 0.5 * params.camera.f)
    return ModelParams(PoseParams(canonicalize_axis_angle(theta)), ShapeParams(beta),
                       CameraParams.from_array(alpha))


def parameter_scales(model: BodyModel, params: ModelParams,
                     vertex_ids: Optional[np.ndarray] = None) -> GradientVector:
    """Mean absolute pixel motion of the given vertices per unit change of each parameter.

    Averages |dp/dq| (x plus y) over `vertex_ids`, or over every vertex when
    none are given. Entries under SCALE_FLOOR of their block's largest entry
    are raised to it; a block that moves nothing gets ones.
    """
    ids = np.arange(model.vertex_count) if vertex_ids is None or len(vertex_ids) == 0 else np.asarray(vertex_ids)
    jac = lbs_jacobian(model, params.pose, params.shape)
    body = pose_body(model, params.pose, params.shape)
    f = params.camera.f
    theta = f * np.abs(jac.vertices_theta[ids, :2]).sum(axis=1).mean(axis=0)
    beta = f * np.abs(jac.vertices_beta[ids, :2]).sum(axis=1).mean(axis=0)
    alpha = np.array([np.abs(body.posed_vertices[ids, :2]).sum(axis=1).mean(), 1.0, 1.0])
    return GradientVector(_floored(theta), _floored(beta), _floored(alpha))


def _floored(values: np.ndarray) -> np.ndarray:
    peak = float(values.max()) if values.size else 0.0
    if not peak > 0:
        return np.ones_like(values)
    return np.maximum(values, SCALE_FLOOR * peak)


def _metric(model: BodyModel, params: ModelParams, pairs: CorrespondenceSet) -> GradientVector:
    scales = parameter_scales(model, params, pairs.vertex_ids if len(pairs) else None)
    return GradientVector(scales.d_theta ** 2, scales.d_beta ** 2, scales.d_alpha ** 2)


def _rematch(target: IUVImage, model: BodyModel, params: ModelParams, config: FitConfig,
             stride: int) -> CorrespondenceSet:
    body = pose_body(model, params.pose, params.shape)
    _, trace = rasterize(body, params.camera, target.size)
    visible = build_iuv_index(model, trace.visible_vertices())
    return match_pixels(target, visible, config.tau, stride)


def fit(target: IUVImage, model: BodyModel, config: Optional[FitConfig] = None,
        gt_joints: Optional[np.ndarray] = None, gt_params: Optional[ModelParams] = None,
        initial: Optional[ModelParams] = None, prior: Optional[PlausibilityPrior] = None,
        pairs: Optional[CorrespondenceSet] = None) -> FitResult:
    """Fit the model to `target` from the mean (or `initial`) parameters.

    Every iteration proposes one gradient step and keeps it only when it does
    not raise the total loss under the current sigma and correspondences;
    rejected steps halve the step scale. With backoff disabled every step is
    taken.
    """
    config = config or FitConfig()
    started = time.perf_counter()
    if target.foreground_count == 0:
        raise EmptyTargetError("Target IUV image has no foreground pixels")
    size = target.size
    if config.image_size is not None and tuple(config.image_size) != tuple(size):
        raise DimensionError(f"Target is {size[0]}x{size[1]}, config expects {config.image_size}")
    if target.part.max() > model.part_count:
        raise DimensionError(f"Target uses part {int(target.part.max())}, model has {model.part_count} parts")

    flags = config.supervision
    if flags.rec and gt_joints is None:
        logger.warning("Reconstruction supervision requested without ground-truth joints; term disabled")
    if flags.rgr and gt_params is None:
        logger.warning("Regression supervision requested without ground-truth parameters; term disabled")

    # Step 1: correspondences, computed once up front
    stride = config.stride or calibrate_stride(model, config.tau, size)
    if pairs is None:
        pairs = match_pixels(target, build_iuv_index(model), config.tau, stride)
    if flags.rpj and len(pairs) < config.min_pairs:
        raise EmptyTargetError(f"Only {len(pairs)} matched pairs, at least {config.min_pairs} required")

    # Step 2: optimize from the mean (or given) parameters
    params = initial or mean_params(model, size)
    prior = prior or JointLimitPrior(model.skeleton.angle_limits, config.prior_shape_weight)
    metric = _metric(model, params, pairs) if config.jacobian_scaling else None
    result = FitResult(params=params, pairs=pairs)

    def evaluate(candidate: ModelParams, sigma: float):
        body = pose_body(model, candidate.pose, candidate.shape)
        soft = soft_part_masks(body, candidate.camera, size, sigma) if flags.msk else None
        inputs = LossInputs(params=candidate, body=body, pairs=pairs, target=target, soft=soft, prior=prior,
                            gt_joints=gt_joints, gt_params=gt_params, normalize_rpj=config.normalize_rpj,
                            normalize_msk=config.normalize_msk)
        return total_loss(flags, config.weights, inputs)

    sigma = config.sigma_at(0)
    report, grad = evaluate(params, sigma)
    best_total = np.inf
    scale = 1.0
    over_limit = 0
    rejected = 0

    for iteration in range(config.max_iterations):
        result.reports.append(report)
        logger.debug(f"Iteration {iteration}: total={report.total:.6g} sigma={sigma:.3g} step_scale={scale:.3g}")

        if report.total < best_total:
            best_total = report.total
            result.params = params
            result.best_iteration = iteration
        if report.total <= config.tolerance:
            result.converged = True
            break

        if report.total > config.divergence_factor * result.initial_loss:
            over_limit += 1
            if over_limit >= config.divergence_patience:
                result.duration = time.perf_counter() - started
                raise DivergenceError(
                    f"Loss stayed above {config.divergence_factor:g}x its initial value for "
                    f"{over_limit} iterations", partial_result=result,
                )
        else:
            over_limit = 0
        if iteration + 1 == config.max_iterations:
            break

        # Step 3: re-evaluate the current parameters when the objective changes
        changed = False
        if config.rematch_every and (iteration + 1) % config.rematch_every == 0:
            pairs = _rematch(target, model, params, config, stride)
            result.pairs = pairs
            if metric is not None:
                metric = _metric(model, params, pairs)
            changed = True
            logger.debug(f"Iteration {iteration + 1}: re-matched {len(pairs)} pairs against visible vertices")
        next_sigma = config.sigma_at(iteration + 1)
        changed = changed or (flags.msk and next_sigma != sigma)
        sigma = next_sigma
        if changed:
            report, grad = evaluate(params, sigma)

        # Step 4: propose a step and keep it unless the loss goes up
        direction = grad.divided_by(metric) if metric is not None else grad
        candidate = step(params, direction, config, scale, freeze_shape=config.shape_frozen(iteration))
        proposed, proposed_grad = evaluate(candidate, sigma)
        if not config.backoff or proposed.total <= report.total:
            params, report, grad = candidate, proposed, proposed_grad
            if config.backoff:
                scale = min(1.0, scale * config.recovery_factor)
        else:
            rejected += 1
            scale *= config.backoff_factor

    result.duration = time.perf_counter() - started
    logger.info(f"Fit finished after {result.iterations} iterations ({rejected} steps rejected): loss "
                f"{result.initial_loss:.6g} -> {result.final_loss:.6g}, converged={result.converged}, "
                f"{result.duration:.2f}s")
    return result
