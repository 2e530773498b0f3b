"""Loss terms with analytic gradients w.r.t. (theta, beta, alpha).

total = w_rpj L_rpj + w_msk L_msk + w_adv L_adv + w_rec L_rec + w_rgr L_rgr,
each term switched on only when its supervision is available.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.body.model import BodyModel, PosedBody
from app.body.params import CameraParams, ModelParams
from app.body.rotations import rodrigues, rodrigues_jacobian
from app.core.errors import ConfigurationError, DimensionError, NumericError
from app.fitting.correspondence import CorrespondenceSet
from app.fitting.priors import PlausibilityPrior
from app.render.camera import project, project_backward
from app.render.iuv import IUVImage
from app.render.soft_masks import SoftMasks
from app.schemas.fitting import LossReport, LossWeights, SupervisionFlags

logger = logging.getLogger(__name__)

# soft mass, in pixels, at which a part missing from the target costs one half
ABSENT_PART_MASS = 1.0
VISIBLE_PART_MASS = 0.5


@dataclass(frozen=True, eq=False)
class GradientVector:
    d_theta: np.ndarray
    d_beta: np.ndarray
    d_alpha: np.ndarray

    @classmethod
    def zeros(cls, joint_count: int, rank: int) -> "GradientVector":
        return cls(np.zeros((joint_count, 3)), np.zeros(rank), np.zeros(3))

    @classmethod
    def like(cls, model: BodyModel) -> "GradientVector":
        return cls.zeros(model.joint_count, model.shape_rank)

    def __add__(self, other: "GradientVector") -> "GradientVector":
        if self.d_theta.shape != other.d_theta.shape or self.d_beta.shape != other.d_beta.shape:
            raise DimensionError("Cannot add gradients of different parameter shapes")
        return GradientVector(self.d_theta + other.d_theta, self.d_beta + other.d_beta,
                              self.d_alpha + other.d_alpha)

    def scaled(self, factor: float) -> "GradientVector":
        return GradientVector(factor * self.d_theta, factor * self.d_beta, factor * self.d_alpha)

    def divided_by(self, other: "GradientVector") -> "GradientVector":
        """Elementwise quotient, used to precondition with per-parameter scales"""
        if self.d_theta.shape != other.d_theta.shape or self.d_beta.shape != other.d_beta.shape:
            raise DimensionError("Cannot divide gradients of different parameter shapes")
        return GradientVector(self.d_theta / other.d_theta, self.d_beta / other.d_beta,
                              self.d_alpha / other.d_alpha)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_theta.reshape(-1), self.d_beta, self.d_alpha])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def _through_body(body: PosedBody, camera: CameraParams, grad_pixels: Optional[np.ndarray] = None,
                  grad_vertices: Optional[np.ndarray] = None,
                  grad_joints: Optional[np.ndarray] = None) -> GradientVector:
    """Chain gradients on projected vertices (and/or 3D vertices, joints) to the parameters"""
    vertices = body.posed_vertices
    grad_v = np.zeros_like(vertices) if grad_vertices is None else np.array(grad_vertices, dtype=np.float64)
    d_alpha = np.zeros(3)
    if grad_pixels is not None:
        grad_points, d_alpha = project_backward(grad_pixels, vertices, camera)
        grad_v += grad_points
    d_theta, d_beta = body.backward(grad_v, grad_joints)
    return GradientVector(d_theta, d_beta, d_alpha)


def landmark_reprojection_loss(pairs: CorrespondenceSet, body: PosedBody, camera: CameraParams,
                               normalize: bool = False) -> Tuple[float, GradientVector]:
    """Sum of L1 distances between matched landmarks and the projections of their vertices"""
    model = body.model
    if len(pairs) == 0:
        return 0.0, GradientVector.like(model)
    if pairs.vertex_ids.max() >= model.vertex_count or pairs.vertex_ids.min() < 0:
        raise DimensionError("Correspondence refers to a vertex outside the mesh")

    ids = pairs.vertex_ids
    projected = project(body.posed_vertices[ids], camera)
    residual = projected - pairs.targets
    value = float(np.abs(residual).sum())
    g = np.sign(residual)
    if normalize:
        value /= len(pairs)
        g = g / len(pairs)

    grad_pixels = np.zeros((model.vertex_count, 2))
    np.add.at(grad_pixels, ids, g)
    return value, _through_body(body, camera, grad_pixels=grad_pixels)


def part_mask_loss(target: IUVImage, soft: SoftMasks, body: Optional[PosedBody] = None,
                   camera: Optional[CameraParams] = None,
                   normalize: bool = False) -> Tuple[float, GradientVector, int, np.ndarray]:
    """Sum over parts of 1 - soft IoU; also returns the visible part count and dL/dmasks.

    A part missing from the target costs M / (M + ABSENT_PART_MASS) for a
    rendered soft mass M, which is 0 for an empty mask and tends to 1 as the
    mask grows, so the loss stays continuous in the masks. With `normalize`
    the sum is divided by the part count.
    """
    P = soft.part_count
    if target.part.shape != soft.masks.shape[1:]:
        raise DimensionError(f"Target {target.part.shape} and masks {soft.masks.shape[1:]} differ in size")
    if target.part.size and int(target.part.max()) > P:
        raise ConfigurationError(f"Target uses part {int(target.part.max())} but the model has {P} parts")

    value = 0.0
    visible = 0
    grad_masks = np.zeros_like(soft.masks)
    for k in range(1, P + 1):
        t = (target.part == k).astype(np.float64)
        m = soft.masks[k - 1]
        if not t.any():
            mass = float(m.sum())
            if mass >= VISIBLE_PART_MASS:
                visible += 1
            value += mass / (mass + ABSENT_PART_MASS)
            grad_masks[k - 1] = ABSENT_PART_MASS / (mass + ABSENT_PART_MASS) ** 2
            continue
        visible += 1
        intersection = float(np.sum(t * m))
        union = float(np.sum(t + (1.0 - t) * m))
        value += 1.0 - intersection / union
        grad_masks[k - 1] = -t / union + (1.0 - t) * intersection / union ** 2

    if normalize and P:
        value /= P
        grad_masks /= P
    if body is None:
        return value, None, visible, grad_masks
    grad_screen = soft.backward(grad_masks)
    return value, _through_body(body, camera, grad_pixels=grad_screen[:, :2]), visible, grad_masks


def plausibility_prior(prior: PlausibilityPrior, params: ModelParams) -> Tuple[float, GradientVector]:
    value, d_theta, d_beta = prior.evaluate(params.pose, params.shape)
    return float(value), GradientVector(np.asarray(d_theta, dtype=np.float64),
                                        np.asarray(d_beta, dtype=np.float64), np.zeros(3))


def reconstruction_loss(gt_joints, pred_joints) -> Tuple[float, np.ndarray]:
    """Sum of per-joint Euclidean distances; gradient is w.r.t. the predicted joints"""
    gt_joints = np.asarray(gt_joints, dtype=np.float64)
    pred_joints = np.asarray(pred_joints, dtype=np.float64)
    if gt_joints.shape != pred_joints.shape or gt_joints.ndim != 2 or gt_joints.shape[1] != 3:
        raise DimensionError(f"Joint sets differ: {gt_joints.shape} vs {pred_joints.shape}")
    diff = pred_joints - gt_joints
    norms = np.linalg.norm(diff, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where((norms > 0)[:, None], diff / safe[:, None], 0.0)
    return float(norms.sum()), grad


def reconstruction_term(gt_joints, body: PosedBody, camera: CameraParams) -> Tuple[float, GradientVector]:
    """Reconstruction loss on the LSP joints of a posed body"""
    skeleton = body.model.skeleton
    value, grad_lsp = reconstruction_loss(gt_joints, body.lsp14)
    grad_joints = np.zeros((skeleton.joint_count, 3))
    np.add.at(grad_joints, skeleton.lsp14_indices(), grad_lsp)
    return value, _through_body(body, camera, grad_joints=grad_joints)


def parameter_residual(estimate: ModelParams, truth: ModelParams, include_camera: bool = True) -> np.ndarray:
    """Concatenated residual of rotation-matrix entries, beta and optionally alpha"""
    if (estimate.pose.rotations.shape != truth.pose.rotations.shape
            or estimate.shape.coefficients.shape != truth.shape.coefficients.shape):
        raise DimensionError("Estimated and ground-truth parameters differ in shape")
    parts = [
        (rodrigues(estimate.pose.rotations) - rodrigues(truth.pose.rotations)).reshape(-1),
        estimate.shape.coefficients - truth.shape.coefficients,
    ]
    if include_camera:
        parts.append(estimate.camera.as_array() - truth.camera.as_array())
    return np.concatenate(parts)


def regression_loss(estimate: ModelParams, truth: ModelParams,
                    include_camera: bool = True) -> Tuple[float, GradientVector]:
    """Squared norm of the parameter residual, pose compared as rotation matrices"""
    residual = parameter_residual(estimate, truth, include_camera)
    J = estimate.pose.joint_count
    K = estimate.shape.rank
    rot_residual = residual[:9 * J].reshape(J, 3, 3)
    d_theta = np.einsum("jab,jabk->jk", 2.0 * rot_residual, rodrigues_jacobian(estimate.pose.rotations))
    d_beta = 2.0 * residual[9 * J:9 * J + K]
    d_alpha = 2.0 * residual[9 * J + K:] if include_camera else np.zeros(3)
    return float(np.dot(residual, residual)), GradientVector(d_theta, d_beta, d_alpha)


@dataclass(frozen=True, eq=False)
class LossInputs:
    """Everything one evaluation of the total loss can draw on"""
    params: ModelParams
    body: PosedBody
    pairs: Optional[CorrespondenceSet] = None
    target: Optional[IUVImage] = None
    soft: Optional[SoftMasks] = None
    prior: Optional[PlausibilityPrior] = None
    gt_joints: Optional[np.ndarray] = None
    gt_params: Optional[ModelParams] = None
    normalize_rpj: bool = False
    normalize_msk: bool = False


def total_loss(flags: SupervisionFlags, weights: LossWeights,
               inputs: LossInputs) -> Tuple[LossReport, GradientVector]:
    model = inputs.body.model
    camera = inputs.params.camera
    grad = GradientVector.like(model)
    terms = {}
    matched = 0
    visible = 0

    if flags.rpj and inputs.pairs is not None:
        value, g = landmark_reprojection_loss(inputs.pairs, inputs.body, camera, inputs.normalize_rpj)
        terms["rpj"] = value
        grad = grad + g.scaled(weights.rpj)
        matched = len(inputs.pairs)
    if flags.msk and inputs.target is not None and inputs.soft is not None:
        value, g, visible, _ = part_mask_loss(inputs.target, inputs.soft, inputs.body, camera,
                                                 inputs.normalize_msk)
        terms["msk"] = value
        grad = grad + g.scaled(weights.msk)
    if flags.adv and inputs.prior is not None:
        value, g = plausibility_prior(inputs.prior, inputs.params)
        terms["adv"] = value
        grad = grad + g.scaled(weights.adv)
    if flags.rec and inputs.gt_joints is not None:
        value, g = reconstruction_term(inputs.gt_joints, inputs.body, camera)
        terms["rec"] = value
        grad = grad + g.scaled(weights.rec)
    if flags.rgr and inputs.gt_params is not None:
        value, g = regression_loss(inputs.params, inputs.gt_params)
        terms["rgr"] = value
        grad = grad + g.scaled(weights.rgr)

    total = sum(getattr(weights, name) * value for name, value in terms.items())
    if not np.isfinite(total) or not grad.is_finite():
        raise NumericError(f"Non-finite loss or gradient (total={total})")
    report = LossReport(
        l_rpj=terms.get("rpj", 0.0),
        l_msk=terms.get("msk", 0.0),
        l_adv=terms.get("adv", 0.0),
        l_rec=terms.get("rec", 0.0),
        l_rgr=terms.get("rgr", 0.0),
        total=float(total),
        weights=weights,
        matched_pairs=matched,
        visible_parts=visible,
    )
    return report, grad
