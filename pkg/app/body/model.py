"""Parametric body: shape blend space, forward kinematics and linear blend skinning.

Joints do not depend on shape; shape modes only displace the surface. The
backward passes here are hand-written reverse-mode sweeps over the kinematic
tree, and lbs_jacobian is the matching forward-mode sweep used by the
gradient checks.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

from app.body.params import PoseParams, ShapeParams
from app.body.rotations import rodrigues, rodrigues_jacobian
from app.body.skeleton import Skeleton, build_skeleton, select_lsp14
from app.body.template import TemplateMesh, build_template_mesh, validate_template_config
from app.core.errors import DimensionError
from app.schemas.body import TemplateConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BodyModel:
    skeleton: Skeleton
    mesh: TemplateMesh
    config: TemplateConfig
    weights: sparse.csr_matrix = field(init=False, repr=False)
    rest_joints: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mesh.skinning_weights.shape[1] != self.skeleton.joint_count:
            raise DimensionError(
                f"Skinning weights cover {self.mesh.skinning_weights.shape[1]} joints, "
                f"skeleton has {self.skeleton.joint_count}"
            )
        object.__setattr__(self, "weights", sparse.csr_matrix(self.mesh.skinning_weights))
        rest = self.skeleton.rest_positions
        rest.setflags(write=False)
        object.__setattr__(self, "rest_joints", rest)

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count

    @property
    def vertex_count(self) -> int:
        return self.mesh.vertex_count

    @property
    def shape_rank(self) -> int:
        return self.mesh.shape_basis.shape[0]

    @property
    def part_count(self) -> int:
        return self.mesh.part_count

    @property
    def body_height(self) -> float:
        vertices = self.mesh.vertices
        return float(vertices[:, 1].max() - vertices[:, 1].min()) if self.vertex_count else 0.0

    def invariant_violations(self):
        return self.mesh.invariant_violations(self.joint_count)


def build_procedural_template(config: Optional[TemplateConfig] = None) -> BodyModel:
    config = config or TemplateConfig()
    validate_template_config(config)
    skeleton = build_skeleton(config.skeleton)
    mesh = build_template_mesh(config, skeleton)
    logger.info(f"Built body model: {skeleton.joint_count} joints, {mesh.vertex_count} vertices, "
                f"{mesh.face_count} faces, {config.part_count} parts, rank {config.shape_rank}")
    return BodyModel(skeleton=skeleton, mesh=mesh, config=config)


def _check_shape(model: BodyModel, shape: ShapeParams) -> None:
    if shape.rank != model.shape_rank:
        raise DimensionError(f"Shape has {shape.rank} coefficients, basis rank is {model.shape_rank}")


def _check_pose(skeleton: Skeleton, pose: PoseParams) -> None:
    if pose.joint_count != skeleton.joint_count:
        raise DimensionError(f"Pose has {pose.joint_count} joints, skeleton has {skeleton.joint_count}")


def apply_shape(model: BodyModel, shape: ShapeParams) -> np.ndarray:
    """Template vertices plus the beta-weighted shape basis"""
    _check_shape(model, shape)
    return model.mesh.vertices + np.tensordot(shape.coefficients, model.mesh.shape_basis, axes=1)


@dataclass(frozen=True, eq=False)
class Kinematics:
    positions: np.ndarray          # J x 3
    global_rotations: np.ndarray   # J x 3 x 3
    local_rotations: np.ndarray    # J x 3 x 3
    pose: PoseParams


def forward_kinematics(skeleton: Skeleton, pose: PoseParams) -> Kinematics:
    _check_pose(skeleton, pose)
    local = rodrigues(pose.rotations)
    offsets = skeleton.offsets
    positions = np.zeros((skeleton.joint_count, 3))
    global_rotations = np.zeros_like(local)
    for j, joint in enumerate(skeleton.joints):
        if joint.parent is None:
            global_rotations[j] = local[j]
            positions[j] = offsets[j]
        else:
            parent_rotation = global_rotations[joint.parent]
            global_rotations[j] = parent_rotation @ local[j]
            positions[j] = positions[joint.parent] + parent_rotation @ offsets[j]
    return Kinematics(positions, global_rotations, local, pose)


@dataclass(frozen=True, eq=False)
class PosedBody:
    posed_vertices: np.ndarray
    joint_positions: np.ndarray
    joint_global_rotations: np.ndarray
    model: BodyModel = field(repr=False)
    shaped_vertices: np.ndarray = field(repr=False)
    kinematics: Kinematics = field(repr=False)
    blend_rotations: np.ndarray = field(repr=False)  # V x 3 x 3, sum_j w_vj R_j

    @property
    def lsp14(self) -> np.ndarray:
        return select_lsp14(self.model.skeleton, self.joint_positions)

    def backward(self, grad_vertices: Optional[np.ndarray] = None,
                 grad_joints: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Pull gradients on posed vertices / joint positions back to (d_theta, d_beta)"""
        model = self.model
        J, V = model.joint_count, model.vertex_count
        g = np.zeros((V, 3)) if grad_vertices is None else np.asarray(grad_vertices, dtype=np.float64)
        gJ_ext = np.zeros((J, 3)) if grad_joints is None else np.asarray(grad_joints, dtype=np.float64)
        if g.shape != (V, 3) or gJ_ext.shape != (J, 3):
            raise DimensionError(f"Gradient shapes {g.shape} / {gJ_ext.shape} do not match the body")

        W_t = model.weights.T.tocsr()
        outer = (g[:, :, None] * self.shaped_vertices[:, None, :]).reshape(V, 9)
        grad_global = np.asarray(W_t @ outer).reshape(J, 3, 3)
        summed = np.asarray(W_t @ g).reshape(J, 3)
        grad_global -= summed[:, :, None] * model.rest_joints[:, None, :]
        grad_positions = summed + gJ_ext

        kin = self.kinematics
        offsets = model.skeleton.offsets
        grad_local = np.zeros((J, 3, 3))
        for j in range(J - 1, -1, -1):
            parent = model.skeleton.joints[j].parent
            if parent is None:
                grad_local[j] = grad_global[j]
                continue
            parent_rotation = kin.global_rotations[parent]
            grad_local[j] = parent_rotation.T @ grad_global[j]
            grad_global[parent] += grad_global[j] @ kin.local_rotations[j].T
            grad_global[parent] += np.outer(grad_positions[j], offsets[j])
            grad_positions[parent] += grad_positions[j]

        d_theta = np.einsum("jab,jabk->jk", grad_local, rodrigues_jacobian(kin.pose.rotations))
        grad_shaped = np.einsum("vab,va->vb", self.blend_rotations, g)
        d_beta = np.tensordot(model.mesh.shape_basis, grad_shaped, axes=([1, 2], [0, 1]))
        return d_theta, d_beta


def linear_blend_skinning(model: BodyModel, shaped_vertices: np.ndarray, kinematics: Kinematics) -> PosedBody:
    shaped_vertices = np.asarray(shaped_vertices, dtype=np.float64)
    if shaped_vertices.shape != (model.vertex_count, 3):
        raise DimensionError(f"Expected {model.vertex_count} x 3 vertices, got {shaped_vertices.shape}")
    if kinematics.positions.shape != (model.joint_count, 3):
        raise DimensionError(
            f"Kinematics cover {kinematics.positions.shape[0]} joints, model has {model.joint_count}"
        )
    R = kinematics.global_rotations
    # Joint transform relative to rest: x -> R_j x + (J_j - R_j Jrest_j)
    translations = kinematics.positions - np.einsum("jab,jb->ja", R, model.rest_joints)
    blend = np.asarray(model.weights @ R.reshape(-1, 9)).reshape(-1, 3, 3)
    posed = np.einsum("vab,vb->va", blend, shaped_vertices) + np.asarray(model.weights @ translations)
    return PosedBody(
        posed_vertices=posed,
        joint_positions=kinematics.positions,
        joint_global_rotations=R,
        model=model,
        shaped_vertices=shaped_vertices,
        kinematics=kinematics,
        blend_rotations=blend,
    )


def pose_body(model: BodyModel, pose: PoseParams, shape: ShapeParams) -> PosedBody:
    """Shape, then FK, then LBS"""
    return linear_blend_skinning(model, apply_shape(model, shape), forward_kinematics(model.skeleton, pose))


@dataclass(frozen=True, eq=False)
class LBSJacobian:
    vertices_theta: np.ndarray  # V x 3 x J x 3
    vertices_beta: np.ndarray   # V x 3 x K
    joints_theta: np.ndarray    # J x 3 x J x 3
    joints_beta: np.ndarray     # J x 3 x K, zero by construction


def lbs_jacobian(model: BodyModel, pose: PoseParams, shape: ShapeParams) -> LBSJacobian:
    """Dense derivatives of posed vertices and joints w.r.t. (theta, beta)"""
    body = pose_body(model, pose, shape)
    kin = body.kinematics
    J, V, K = model.joint_count, model.vertex_count, model.shape_rank
    local_jac = rodrigues_jacobian(pose.rotations).transpose(0, 3, 1, 2)  # [j, k, a, b]
    offsets = model.skeleton.offsets

    # d_rot[j, i, k] = dR_j / d theta_ik, d_pos[j, i, k] = dJ_j / d theta_ik
    d_rot = np.zeros((J, J, 3, 3, 3))
    d_pos = np.zeros((J, J, 3, 3))
    for j, joint in enumerate(model.skeleton.joints):
        if joint.parent is None:
            d_rot[j, j] = local_jac[j]
            continue
        p = joint.parent
        d_rot[j] = d_rot[p] @ kin.local_rotations[j]
        d_rot[j, j] += kin.global_rotations[p] @ local_jac[j]
        d_pos[j] = d_pos[p] + d_rot[p] @ offsets[j]

    # translation t_j = J_j - R_j Jrest_j
    d_trans = d_pos - np.einsum("jikab,jb->jika", d_rot, model.rest_joints)
    x = body.shaped_vertices
    vertices_theta = np.zeros((V, 3, J, 3))
    for i in range(J):
        blended_rot = np.asarray(model.weights @ d_rot[:, i].reshape(J, 27)).reshape(V, 3, 3, 3)
        blended_trans = np.asarray(model.weights @ d_trans[:, i].reshape(J, 9)).reshape(V, 3, 3)
        vertices_theta[:, :, i, :] = (np.einsum("vkab,vb->vak", blended_rot, x)
                                      + blended_trans.transpose(0, 2, 1))

    return LBSJacobian(
        vertices_theta=vertices_theta,
        vertices_beta=np.einsum("vab,kvb->vak", body.blend_rotations, model.mesh.shape_basis),
        joints_theta=d_pos.transpose(0, 3, 1, 2),
        joints_beta=np.zeros((J, 3, K)),
    )
