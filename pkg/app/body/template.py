"""Procedural template mesh: one ellipsoid chart per body segment.

Each segment is an ellipsoid stretched between two joints. Its surface is a
(rows x cols) grid over (phi along the axis, psi around it), so a chart's
(U, V) = (psi, phi) normalized to [0, 1]. Pole rows collapse to a point and
only the non-degenerate triangle of each pole quad is emitted. Triangles are
wound so (b - a) x (c - a) points outward.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.body.skeleton import UNSKINNED, Skeleton
from app.core.errors import ConfigurationError
from app.schemas.body import SUPPORTED_PART_COUNTS, TemplateConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Segment:
    name: str
    start: Optional[str]
    end: Optional[str]
    radii: Tuple[float, float]  # across the body, front to back
    extend: Tuple[float, float]  # beyond start, beyond end
    kind: str = "limb"
    side: int = 0


def _sided(name: str, start: str, end: str, radii, extend) -> List[Segment]:
    return [
        Segment(f"{name}_l", f"l_{start}", f"l_{end}", radii, extend, "limb", 1),
        Segment(f"{name}_r", f"r_{start}", f"r_{end}", radii, extend, "limb", -1),
    ]


SEGMENTS: Tuple[Segment, ...] = (
    Segment("torso", "pelvis", "neck", (0.16, 0.11), (0.10, 0.02), "torso"),
    Segment("head", "neck", "head", (0.08, 0.095), (-0.04, 0.17), "head"),
    *_sided("upper_arm", "shoulder", "elbow", (0.05, 0.05), (0.03, 0.02)),
    *_sided("lower_arm", "elbow", "wrist", (0.04, 0.04), (0.02, 0.01)),
    *_sided("hand", "wrist", "hand", (0.02, 0.045), (0.01, 0.08)),
    *_sided("upper_leg", "hip", "knee", (0.075, 0.075), (0.05, 0.02)),
    *_sided("lower_leg", "knee", "ankle", (0.055, 0.055), (0.02, 0.07)),
)

BODY_CAPSULE = Segment("body", None, None, (0.20, 0.13), (0.04, 0.02), "torso")

PART_NAMES_12: Tuple[str, ...] = tuple(segment.name for segment in SEGMENTS)
PART_NAMES_24: Tuple[str, ...] = tuple(
    f"{name}_{half}" for name in PART_NAMES_12 for half in ("front", "back")
)


def part_names(part_count: int) -> Tuple[str, ...]:
    return {1: ("body",), 12: PART_NAMES_12, 24: PART_NAMES_24}[part_count]


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_part: np.ndarray
    vertex_uv: np.ndarray
    skinning_weights: np.ndarray
    shape_basis: np.ndarray
    part_count: int

    def __post_init__(self):
        for name in ("vertices", "faces", "vertex_part", "vertex_uv", "skinning_weights", "shape_basis"):
            array = np.array(getattr(self, name))
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    @property
    def vertex_iuv(self) -> np.ndarray:
        return np.column_stack([self.vertex_part.astype(np.float64), self.vertex_uv])

    @property
    def face_part(self) -> np.ndarray:
        return self.vertex_part[self.faces[:, 0]] if self.face_count else np.zeros(0, dtype=np.int64)

    def invariant_violations(self, joint_count: int) -> List[str]:
        """Human-readable list of broken mesh invariants; empty when valid"""
        problems = []
        V = self.vertex_count
        if self.vertices.shape != (V, 3):
            problems.append(f"vertices shape {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            problems.append(f"faces shape {self.faces.shape}")
        elif self.face_count and (self.faces.min() < 0 or self.faces.max() >= V):
            problems.append("face index out of range")
        if self.vertex_uv.shape != (V, 2) or self.vertex_part.shape != (V,):
            problems.append("IUV chart does not cover every vertex")
            return problems
        if V and (self.vertex_part.min() < 1 or self.vertex_part.max() > self.part_count):
            problems.append(f"part index outside 1..{self.part_count}")
        if np.any(self.vertex_uv < 0.0) or np.any(self.vertex_uv > 1.0):
            problems.append("UV outside [0, 1]")
        if V and np.unique(self.vertex_iuv, axis=0).shape[0] != V:
            problems.append("UV chart is not injective within a part")
        if self.face_count and self.faces.ndim == 2 and self.faces.shape[1] == 3:
            parts = self.vertex_part[self.faces]
            if np.any(parts != parts[:, :1]):
                problems.append("faces straddle parts")

        weights = self.skinning_weights
        if weights.shape != (V, joint_count):
            problems.append(f"skinning weights shape {weights.shape}, expected {(V, joint_count)}")
        else:
            if np.any(weights < 0):
                problems.append("negative skinning weights")
            if V and np.max(np.abs(weights.sum(axis=1) - 1.0)) > 1e-6:
                problems.append("skinning weight rows do not sum to 1")

        basis = self.shape_basis
        if basis.ndim != 3 or basis.shape[1:] != (V, 3) or basis.shape[0] < 1:
            problems.append(f"shape basis shape {basis.shape}")
        else:
            flat = basis.reshape(basis.shape[0], -1)
            gram = flat @ flat.T
            norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
            bound = 1e-6 * np.outer(norms, norms)
            off_diagonal = np.abs(gram - np.diag(np.diag(gram)))
            if np.any(off_diagonal > bound):
                problems.append("shape basis is not orthogonal")
        if not np.all(np.isfinite(self.vertices)) or not np.all(np.isfinite(basis)):
            problems.append("non-finite geometry")
        return problems


def validate_template_config(config: TemplateConfig) -> None:
    if config.part_count not in SUPPORTED_PART_COUNTS:
        raise ConfigurationError(
            f"part_count must be one of {SUPPORTED_PART_COUNTS}, got {config.part_count}"
        )
    if config.resolution < 3:
        raise ConfigurationError(f"resolution must be at least 3, got {config.resolution}")
    if config.shape_rank < 1:
        raise ConfigurationError(f"shape_rank must be at least 1, got {config.shape_rank}")
    if config.shape_scale <= 0:
        raise ConfigurationError(f"shape_scale must be positive, got {config.shape_scale}")


def _frame(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # (e1, e2, axis) is right-handed; e2 leans towards depth
    reference = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = reference - reference.dot(axis) * axis
    e2 /= np.linalg.norm(e2)
    e1 = np.cross(e2, axis)
    return e1, e2


@dataclass
class _Chart:
    segment: Segment
    part: int
    vertices: np.ndarray
    uv: np.ndarray
    faces: np.ndarray
    start: np.ndarray
    axis: np.ndarray


def _segment_endpoints(segment: Segment, skeleton: Skeleton, rest: np.ndarray):
    if segment.start is None:
        top = np.array([0.0, rest[:, 1].min(), 0.0])
        bottom = np.array([0.0, rest[:, 1].max(), 0.0])
        start, end = top, bottom
    else:
        start = rest[skeleton.index(segment.start)]
        end = rest[skeleton.index(segment.end)]
    axis = end - start
    axis = axis / np.linalg.norm(axis)
    return start - segment.extend[0] * axis, end + segment.extend[1] * axis, axis


def _build_chart(segment: Segment, part: int, skeleton: Skeleton, rest: np.ndarray,
                 cols: int, rows: int, psi_start: float, psi_span: float) -> _Chart:
    start, end, axis = _segment_endpoints(segment, skeleton, rest)
    center = 0.5 * (start + end)
    half = 0.5 * np.linalg.norm(end - start)
    e1, e2 = _frame(axis)

    u = np.linspace(0.0, 1.0, cols)
    v = np.linspace(0.0, 1.0, rows)
    phi = np.pi * v
    psi = psi_start + psi_span * u
    ring = np.sin(phi)
    ring[0] = ring[-1] = 0.0
    along = -half * np.cos(phi)

    radial = (segment.radii[0] * np.cos(psi)[:, None] * e1
              + segment.radii[1] * np.sin(psi)[:, None] * e2)  # cols x 3
    positions = (center + along[:, None, None] * axis
                 + ring[:, None, None] * radial[None, :, :])  # rows x cols x 3
    U, Vv = np.meshgrid(u, v)
    uv = np.stack([U, Vv], axis=-1).reshape(-1, 2)

    index = np.arange(rows * cols).reshape(rows, cols)
    faces = []
    for r in range(rows - 1):
        for i in range(cols - 1):
            q00, q01 = index[r, i], index[r, i + 1]
            q10, q11 = index[r + 1, i], index[r + 1, i + 1]
            if r > 0:
                faces.append((q00, q01, q10))
            if r < rows - 2:
                faces.append((q01, q11, q10))
    return _Chart(segment, part, positions.reshape(-1, 3), uv,
                  np.array(faces, dtype=np.int64).reshape(-1, 3), start, axis)


def _charts(config: TemplateConfig, skeleton: Skeleton) -> List[_Chart]:
    rest = skeleton.rest_positions
    cols, rows = config.resolution, config.rows
    if config.part_count == 1:
        return [_build_chart(BODY_CAPSULE, 1, skeleton, rest, cols, rows, 0.0, 2.0 * np.pi)]
    charts = []
    for index, segment in enumerate(SEGMENTS):
        if config.part_count == 12:
            charts.append(_build_chart(segment, index + 1, skeleton, rest, cols, rows, 0.0, 2.0 * np.pi))
        else:
            # psi in [pi, 2 pi] faces the camera, [0, pi] faces away
            half_cols = cols // 2 + 1
            charts.append(_build_chart(segment, 2 * index + 1, skeleton, rest, half_cols, rows, np.pi, np.pi))
            charts.append(_build_chart(segment, 2 * index + 2, skeleton, rest, half_cols, rows, 0.0, np.pi))
    return charts


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab.dot(ab))
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _skinnable(skeleton: Skeleton) -> List[int]:
    return [i for i, joint in enumerate(skeleton.joints)
            if joint.parent is not None and joint.name not in UNSKINNED]


def _candidate_joints(segment: Segment, skeleton: Skeleton) -> List[int]:
    skinnable = _skinnable(skeleton)
    if segment.start is None:
        return skinnable
    start = skeleton.index(segment.start)
    children = skeleton.children()
    family = {start}
    stack = [start]
    while stack:
        for child in children[stack.pop()]:
            family.add(child)
            stack.append(child)
    parent = skeleton.joints[start].parent
    if parent is not None:
        family.add(parent)
    return [j for j in skinnable if j in family]


def _skinning_weights(charts: Sequence[_Chart], skeleton: Skeleton, vertex_count: int) -> np.ndarray:
    """Inverse squared distance to the two nearest bones, renormalized"""
    rest = skeleton.rest_positions
    children = skeleton.children()
    weights = np.zeros((vertex_count, skeleton.joint_count))
    offset = 0
    for chart in charts:
        points = chart.vertices
        candidates = _candidate_joints(chart.segment, skeleton)
        distances = np.empty((points.shape[0], len(candidates)))
        for column, joint in enumerate(candidates):
            ends = [rest[c] for c in children[joint]] or [rest[joint]]
            distances[:, column] = np.min(
                [_point_segment_distance(points, rest[joint], end) for end in ends], axis=0
            )
        nearest = np.argsort(distances, axis=1, kind="stable")[:, :2]
        chosen = np.take_along_axis(distances, nearest, axis=1)
        inverse = 1.0 / (chosen ** 2 + 1e-8)
        inverse /= inverse.sum(axis=1, keepdims=True)
        rows = np.arange(points.shape[0]) + offset
        joint_ids = np.asarray(candidates)[nearest]
        for k in range(nearest.shape[1]):
            weights[rows, joint_ids[:, k]] += inverse[:, k]
        offset += points.shape[0]
    return weights


def _shape_basis(charts: Sequence[_Chart], vertices: np.ndarray, config: TemplateConfig) -> np.ndarray:
    V = vertices.shape[0]
    rng = np.random.default_rng(config.seed)

    kind = np.concatenate([[c.segment.kind] * c.vertices.shape[0] for c in charts])
    side = np.concatenate([[c.segment.side] * c.vertices.shape[0] for c in charts]).astype(np.float64)
    start = np.concatenate([np.repeat(c.start[None], c.vertices.shape[0], axis=0) for c in charts])
    axis = np.concatenate([np.repeat(c.axis[None], c.vertices.shape[0], axis=0) for c in charts])
    along = np.einsum("va,va->v", vertices - start, axis)
    radial = vertices - start - along[:, None] * axis
    limb = (kind == "limb")[:, None]
    torso = (kind == "torso")[:, None]
    arm = np.array([c.segment.name.startswith(("upper_arm", "lower_arm", "hand"))
                    for c in charts for _ in range(c.vertices.shape[0])])[:, None]

    height = np.zeros_like(vertices)
    height[:, 1] = vertices[:, 1]
    shoulder = np.zeros_like(vertices)
    shoulder[:, 0] = side
    semantic = [
        height,                                   # global height
        limb * along[:, None] * axis,             # limb length
        limb * radial,                            # limb girth
        torso * radial,                           # torso girth
        arm * shoulder,                           # shoulder width
    ]
    columns = [field.reshape(-1) for field in semantic[:config.shape_rank]]
    width = 0.15
    while len(columns) < config.shape_rank:
        centers = vertices[rng.integers(0, V, size=4)]
        directions = rng.normal(size=(4, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        falloff = np.exp(-np.sum((vertices[:, None, :] - centers[None]) ** 2, axis=-1) / (2 * width ** 2))
        columns.append((falloff @ directions).reshape(-1))

    matrix = np.stack(columns, axis=1)
    q, r = np.linalg.qr(matrix)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    scales = config.shape_scale * np.sqrt(V) / np.sqrt(1.0 + np.arange(config.shape_rank) / 2.0)
    return (q * scales).T.reshape(config.shape_rank, V, 3)


def build_template_mesh(config: TemplateConfig, skeleton: Skeleton) -> TemplateMesh:
    validate_template_config(config)
    charts = _charts(config, skeleton)

    vertices, faces, parts, uvs = [], [], [], []
    offset = 0
    for chart in charts:
        vertices.append(chart.vertices)
        faces.append(chart.faces + offset)
        parts.append(np.full(chart.vertices.shape[0], chart.part, dtype=np.int64))
        uvs.append(chart.uv)
        offset += chart.vertices.shape[0]
    vertices = np.concatenate(vertices)
    if config.shape_rank > 3 * vertices.shape[0]:
        raise ConfigurationError(
            f"shape_rank {config.shape_rank} exceeds 3 x {vertices.shape[0]} vertex coordinates"
        )

    mesh = TemplateMesh(
        vertices=vertices,
        faces=np.concatenate(faces),
        vertex_part=np.concatenate(parts),
        vertex_uv=np.concatenate(uvs),
        skinning_weights=_skinning_weights(charts, skeleton, vertices.shape[0]),
        shape_basis=_shape_basis(charts, vertices, config),
        part_count=config.part_count,
    )
    logger.debug(f"Template built: {mesh.vertex_count} vertices, {mesh.face_count} faces, "
                 f"{config.part_count} parts")
    return mesh


def part_vertex_groups(mesh: TemplateMesh) -> Dict[int, np.ndarray]:
    """Ascending vertex indices per part index"""
    return {int(p): np.flatnonzero(mesh.vertex_part == p) for p in np.unique(mesh.vertex_part)}
