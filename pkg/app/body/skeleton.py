"""Kinematic trees for the body model.

Model space is X to the image right, Y down, Z away from the camera, in
meters. The body faces -Z, so the person's left side lies at +X. Rest offsets
describe an A-pose with the arms about 45 degrees below horizontal.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigurationError, DimensionError


class JointKind(str, Enum):
    ROOT = "root"
    LIMB = "limb"
    SPINE = "spine"
    FINGER = "finger"
    AUXILIARY = "auxiliary"


class SkeletonPreset(str, Enum):
    FULL = "full58"
    BODY = "body24"


# Joint angle limits (radians) for the plausibility prior
JOINT_LIMITS: Dict[JointKind, float] = {
    JointKind.ROOT: float("inf"),
    JointKind.LIMB: 2.6,
    JointKind.SPINE: 0.8,
    JointKind.FINGER: 0.8,
    JointKind.AUXILIARY: 0.8,
}

LSP14_NAMES: Tuple[str, ...] = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head_top",
)

# Joints that only mark landmarks; they carry no skin
UNSKINNED = frozenset({"head_top", "l_eye", "r_eye"})

_SPINE = frozenset({"pelvis", "spine1", "spine2", "spine3", "spine4", "neck", "neck_upper",
                    "head", "l_collar", "r_collar"})
_AUXILIARY = frozenset({"spine4", "neck_upper", "head_top", "l_eye", "r_eye"})
_FINGERS = ("thumb", "index", "middle", "ring", "pinky")


@dataclass(frozen=True)
class Joint:
    name: str
    parent: Optional[int]
    offset: Tuple[float, float, float]

    @property
    def kind(self) -> JointKind:
        if self.parent is None:
            return JointKind.ROOT
        base = self.name[2:] if self.name[:2] in ("l_", "r_") else self.name
        if any(base.startswith(finger) for finger in _FINGERS):
            return JointKind.FINGER
        if self.name in _AUXILIARY:
            return JointKind.AUXILIARY
        if self.name in _SPINE:
            return JointKind.SPINE
        return JointKind.LIMB


@dataclass(frozen=True)
class Skeleton:
    joints: Tuple[Joint, ...]

    def __post_init__(self):
        roots = [i for i, joint in enumerate(self.joints) if joint.parent is None]
        if len(roots) != 1:
            raise ConfigurationError(f"Skeleton needs exactly one root, found {len(roots)}")
        for index, joint in enumerate(self.joints):
            if joint.parent is not None and not 0 <= joint.parent < index:
                raise ConfigurationError(
                    f"Joint {joint.name} has parent {joint.parent}; parents must precede children"
                )
        names = [joint.name for joint in self.joints]
        if len(set(names)) != len(names):
            raise ConfigurationError("Joint names must be unique")

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> List[str]:
        return [joint.name for joint in self.joints]

    @property
    def parents(self) -> np.ndarray:
        return np.array([-1 if j.parent is None else j.parent for j in self.joints], dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([j.offset for j in self.joints], dtype=np.float64).reshape(-1, 3)

    @property
    def rest_positions(self) -> np.ndarray:
        positions = np.zeros((self.joint_count, 3))
        for index, joint in enumerate(self.joints):
            parent = np.zeros(3) if joint.parent is None else positions[joint.parent]
            positions[index] = parent + np.asarray(joint.offset)
        return positions

    @property
    def kinds(self) -> List[JointKind]:
        return [joint.kind for joint in self.joints]

    @property
    def angle_limits(self) -> np.ndarray:
        return np.array([JOINT_LIMITS[kind] for kind in self.kinds])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"Unknown joint: {name}")

    def children(self) -> List[List[int]]:
        result: List[List[int]] = [[] for _ in self.joints]
        for index, joint in enumerate(self.joints):
            if joint.parent is not None:
                result[joint.parent].append(index)
        return result

    def lsp14_indices(self) -> np.ndarray:
        names = self.names
        indices = []
        for name in LSP14_NAMES:
            if name not in names and name == "head_top":
                name = "head"
            indices.append(self.index(name))
        return np.array(indices, dtype=np.int64)

    def collapse(self, keep: Sequence[str]) -> "Skeleton":
        """Drop joints not in keep, folding their offsets into the surviving children"""
        keep_set = set(keep)
        missing = keep_set - set(self.names)
        if missing:
            raise ConfigurationError(f"Cannot keep unknown joints: {sorted(missing)}")
        new_index: Dict[int, int] = {}
        joints: List[Joint] = []
        for index, joint in enumerate(self.joints):
            if joint.name not in keep_set:
                continue
            offset = np.asarray(joint.offset, dtype=np.float64)
            parent = joint.parent
            while parent is not None and self.joints[parent].name not in keep_set:
                offset = offset + np.asarray(self.joints[parent].offset)
                parent = self.joints[parent].parent
            new_index[index] = len(joints)
            joints.append(Joint(
                name=joint.name,
                parent=None if parent is None else new_index[parent],
                offset=tuple(float(x) for x in offset),
            ))
        return Skeleton(tuple(joints))


def _mirror(offset: Tuple[float, float, float]) -> Tuple[float, float, float]:
    return (-offset[0], offset[1], offset[2])


def _finger_table(side: str) -> List[Tuple[str, str, Tuple[float, float, float]]]:
    sign = 1.0 if side == "l" else -1.0
    along = np.array([sign * 0.7071, 0.7071, 0.0])
    wrist = f"{side}_wrist"

    def at(length: float, depth: float = 0.0) -> Tuple[float, float, float]:
        offset = along * length + np.array([0.0, 0.0, depth])
        return tuple(float(round(x, 6)) for x in offset)

    rows = [
        (f"{side}_thumb1", wrist, at(0.025, -0.035)),
        (f"{side}_thumb2", f"{side}_thumb1", at(0.030, -0.010)),
    ]
    for finger, depth in (("index", -0.025), ("middle", -0.008), ("ring", 0.008), ("pinky", 0.025)):
        rows.append((f"{side}_{finger}1", wrist, at(0.085, depth)))
        rows.append((f"{side}_{finger}2", f"{side}_{finger}1", at(0.035)))
        rows.append((f"{side}_{finger}3", f"{side}_{finger}2", at(0.025)))
    return rows


def _full_table() -> List[Tuple[str, Optional[str], Tuple[float, float, float]]]:
    left = {
        "hip": (0.09, 0.07, 0.0),
        "knee": (0.02, 0.40, 0.0),
        "ankle": (0.0, 0.40, 0.02),
        "foot": (0.0, 0.06, -0.12),
        "collar": (0.06, -0.06, 0.0),
        "shoulder": (0.11, 0.02, 0.0),
        "elbow": (0.191, 0.191, 0.0),
        "wrist": (0.177, 0.177, 0.0),
        "hand": (0.057, 0.057, 0.0),
        "eye": (0.03, -0.05, -0.09),
    }
    parents = {
        "hip": "pelvis", "knee": "hip", "ankle": "knee", "foot": "ankle",
        "collar": "spine4", "shoulder": "collar", "elbow": "shoulder",
        "wrist": "elbow", "hand": "wrist", "eye": "head",
    }

    def pair(part: str):
        parent = parents[part]
        sided = parent not in ("pelvis", "spine4", "head")
        return [
            (f"l_{part}", f"l_{parent}" if sided else parent, left[part]),
            (f"r_{part}", f"r_{parent}" if sided else parent, _mirror(left[part])),
        ]

    table: List[Tuple[str, Optional[str], Tuple[float, float, float]]] = [
        ("root", None, (0.0, 0.0, 0.0)),
        ("pelvis", "root", (0.0, 0.0, 0.0)),
        *pair("hip"),
        ("spine1", "pelvis", (0.0, -0.11, 0.01)),
        *pair("knee"),
        ("spine2", "spine1", (0.0, -0.13, 0.0)),
        *pair("ankle"),
        ("spine3", "spine2", (0.0, -0.13, 0.0)),
        *pair("foot"),
        ("spine4", "spine3", (0.0, -0.06, 0.0)),
        ("neck", "spine4", (0.0, -0.10, 0.0)),
        *pair("collar"),
        ("neck_upper", "neck", (0.0, -0.05, -0.01)),
        ("head", "neck_upper", (0.0, -0.06, -0.01)),
        *pair("shoulder"),
        ("head_top", "head", (0.0, -0.16, 0.01)),
        *pair("eye"),
        *pair("elbow"),
        *pair("wrist"),
        *pair("hand"),
        *_finger_table("l"),
        *_finger_table("r"),
    ]
    return table


def build_skeleton(preset: SkeletonPreset = SkeletonPreset.FULL) -> Skeleton:
    """Build the 58-joint skeleton or its 24-joint body reduction"""
    table = _full_table()
    names = [row[0] for row in table]
    joints = tuple(
        Joint(name=name, parent=None if parent is None else names.index(parent), offset=offset)
        for name, parent, offset in table
    )
    skeleton = Skeleton(joints)
    if SkeletonPreset(preset) == SkeletonPreset.BODY:
        return skeleton.collapse(BODY24_NAMES)
    return skeleton


BODY24_NAMES: Tuple[str, ...] = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle", "r_ankle",
    "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head", "l_shoulder",
    "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)


def select_lsp14(skeleton: Skeleton, joint_positions: np.ndarray) -> np.ndarray:
    """LSP order: ankles, knees, hips, wrists, elbows, shoulders (right first), neck, head top"""
    joint_positions = np.asarray(joint_positions, dtype=np.float64)
    if joint_positions.shape[-2:] != (skeleton.joint_count, 3):
        raise DimensionError(
            f"Expected {skeleton.joint_count} x 3 joint positions, got {joint_positions.shape}"
        )
    return joint_positions[..., skeleton.lsp14_indices(), :]
