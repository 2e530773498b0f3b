"""Pixel-to-surface matching in IUV space.

One k-D tree per body part over the vertices' chart coordinates. The metric is
Euclidean in (U, V) within a part and infinite across parts; ties go to the
smallest vertex index.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from app.body.model import BodyModel
from app.body.params import ModelParams, PoseParams, ShapeParams
from app.core.errors import DatasetIOError, DimensionError, FormatError, ParameterError
from app.render.camera import ImageSize, mean_camera
from app.render.iuv import IUVImage
from app.render.raster import render_params

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["pixel_x", "pixel_y", "vertex_id", "dist"]
LANDMARK_COLUMNS = ["landmark_x", "landmark_y"]
NEIGHBOURS = 8
# distances this close count as a tie, resolved to the smallest vertex id
TIE_RTOL = 1e-9
TIE_ATOL = 1e-12
# landmarks need sub-micropixel precision for exact ground-truth refits
CSV_FLOAT_FORMAT = "%.12g"


class IUVIndex:
    """Nearest-vertex search over (part, U, V)"""

    def __init__(self, vertex_part: np.ndarray, vertex_uv: np.ndarray, vertex_ids: Optional[np.ndarray] = None):
        vertex_part = np.asarray(vertex_part, dtype=np.int64)
        vertex_uv = np.asarray(vertex_uv, dtype=np.float64)
        ids = np.arange(vertex_part.shape[0]) if vertex_ids is None else np.unique(vertex_ids)
        self._trees: Dict[int, Tuple[cKDTree, np.ndarray]] = {}
        for part in np.unique(vertex_part[ids]):
            members = ids[vertex_part[ids] == part]
            self._trees[int(part)] = (cKDTree(vertex_uv[members]), members)

    @property
    def parts(self):
        return sorted(self._trees)

    @property
    def size(self) -> int:
        return sum(members.size for _, members in self._trees.values())

    def query(self, parts, uv) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest vertex id and distance per query; -1 / inf for parts with no vertices"""
        parts = np.asarray(parts, dtype=np.int64).reshape(-1)
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        if parts.shape[0] != uv.shape[0]:
            raise DimensionError(f"{parts.shape[0]} part labels for {uv.shape[0]} UV queries")
        vertex = np.full(parts.shape[0], -1, dtype=np.int64)
        distance = np.full(parts.shape[0], np.inf)
        for part, (tree, members) in self._trees.items():
            rows = np.flatnonzero(parts == part)
            if rows.size == 0:
                continue
            k = min(NEIGHBOURS, members.size)
            dist, local = tree.query(uv[rows], k=k)
            dist = dist.reshape(rows.size, k)
            local = local.reshape(rows.size, k)
            ids = members[local]
            tied = np.isclose(dist, dist[:, :1], rtol=TIE_RTOL, atol=TIE_ATOL)
            ids = np.where(tied, ids, np.iinfo(np.int64).max)
            vertex[rows] = ids.min(axis=1)
            distance[rows] = dist[:, 0]
        return vertex, distance


def build_iuv_index(model: BodyModel, vertex_ids: Optional[np.ndarray] = None) -> IUVIndex:
    return IUVIndex(model.mesh.vertex_part, model.mesh.vertex_uv, vertex_ids)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    pixels: np.ndarray       # n x 2 pixel coordinates (x, y)
    vertex_ids: np.ndarray   # n
    distances: np.ndarray    # n
    tau: float
    landmarks: Optional[np.ndarray] = None  # n x 2 ground-truth landmark positions

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "vertex_ids", np.asarray(self.vertex_ids, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=np.float64).reshape(-1))
        n = self.pixels.shape[0]
        if self.vertex_ids.shape[0] != n or self.distances.shape[0] != n:
            raise DimensionError("Correspondence columns have different lengths")
        if self.landmarks is not None:
            landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 2)
            if landmarks.shape[0] != n:
                raise DimensionError("Landmark count does not match pair count")
            object.__setattr__(self, "landmarks", landmarks)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def targets(self) -> np.ndarray:
        """Where each matched vertex should project: the landmark if known, else the pixel center"""
        return self.pixels if self.landmarks is None else self.landmarks

    @classmethod
    def empty(cls, tau: float = 0.0) -> "CorrespondenceSet":
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0), tau)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "pixel_x": self.pixels[:, 0],
            "pixel_y": self.pixels[:, 1],
            "vertex_id": self.vertex_ids,
            "dist": self.distances,
        })
        if self.landmarks is not None:
            frame["landmark_x"] = self.landmarks[:, 0]
            frame["landmark_y"] = self.landmarks[:, 1]
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, tau: float) -> "CorrespondenceSet":
        missing = [column for column in BASE_COLUMNS if column not in frame.columns]
        if missing:
            raise FormatError(f"Correspondence table is missing columns {missing}")
        landmarks = None
        if all(column in frame.columns for column in LANDMARK_COLUMNS):
            landmarks = frame[LANDMARK_COLUMNS].to_numpy(dtype=np.float64)
        return cls(frame[["pixel_x", "pixel_y"]].to_numpy(dtype=np.float64),
                   frame["vertex_id"].to_numpy(dtype=np.int64),
                   frame["dist"].to_numpy(dtype=np.float64), tau, landmarks)


def match_pixels(target: IUVImage, index: IUVIndex, tau: float, stride: int = 1) -> CorrespondenceSet:
    """Greedy 1-NN match of foreground pixels on the stride grid, keeping distances <= tau"""
    if tau < 0:
        raise ParameterError(f"Match threshold must be non-negative, got {tau}")
    if stride < 1:
        raise ParameterError(f"Stride must be at least 1, got {stride}")
    grid = np.zeros(target.part.shape, dtype=bool)
    grid[::stride, ::stride] = True
    rows, cols = np.nonzero(grid & target.foreground)
    if rows.size == 0:
        return CorrespondenceSet.empty(tau)
    parts = target.part[rows, cols]
    uv = np.column_stack([target.u[rows, cols], target.v[rows, cols]]).astype(np.float64)
    vertex, distance = index.query(parts, uv)
    keep = (vertex >= 0) & (distance <= tau)
    pixels = np.column_stack([cols + 0.5, rows + 0.5])
    return CorrespondenceSet(pixels[keep], vertex[keep], distance[keep], tau)


def anchor_landmarks(pairs: CorrespondenceSet, projected_vertices: np.ndarray) -> CorrespondenceSet:
    """Attach the exact projection of each matched vertex as its landmark"""
    projected_vertices = np.asarray(projected_vertices, dtype=np.float64)
    landmarks = projected_vertices[pairs.vertex_ids, :2] if len(pairs) else np.zeros((0, 2))
    return CorrespondenceSet(pairs.pixels, pairs.vertex_ids, pairs.distances, pairs.tau, landmarks)


def select_pairs(pairs: CorrespondenceSet, keep: np.ndarray) -> CorrespondenceSet:
    keep = np.asarray(keep, dtype=bool)
    landmarks = None if pairs.landmarks is None else pairs.landmarks[keep]
    return CorrespondenceSet(pairs.pixels[keep], pairs.vertex_ids[keep], pairs.distances[keep],
                             pairs.tau, landmarks)


def calibrate_stride(model: BodyModel, tau: float, image_size: ImageSize = (224, 224),
                     max_pairs: int = 300) -> int:
    """Smallest stride whose pair count on a rest-pose self-render stays <= max_pairs"""
    params = ModelParams(PoseParams.zeros(model.joint_count), ShapeParams.zeros(model.shape_rank),
                         mean_camera(model.mesh.vertices, image_size))
    target, _, _ = render_params(model, params, image_size)
    index = build_iuv_index(model)
    limit = max(image_size)
    for stride in range(1, limit + 1):
        count = len(match_pixels(target, index, tau, stride))
        if count <= max_pairs:
            logger.info(f"Calibrated stride {stride} for tau={tau}: {count} pairs")
            return stride
    return limit


def save_correspondences(pairs: CorrespondenceSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pairs.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write correspondence file {path}: {e}")
    return path


def load_correspondences(path: Union[str, Path], tau: float) -> CorrespondenceSet:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except OSError as e:
        raise DatasetIOError(f"Cannot read correspondence file {path}: {e}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"Malformed correspondence file {path}: {e}")
    return CorrespondenceSet.from_frame(frame, tau)
