"""Hard IUV rasterizer with a depth buffer and its barycentric backward pass.

Pixels are point-sampled at their centers. A face covers a pixel when all
three barycentric weights are non-negative; among the covering faces that
face the camera, the smallest depth wins, ties going to the lower face index.
Front-facing means a negative signed area in pixel coordinates, which is the
outward normal pointing at the camera (-Z) under the Y-down image axis.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from app.body.model import BodyModel, PosedBody, pose_body
from app.body.params import CameraParams, ModelParams
from app.core.errors import DimensionError, ParameterError
from app.render.camera import ImageSize, project
from app.render.iuv import IUVImage

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-10
# Candidate (face, pixel) pairs processed per batch
CANDIDATE_BATCH = 2_000_000


def cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def perp(w: np.ndarray) -> np.ndarray:
    """d cross2(w, y) / dy is -perp(w), d cross2(x, w) / dx is perp(w)"""
    return np.stack([w[..., 1], -w[..., 0]], axis=-1)


def check_image_size(image_size: ImageSize) -> Tuple[int, int]:
    height, width = (int(x) for x in image_size)
    if height <= 0 or width <= 0:
        raise ParameterError(f"Image size must be positive, got {image_size}")
    return height, width


def front_facing(screen: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Mask of faces facing the camera with a non-degenerate projection"""
    if faces.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    a, b, c = (screen[faces[:, k], :2] for k in range(3))
    area = cross2(b - a, c - a)
    return area < -DEGENERATE_AREA


def pixel_candidates(low: np.ndarray, high: np.ndarray, height: int, width: int,
                     batch: int = CANDIDATE_BATCH) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (item, row, col) for pixel centers inside each item's [low, high] box, in batches"""
    col0 = np.clip(np.ceil(low[:, 0] - 0.5), 0, width).astype(np.int64)
    col1 = np.clip(np.floor(high[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    row0 = np.clip(np.ceil(low[:, 1] - 0.5), 0, height).astype(np.int64)
    row1 = np.clip(np.floor(high[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    ncols = np.maximum(col1 - col0 + 1, 0)
    nrows = np.maximum(row1 - row0 + 1, 0)
    counts = ncols * nrows

    cumulative = np.cumsum(counts)
    start = 0
    total = len(counts)
    while start < total:
        base = int(cumulative[start - 1]) if start else 0
        stop = max(start + 1, int(np.searchsorted(cumulative, base + batch, side="right")))
        block = slice(start, stop)
        items = np.repeat(np.arange(start, stop), counts[block])
        if items.size:
            firsts = np.repeat(np.cumsum(counts[block]) - counts[block], counts[block])
            local = np.arange(items.size) - firsts
            rows = row0[items] + local // ncols[items]
            cols = col0[items] + local % ncols[items]
            yield items, rows, cols
        start = stop


@dataclass(frozen=True, eq=False)
class RasterTrace:
    face: np.ndarray         # H x W, -1 where background
    barycentric: np.ndarray  # H x W x 3
    depth: np.ndarray        # H x W, inf where background
    screen: np.ndarray = field(repr=False)     # N x 3 (pixel x, pixel y, depth)
    faces: np.ndarray = field(repr=False)
    vertex_uv: np.ndarray = field(repr=False)

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0

    def visible_vertices(self) -> np.ndarray:
        """Sorted vertex indices of every face that won at least one pixel"""
        winners = np.unique(self.face[self.face >= 0])
        return np.unique(self.faces[winners].reshape(-1))


def rasterize_mesh(screen, faces, face_part, vertex_uv, image_size: ImageSize) -> Tuple[IUVImage, RasterTrace]:
    """Rasterize screen-space vertices (pixel x, pixel y, depth) into an IUV image"""
    height, width = check_image_size(image_size)
    screen = np.asarray(screen, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    face_part = np.asarray(face_part, dtype=np.int64).reshape(-1)
    vertex_uv = np.asarray(vertex_uv, dtype=np.float64).reshape(-1, 2)
    if face_part.shape[0] != faces.shape[0] or vertex_uv.shape[0] != screen.shape[0]:
        raise DimensionError("Face parts or vertex UVs do not match the mesh")

    pixels = height * width
    best_depth = np.full(pixels, np.inf)
    best_face = np.full(pixels, -1, dtype=np.int64)
    best_bary = np.zeros((pixels, 3))

    candidates = np.flatnonzero(front_facing(screen, faces))
    if candidates.size:
        tri = screen[faces[candidates]]  # n x 3 x 3
        xy = tri[:, :, :2]
        area = cross2(xy[:, 1] - xy[:, 0], xy[:, 2] - xy[:, 0])
        for item, rows, cols in pixel_candidates(xy.min(axis=1), xy.max(axis=1), height, width):
            p = np.stack([cols + 0.5, rows + 0.5], axis=-1)
            a, b, c = xy[item, 0], xy[item, 1], xy[item, 2]
            bary = np.stack([cross2(b - p, c - p), cross2(c - p, a - p), cross2(a - p, b - p)], axis=-1)
            bary /= area[item, None]
            inside = np.all(bary >= 0.0, axis=1)
            if not np.any(inside):
                continue
            item, bary = item[inside], bary[inside]
            pixel = rows[inside] * width + cols[inside]
            depth = np.einsum("nk,nk->n", bary, tri[item, :, 2])
            face = candidates[item]

            # merge with what earlier batches found
            known = np.unique(pixel)
            known = known[best_face[known] >= 0]
            pixel = np.concatenate([pixel, known])
            depth = np.concatenate([depth, best_depth[known]])
            face = np.concatenate([face, best_face[known]])
            bary = np.concatenate([bary, best_bary[known]])

            order = np.lexsort((face, depth, pixel))
            pixel, depth, face, bary = pixel[order], depth[order], face[order], bary[order]
            first = np.ones(pixel.size, dtype=bool)
            first[1:] = pixel[1:] != pixel[:-1]
            best_depth[pixel[first]] = depth[first]
            best_face[pixel[first]] = face[first]
            best_bary[pixel[first]] = bary[first]

    covered = best_face >= 0
    part = np.zeros(pixels, dtype=np.uint8)
    u = np.zeros(pixels, dtype=np.float32)
    v = np.zeros(pixels, dtype=np.float32)
    if np.any(covered):
        winners = best_face[covered]
        uv = np.einsum("nk,nkc->nc", best_bary[covered], vertex_uv[faces[winners]])
        uv = np.clip(uv, 0.0, 1.0)
        part[covered] = face_part[winners]
        u[covered] = uv[:, 0]
        v[covered] = uv[:, 1]

    image = IUVImage(part.reshape(height, width), u.reshape(height, width), v.reshape(height, width))
    trace = RasterTrace(
        face=best_face.reshape(height, width),
        barycentric=best_bary.reshape(height, width, 3),
        depth=best_depth.reshape(height, width),
        screen=screen,
        faces=faces,
        vertex_uv=vertex_uv,
    )
    return image, trace


def screen_vertices(body: PosedBody, camera: CameraParams) -> np.ndarray:
    return np.column_stack([project(body.posed_vertices, camera), body.posed_vertices[:, 2]])


def rasterize(body: PosedBody, camera: CameraParams, image_size: ImageSize) -> Tuple[IUVImage, RasterTrace]:
    mesh = body.model.mesh
    return rasterize_mesh(screen_vertices(body, camera), mesh.faces, mesh.face_part, mesh.vertex_uv, image_size)


def render_params(model: BodyModel, params: ModelParams, image_size: ImageSize):
    """Pose the model and rasterize it; returns (IUVImage, RasterTrace, PosedBody)"""
    body = pose_body(model, params.pose, params.shape)
    image, trace = rasterize(body, params.camera, image_size)
    return image, trace, body


def rasterize_backward(trace: RasterTrace, grad_u, grad_v, grad_depth: Optional[np.ndarray] = None) -> np.ndarray:
    """Route per-pixel gradients on (u, v, depth) to screen-space vertex gradients (N x 3)"""
    height, width = trace.face.shape
    planes = [np.asarray(grad_u, dtype=np.float64), np.asarray(grad_v, dtype=np.float64)]
    if grad_depth is not None:
        planes.append(np.asarray(grad_depth, dtype=np.float64))
    for plane in planes:
        if plane.shape != (height, width):
            raise DimensionError(f"Gradient image {plane.shape} does not match trace {(height, width)}")
    gu, gv = planes[0], planes[1]
    gd = planes[2] if grad_depth is not None else np.zeros((height, width))

    grad = np.zeros_like(trace.screen)
    rows, cols = np.nonzero(trace.covered & ((gu != 0) | (gv != 0) | (gd != 0)))
    if rows.size == 0:
        return grad

    face = trace.face[rows, cols]
    bary = trace.barycentric[rows, cols]
    corners = trace.faces[face]                # n x 3
    xy = trace.screen[corners, :2]             # n x 3 x 2
    uv = trace.vertex_uv[corners]              # n x 3 x 2
    z = trace.screen[corners, 2]               # n x 3
    g_u, g_v, g_d = gu[rows, cols], gv[rows, cols], gd[rows, cols]

    # upstream on the barycentric weights
    g_bary = g_u[:, None] * uv[:, :, 0] + g_v[:, None] * uv[:, :, 1] + g_d[:, None] * z

    p = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    a, b, c = xy[:, 0], xy[:, 1], xy[:, 2]
    area = cross2(b - a, c - a)
    zero = np.zeros_like(a)
    # d_edge[i][k]: derivative of the i-th sub-area w.r.t. corner k
    d_edge = np.stack([
        np.stack([zero, perp(c - p), -perp(b - p)], axis=1),
        np.stack([-perp(c - p), zero, perp(a - p)], axis=1),
        np.stack([perp(b - p), -perp(a - p), zero], axis=1),
    ], axis=1)                                  # n x 3 (i) x 3 (k) x 2
    d_area = np.stack([perp(b - c), perp(c - a), perp(a - b)], axis=1)  # n x 3 x 2

    weighted = np.einsum("ni,nikc->nkc", g_bary, d_edge)
    weighted -= np.einsum("ni,ni->n", g_bary, bary)[:, None, None] * d_area
    weighted /= area[:, None, None]

    np.add.at(grad[:, 0], corners.reshape(-1), weighted[:, :, 0].reshape(-1))
    np.add.at(grad[:, 1], corners.reshape(-1), weighted[:, :, 1].reshape(-1))
    np.add.at(grad[:, 2], corners.reshape(-1), (g_d[:, None] * bary).reshape(-1))
    return grad
