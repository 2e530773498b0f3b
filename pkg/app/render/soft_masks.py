"""Soft per-part coverage masks.

m_k(p) = 1 - prod_f (1 - sigmoid(-d(p, f) / sigma)) over the front-facing faces
of part k, with d the signed 2D distance to the projected triangle (negative
inside). The product is accumulated in log space as -sum softplus(-d / sigma).
A face only touches pixels within CUTOFF * sigma of it.
"""
from dataclasses import dataclass, field

import numpy as np

from app.body.model import PosedBody
from app.body.params import CameraParams
from app.core.errors import DimensionError, ParameterError
from app.render.camera import ImageSize
from app.render.raster import check_image_size, cross2, front_facing, pixel_candidates, screen_vertices

CUTOFF = 8.0


def _signed_distance(p: np.ndarray, tri: np.ndarray):
    """Signed distance of points to triangles plus the nearest edge and its parameter"""
    starts = tri
    ends = np.roll(tri, -1, axis=1)                        # edges ab, bc, ca
    edge = ends - starts                                   # n x 3 x 2
    rel = p[:, None, :] - starts
    length2 = np.maximum(np.einsum("nec,nec->ne", edge, edge), 1e-300)
    t = np.clip(np.einsum("nec,nec->ne", rel, edge) / length2, 0.0, 1.0)
    closest = starts + t[..., None] * edge
    offset = p[:, None, :] - closest
    dist = np.linalg.norm(offset, axis=-1)
    nearest = np.argmin(dist, axis=1)
    rows = np.arange(p.shape[0])

    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = cross2(b - a, c - a)
    inside = ((cross2(b - p, c - p) / area >= 0) & (cross2(c - p, a - p) / area >= 0)
              & (cross2(a - p, b - p) / area >= 0))
    unsigned = dist[rows, nearest]
    signed = np.where(inside, -unsigned, unsigned)
    return signed, inside, nearest, t[rows, nearest], offset[rows, nearest], unsigned


@dataclass(frozen=True, eq=False)
class SoftMasks:
    masks: np.ndarray   # P x H x W, part k at index k - 1
    sigma: float
    _pixel: np.ndarray = field(repr=False)      # flattened (part, row, col) index per contribution
    _corners: np.ndarray = field(repr=False)    # n x 2 vertex ids of the nearest edge
    _weights: np.ndarray = field(repr=False)    # n x 2 x 2 d(signed distance)/d(edge endpoints)
    _sigmoid: np.ndarray = field(repr=False)
    vertex_count: int = 0

    @property
    def part_count(self) -> int:
        return self.masks.shape[0]

    def backward(self, grad_masks) -> np.ndarray:
        """Pull P x H x W gradients on the masks back to screen-space vertex gradients (N x 3)"""
        grad_masks = np.asarray(grad_masks, dtype=np.float64)
        if grad_masks.shape != self.masks.shape:
            raise DimensionError(f"Mask gradient {grad_masks.shape} does not match masks {self.masks.shape}")
        grad = np.zeros((self.vertex_count, 3))
        if self._pixel.size == 0:
            return grad
        flat_grad = grad_masks.reshape(-1)[self._pixel]
        flat_mask = self.masks.reshape(-1)[self._pixel]
        # dm/dd = -(1 - m) * sigmoid(-d / sigma) / sigma
        g_dist = flat_grad * (-(1.0 - flat_mask) * self._sigmoid / self.sigma)
        contribution = g_dist[:, None, None] * self._weights
        for k in range(2):
            np.add.at(grad[:, 0], self._corners[:, k], contribution[:, k, 0])
            np.add.at(grad[:, 1], self._corners[:, k], contribution[:, k, 1])
        return grad


def soft_part_masks_mesh(screen, faces, face_part, part_count: int, image_size: ImageSize,
                         sigma: float) -> SoftMasks:
    if not sigma > 0:
        raise ParameterError(f"Mask sharpness sigma must be positive, got {sigma}")
    height, width = check_image_size(image_size)
    screen = np.asarray(screen, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    face_part = np.asarray(face_part, dtype=np.int64).reshape(-1)

    log_keep = np.zeros(part_count * height * width)
    pixels, corners, weights, sigmoids = [], [], [], []
    selected = np.flatnonzero(front_facing(screen, faces) & (face_part >= 1) & (face_part <= part_count))
    if selected.size:
        tri = screen[faces[selected], :2]
        reach = CUTOFF * sigma
        for item, rows, cols in pixel_candidates(tri.min(axis=1) - reach, tri.max(axis=1) + reach,
                                                 height, width):
            p = np.stack([cols + 0.5, rows + 0.5], axis=-1)
            signed, inside, edge, t, offset, unsigned = _signed_distance(p, tri[item])
            near = signed <= reach
            if not np.any(near):
                continue
            item, rows, cols = item[near], rows[near], cols[near]
            signed, inside, edge, t = signed[near], inside[near], edge[near], t[near]
            offset, unsigned = offset[near], unsigned[near]

            scaled = -signed / sigma
            pixel = (face_part[selected[item]] - 1) * height * width + rows * width + cols
            np.add.at(log_keep, pixel, -np.logaddexp(0.0, scaled))

            # d|p - q| / d(start, end) = -(1 - t) n, -t n with n the unit offset from q to p
            normal = np.where(unsigned[:, None] > 0, offset / np.maximum(unsigned, 1e-300)[:, None], 0.0)
            sign = np.where(inside, -1.0, 1.0)[:, None]
            w = np.stack([-(1.0 - t)[:, None] * normal, -t[:, None] * normal], axis=1) * sign[:, None]
            face_ids = faces[selected[item]]
            pair = np.stack([face_ids[np.arange(item.size), edge],
                             face_ids[np.arange(item.size), (edge + 1) % 3]], axis=1)

            pixels.append(pixel)
            corners.append(pair)
            weights.append(w)
            sigmoids.append(np.exp(-np.logaddexp(0.0, -scaled)))

    masks = (1.0 - np.exp(log_keep)).reshape(part_count, height, width)
    return SoftMasks(
        masks=masks,
        sigma=float(sigma),
        _pixel=np.concatenate(pixels) if pixels else np.zeros(0, dtype=np.int64),
        _corners=np.concatenate(corners) if corners else np.zeros((0, 2), dtype=np.int64),
        _weights=np.concatenate(weights) if weights else np.zeros((0, 2, 2)),
        _sigmoid=np.concatenate(sigmoids) if sigmoids else np.zeros(0),
        vertex_count=screen.shape[0],
    )


def soft_part_masks(body: PosedBody, camera: CameraParams, image_size: ImageSize, sigma: float) -> SoftMasks:
    mesh = body.model.mesh
    return soft_part_masks_mesh(screen_vertices(body, camera), mesh.faces, mesh.face_part,
                                mesh.part_count, image_size, sigma)
