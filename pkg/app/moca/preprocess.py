"""Target preprocessing: principal-person selection, canvas framing and occlusion."""
import logging
from typing import Sequence, Tuple

import numpy as np
from PIL import Image

from app.core.errors import DimensionError, EmptyTargetError, InputError, ParameterError
from app.render.camera import ImageSize
from app.render.iuv import IUVImage

logger = logging.getLogger(__name__)

CANVAS = 224
PERSON_HEIGHT = 165
DISTANCE_FLOOR = 1.0

Rectangle = Tuple[int, int, int, int]


def saliency_select(masks: Sequence[np.ndarray], image_size: ImageSize) -> int:
    """Index of the mask with the highest |m| / distance(mask center, image center)"""
    if len(masks) == 0:
        raise InputError("Saliency selection needs at least one mask")
    height, width = image_size
    center = np.array([width / 2.0, height / 2.0])
    scores = np.zeros(len(masks))
    for index, mask in enumerate(masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (height, width):
            raise DimensionError(f"Mask {index} is {mask.shape}, expected {(height, width)}")
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            continue
        mask_center = np.array([cols.mean() + 0.5, rows.mean() + 0.5])
        distance = max(float(np.linalg.norm(mask_center - center)), DISTANCE_FLOOR)
        scores[index] = rows.size / distance
    # np.argmax keeps the lowest index among ties
    return int(np.argmax(scores))


def _resize_nearest(values: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    height, width = size
    if values.dtype == np.uint8:
        resized = Image.fromarray(values).resize((width, height), Image.Resampling.NEAREST)
        return np.asarray(resized, dtype=np.uint8)
    resized = Image.fromarray(values.astype(np.float32)).resize((width, height), Image.Resampling.NEAREST)
    return np.asarray(resized, dtype=np.float32)


def frame_to_canvas(iuv: IUVImage, canvas: int = CANVAS, person_height: int = PERSON_HEIGHT) -> IUVImage:
    """Crop to the person, rescale to person_height with nearest sampling, center on a square canvas"""
    if canvas < 1 or person_height < 1:
        raise ParameterError(f"Canvas and person height must be positive, got {canvas}, {person_height}")
    if iuv.foreground_count == 0:
        raise EmptyTargetError("Cannot frame an IUV image without foreground")
    r0, c0, r1, c1 = iuv.bounding_box()
    scale = person_height / float(r1 - r0)
    size = (max(1, int(round((r1 - r0) * scale))), max(1, int(round((c1 - c0) * scale))))
    part = _resize_nearest(np.ascontiguousarray(iuv.part[r0:r1, c0:c1]), size)
    u = _resize_nearest(np.ascontiguousarray(iuv.u[r0:r1, c0:c1]), size)
    v = _resize_nearest(np.ascontiguousarray(iuv.v[r0:r1, c0:c1]), size)

    out_part = np.zeros((canvas, canvas), dtype=np.uint8)
    out_u = np.zeros((canvas, canvas), dtype=np.float32)
    out_v = np.zeros((canvas, canvas), dtype=np.float32)
    # Center the person; crop what does not fit
    top = (canvas - size[0]) // 2
    left = (canvas - size[1]) // 2
    src_r0, src_c0 = max(0, -top), max(0, -left)
    dst_r0, dst_c0 = max(0, top), max(0, left)
    rows = min(size[0] - src_r0, canvas - dst_r0)
    cols = min(size[1] - src_c0, canvas - dst_c0)
    for target, source in ((out_part, part), (out_u, u), (out_v, v)):
        target[dst_r0:dst_r0 + rows, dst_c0:dst_c0 + cols] = source[src_r0:src_r0 + rows, src_c0:src_c0 + cols]

    logger.debug(f"Framed {r1 - r0}x{c1 - c0} person to {size[0]}x{size[1]} on a {canvas}px canvas")
    return IUVImage(out_part, out_u, out_v)


def occlude_rectangle(iuv: IUVImage, rng: np.random.Generator, min_fraction: float = 0.05,
                      max_fraction: float = 0.25) -> Tuple[IUVImage, Rectangle]:
    """Set a random rectangle inside the person's bounding box to background"""
    if not 0 < min_fraction <= max_fraction <= 1:
        raise ParameterError(f"Occlusion fractions must satisfy 0 < min <= max <= 1, got {min_fraction}, {max_fraction}")
    if iuv.foreground_count == 0:
        return iuv, (0, 0, 0, 0)
    r0, c0, r1, c1 = iuv.bounding_box()
    box_h, box_w = r1 - r0, c1 - c0
    area = rng.uniform(min_fraction, max_fraction) * box_h * box_w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(round(np.sqrt(area * aspect)))
    w = int(round(np.sqrt(area / aspect)))
    if h > box_h:
        h, w = box_h, int(round(area / box_h))
    if w > box_w:
        h, w = int(round(area / box_w)), box_w
    h = int(np.clip(h, 1, box_h))
    w = int(np.clip(w, 1, box_w))

    top = r0 + int(rng.integers(0, box_h - h + 1))
    left = c0 + int(rng.integers(0, box_w - w + 1))
    mask = np.zeros(iuv.part.shape, dtype=bool)
    mask[top:top + h, left:left + w] = True
    return iuv.with_background(mask), (top, left, top + h, left + w)
