"""IUV images: per-pixel body part index and chart coordinates.

DRIU layout, little-endian: b"DRIU", u32 version, u32 width, u32 height,
part bytes row-major, then the u plane and the v plane as f32.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np
from PIL import Image

from app.core.errors import DatasetIOError, DimensionError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"DRIU"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class IUVImage:
    part: np.ndarray  # H x W uint8, 0 is background
    u: np.ndarray     # H x W float32
    v: np.ndarray     # H x W float32

    def __post_init__(self):
        part = np.array(self.part, dtype=np.uint8)
        u = np.array(self.u, dtype=np.float32)
        v = np.array(self.v, dtype=np.float32)
        if part.ndim != 2 or u.shape != part.shape or v.shape != part.shape:
            raise DimensionError(f"IUV planes disagree: part {part.shape}, u {u.shape}, v {v.shape}")
        for array in (part, u, v):
            array.setflags(write=False)
        object.__setattr__(self, "part", part)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def background(cls, height: int, width: int) -> "IUVImage":
        return cls(np.zeros((height, width), np.uint8), np.zeros((height, width), np.float32),
                   np.zeros((height, width), np.float32))

    @property
    def height(self) -> int:
        return self.part.shape[0]

    @property
    def width(self) -> int:
        return self.part.shape[1]

    @property
    def size(self):
        return self.part.shape

    @property
    def foreground(self) -> np.ndarray:
        return self.part > 0

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.part))

    def part_counts(self) -> Dict[int, int]:
        labels, counts = np.unique(self.part[self.part > 0], return_counts=True)
        return {int(label): int(count) for label, count in zip(labels, counts)}

    def bounding_box(self):
        """(row0, col0, row1, col1) inclusive-exclusive box of the foreground, or None"""
        rows = np.flatnonzero(self.foreground.any(axis=1))
        cols = np.flatnonzero(self.foreground.any(axis=0))
        if rows.size == 0:
            return None
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    def invariant_violations(self):
        problems = []
        background = self.part == 0
        if np.any(self.u[background] != 0) or np.any(self.v[background] != 0):
            problems.append("background pixels carry nonzero UV")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            problems.append("non-finite UV")
        elif np.any(self.u < 0) or np.any(self.u > 1) or np.any(self.v < 0) or np.any(self.v > 1):
            problems.append("UV outside [0, 1]")
        return problems

    def with_background(self, mask: np.ndarray) -> "IUVImage":
        """Copy with the masked pixels set to background"""
        mask = np.asarray(mask, dtype=bool)
        return IUVImage(np.where(mask, 0, self.part), np.where(mask, 0.0, self.u),
                        np.where(mask, 0.0, self.v))

    def identical_to(self, other: "IUVImage") -> bool:
        return (np.array_equal(self.part, other.part) and np.array_equal(self.u, other.u)
                and np.array_equal(self.v, other.v))


def encode_iuv(image: IUVImage) -> bytes:
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, image.width, image.height),
        np.ascontiguousarray(image.part, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(image.u, dtype="<f4").tobytes(),
        np.ascontiguousarray(image.v, dtype="<f4").tobytes(),
    ])


def decode_iuv(data: bytes) -> IUVImage:
    if len(data) < _HEADER.size:
        raise FormatError("Truncated IUV file header")
    magic, version, width, height = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("Not a DRIU image (bad magic)")
    if version != VERSION:
        raise FormatError(f"Unsupported DRIU version {version}")
    pixels = width * height
    expected = _HEADER.size + pixels * 9
    if len(data) != expected:
        raise FormatError(f"DRIU payload is {len(data)} bytes, expected {expected} for {width}x{height}")
    offset = _HEADER.size
    part = np.frombuffer(data, dtype=np.uint8, count=pixels, offset=offset).reshape(height, width)
    offset += pixels
    u = np.frombuffer(data, dtype="<f4", count=pixels, offset=offset).reshape(height, width)
    offset += 4 * pixels
    v = np.frombuffer(data, dtype="<f4", count=pixels, offset=offset).reshape(height, width)
    image = IUVImage(part, u, v)
    problems = image.invariant_violations()
    if problems:
        raise FormatError(f"IUV image violates invariants: {'; '.join(problems)}")
    return image


def save_iuv(image: IUVImage, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_iuv(image))
    except OSError as e:
        raise DatasetIOError(f"Cannot write IUV file {path}: {e}")
    return path


def load_iuv(path: Union[str, Path]) -> IUVImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"Cannot read IUV file {path}: {e}")
    return decode_iuv(data)


def iuv_to_png(image: IUVImage, path: Union[str, Path], part_count: int = 24) -> Path:
    """Lossy preview: part index as hue, u and v as saturation and value"""
    path = Path(path)
    foreground = image.foreground
    hsv = np.zeros((image.height, image.width, 3), dtype=np.uint8)
    hue = (image.part.astype(np.int64) * 255) // max(int(part_count), int(image.part.max()), 1)
    hsv[..., 0] = np.where(foreground, hue, 0)
    hsv[..., 1] = np.where(foreground, 128 + np.round(image.u * 127), 0).astype(np.uint8)
    hsv[..., 2] = np.where(foreground, 128 + np.round(image.v * 127), 0).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.frombytes("HSV", (image.width, image.height), hsv.tobytes()).convert("RGB").save(path, format="PNG")
    except OSError as e:
        raise DatasetIOError(f"Cannot write PNG {path}: {e}")
    logger.debug(f"Wrote IUV preview {path}")
    return path
