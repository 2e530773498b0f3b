"""DRBM body model files.

Layout, little-endian:
    b"DRBM", u32 version
    u32 part_count, u32 resolution, u32 seed, f32 shape_scale
    u32 joint_count, then per joint: u32 name length, utf-8 name,
        u32 parent (0xFFFFFFFF for the root), f32 x 3 offset
    u32 V, f32 V x 3 vertices
    u32 F, u32 F x 3 faces
    u32 V x 1 part index, f32 V x 2 chart coordinates
    u32 V, u32 J, f32 V x J skinning weights
    u32 K, f32 K x V x 3 shape basis
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from app.body.model import BodyModel
from app.body.skeleton import Joint, Skeleton, SkeletonPreset
from app.body.template import TemplateMesh
from app.core.errors import ConfigurationError, DatasetIOError, FormatError
from app.schemas.body import TemplateConfig

logger = logging.getLogger(__name__)

MAGIC = b"DRBM"
VERSION = 1
NO_PARENT = 0xFFFFFFFF


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _array(values: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(values, dtype=dtype).tobytes()


def encode_model(model: BodyModel) -> bytes:
    mesh = model.mesh
    config = model.config
    chunks = [MAGIC, _u32(VERSION), _u32(config.part_count), _u32(config.resolution),
              _u32(config.seed), struct.pack("<f", config.shape_scale)]

    chunks.append(_u32(model.joint_count))
    for joint in model.skeleton.joints:
        name = joint.name.encode("utf-8")
        chunks += [_u32(len(name)), name, _u32(NO_PARENT if joint.parent is None else joint.parent),
                   _array(joint.offset, "<f4")]

    chunks += [_u32(mesh.vertex_count), _array(mesh.vertices, "<f4")]
    chunks += [_u32(mesh.face_count), _array(mesh.faces, "<u4")]
    chunks += [_array(mesh.vertex_part, "<u4"), _array(mesh.vertex_uv, "<f4")]
    chunks += [_u32(mesh.vertex_count), _u32(model.joint_count), _array(mesh.skinning_weights, "<f4")]
    chunks += [_u32(model.shape_rank), _array(mesh.shape_basis, "<f4")]
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.cursor = 0

    def take(self, size: int) -> bytes:
        if self.cursor + size > len(self.data):
            raise FormatError(f"Truncated model file at byte {self.cursor}, wanted {size} more")
        chunk = self.data[self.cursor:self.cursor + size]
        self.cursor += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype=dtype).reshape(shape)


def decode_model(data: bytes) -> BodyModel:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("Not a DRBM body model file (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"Unsupported DRBM version {version}")
    part_count, resolution, seed = reader.u32(), reader.u32(), reader.u32()
    shape_scale = reader.f32()

    joint_count = reader.u32()
    joints = []
    for _ in range(joint_count):
        name = reader.take(reader.u32()).decode("utf-8")
        parent = reader.u32()
        offset = reader.array("<f4", (3,)).astype(np.float64)
        joints.append(Joint(name, None if parent == NO_PARENT else parent,
                            tuple(float(x) for x in offset)))
    try:
        skeleton = Skeleton(tuple(joints))
    except ConfigurationError as e:
        raise FormatError(f"Invalid skeleton in model file: {e.message}")

    V = reader.u32()
    vertices = reader.array("<f4", (V, 3)).astype(np.float64)
    F = reader.u32()
    faces = reader.array("<u4", (F, 3)).astype(np.int64)
    vertex_part = reader.array("<u4", (V,)).astype(np.int64)
    vertex_uv = reader.array("<f4", (V, 2)).astype(np.float64)
    weight_rows, weight_cols = reader.u32(), reader.u32()
    if (weight_rows, weight_cols) != (V, joint_count):
        raise FormatError(f"Skinning weights are {weight_rows} x {weight_cols}, expected {V} x {joint_count}")
    weights = reader.array("<f4", (V, joint_count)).astype(np.float64)
    rank = reader.u32()
    basis = reader.array("<f4", (rank, V, 3)).astype(np.float64)
    if reader.cursor != len(data):
        raise FormatError(f"{len(data) - reader.cursor} trailing bytes after model data")

    preset = SkeletonPreset.BODY if joint_count == 24 else SkeletonPreset.FULL
    try:
        config = TemplateConfig(part_count=part_count, resolution=resolution, skeleton=preset,
                                shape_rank=max(rank, 1), shape_scale=shape_scale, seed=seed)
    except ValueError as e:
        raise FormatError(f"Invalid template settings in model file: {e}")
    mesh = TemplateMesh(vertices=vertices, faces=faces, vertex_part=vertex_part, vertex_uv=vertex_uv,
                        skinning_weights=weights, shape_basis=basis, part_count=part_count)
    problems = mesh.invariant_violations(joint_count)
    if problems:
        raise FormatError(f"Model file violates mesh invariants: {'; '.join(problems)}")
    return BodyModel(skeleton=skeleton, mesh=mesh, config=config)


def save_model(model: BodyModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_model(model))
    except OSError as e:
        raise DatasetIOError(f"Cannot write model file {path}: {e}")
    logger.info(f"Saved body model to {path}")
    return path


def load_model(path: Union[str, Path]) -> BodyModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"Cannot read model file {path}: {e}")
    return decode_model(data)
