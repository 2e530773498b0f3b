from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from app.body.params import CameraParams, ModelParams, PoseParams, ShapeParams
from app.core.errors import ConfigurationError
from app.schemas.body import TemplateConfig

from .common import BaseRecord

SPLITS = ("train", "test")


class PoseStyle(BaseModel):
    """Ranges of the procedural sinusoid-plus-noise pose sampler"""
    amplitude: float = Field(0.5, description="Largest per-axis swing of a joint, radians")
    min_period: float = Field(20.0, description="Shortest oscillation period, frames")
    max_period: float = Field(60.0, description="Longest oscillation period, frames")
    noise: float = Field(0.02, description="Std of the smoothed per-frame noise, radians")
    root_yaw: float = Field(0.6, description="Largest turn of the whole body about the vertical axis")
    root_tilt: float = Field(0.1, description="Largest forward/sideways lean of the whole body")
    limit_margin: float = Field(0.95, description="Share of each joint limit a sample may reach")

    @field_validator("amplitude", "noise", "root_yaw", "root_tilt")
    def validate_non_negative(cls, v, info):
        if v < 0:
            raise ConfigurationError(f"{info.field_name} must be >= 0, got {v}")
        return v

    @field_validator("max_period")
    def validate_periods(cls, v, info):
        low = info.data.get("min_period", 1.0)
        if low <= 0 or v < low:
            raise ConfigurationError(f"Pose periods must satisfy 0 < min_period <= max_period, got {low}, {v}")
        return v

    @field_validator("limit_margin")
    def validate_margin(cls, v):
        if not 0 < v < 1:
            raise ConfigurationError(f"limit_margin must lie in (0, 1), got {v}")
        return v


class GenerateConfig(BaseModel):
    """Settings of one synthetic paired dataset"""
    name: str = Field("moca-desk", description="Dataset name written to the manifest")
    sequences: int = Field(100, description="Number of animation sequences")
    frames: int = Field(50, description="Frames per sequence")
    shapes_per_sequence: int = Field(2, description="Body shapes rendered for every animation")
    shape_pool: Optional[int] = Field(None, description="Distinct shapes to draw from; default 10 per sequence slot")
    image_size: Tuple[int, int] = Field((224, 224), description="Rendered (height, width)")
    test_ratio: float = Field(0.1, description="Share of sequences and shapes held out for testing")
    seed: int = 0
    occlusion: bool = Field(False, description="Black out a random rectangle on training frames")
    occlusion_min: float = 0.05
    occlusion_max: float = 0.25
    tau: float = Field(0.05, description="IUV match distance threshold for correspondence files")
    stride: Optional[int] = Field(None, description="Pixel sampling stride; calibrated when unset")
    min_pairs: int = Field(0, description="Samples with fewer matched pairs are dropped")
    template: TemplateConfig = Field(default_factory=TemplateConfig)
    style: PoseStyle = Field(default_factory=PoseStyle)

    @field_validator("sequences")
    def validate_sequences(cls, v):
        if v < 2:
            raise ConfigurationError(f"At least 2 sequences are needed so both splits are non-empty, got {v}")
        return v

    @field_validator("frames", "shapes_per_sequence")
    def validate_positive(cls, v, info):
        if v < 1:
            raise ConfigurationError(f"{info.field_name} must be >= 1, got {v}")
        return v

    @field_validator("image_size")
    def validate_image_size(cls, v):
        if v[0] < 1 or v[1] < 1:
            raise ConfigurationError(f"Image size must be positive, got {v}")
        return v

    @field_validator("test_ratio")
    def validate_ratio(cls, v):
        if not 0 < v < 1:
            raise ConfigurationError(f"test_ratio must lie in (0, 1), got {v}")
        return v

    @field_validator("occlusion_max")
    def validate_occlusion(cls, v, info):
        low = info.data.get("occlusion_min", 0.0)
        if not 0 < low <= v <= 1:
            raise ConfigurationError(f"Occlusion fractions must satisfy 0 < min <= max <= 1, got {low}, {v}")
        return v

    @field_validator("stride")
    def validate_stride(cls, v):
        if v is not None and v < 1:
            raise ConfigurationError(f"stride must be >= 1, got {v}")
        return v

    @field_validator("tau", "min_pairs")
    def validate_non_negative(cls, v, info):
        if v < 0:
            raise ConfigurationError(f"{info.field_name} must be >= 0, got {v}")
        return v

    @property
    def pool_size(self) -> int:
        return max(self.shape_pool or 10 * self.shapes_per_sequence, 2 * self.shapes_per_sequence)

    @property
    def test_sequences(self) -> int:
        return min(self.sequences - 1, max(1, round(self.sequences * self.test_ratio)))

    @property
    def test_shapes(self) -> int:
        return min(self.pool_size - self.shapes_per_sequence,
                   max(self.shapes_per_sequence, round(self.pool_size * self.test_ratio)))


class SampleRecord(BaseRecord):
    sample_id: str = Field(..., example="0003-s007_0002")
    sequence_id: str = Field(..., example="0003-s007")
    animation: int
    shape_id: str = Field(..., example="s007")
    frame: int
    split: str = Field(..., example="train")
    iuv_path: str = Field(..., example="iuv/0003-s007_0002.driu")
    corr_path: str = Field(..., example="corr/0003-s007_0002.csv")
    theta: List[List[float]]
    beta: List[float]
    alpha: List[float]
    joints14: List[List[float]] = Field(..., description="LSP-order 3D joints, meters")
    pair_count: int = 0
    occlusion: Optional[List[int]] = Field(None, description="Blacked-out rectangle (r0, c0, r1, c1)")

    def params(self) -> ModelParams:
        return ModelParams(PoseParams(self.theta), ShapeParams(self.beta), CameraParams.from_array(self.alpha))


class DatasetManifest(BaseRecord):
    name: str
    seed: int
    model_path: str = Field(..., example="model.drbm")
    image_size: Tuple[int, int]
    part_count: int
    tau: float
    stride: int
    records: List[SampleRecord] = Field(default_factory=list)
    counts: Dict[str, int] = Field(default_factory=dict)
    dropped: int = Field(0, description="Samples discarded for having too few matched pairs")
    config: Optional[GenerateConfig] = None

    def split(self, name: str) -> List[SampleRecord]:
        return [record for record in self.records if record.split == name]

    def find(self, sample_id: str) -> Optional[SampleRecord]:
        for record in self.records:
            if record.sample_id == sample_id:
                return record
        return None


class ManifestSummary(BaseModel):
    name: str
    seed: int
    image_size: Tuple[int, int]
    part_count: int
    counts: Dict[str, int]
    sequences: Dict[str, int]
    dropped: int
