from pydantic import BaseModel, Field

from app.body.skeleton import SkeletonPreset

SUPPORTED_PART_COUNTS = (1, 12, 24)


class TemplateConfig(BaseModel):
    """Settings for the procedural body template"""
    part_count: int = Field(12, description="Body part charts: 1 (single capsule), 12 or 24")
    resolution: int = Field(24, description="Vertices around each segment; rows along it scale with it")
    skeleton: SkeletonPreset = Field(SkeletonPreset.FULL, description="Kinematic tree preset")
    shape_rank: int = Field(50, description="Number of shape basis modes")
    shape_scale: float = Field(0.02, description="RMS displacement in meters of the leading shape mode")
    seed: int = Field(0, description="Seed for the random smooth shape fields")

    @property
    def rows(self) -> int:
        return max(3, (self.resolution * 5) // 6)
