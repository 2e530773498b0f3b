from typing import Any, Dict, List, Optional

from pydantic import Field, field_validator

from .common import BaseRecord

PERCENT_FIELDS = ("pck", "auc", "seg_accuracy", "seg6_accuracy", "fg_accuracy")
EVAL_COLUMNS = [
    "sample_id", "mpjpe", "pa_mpjpe", "pck", "auc", "mpvpe", "mse_params",
    "seg_accuracy", "seg_mean_f1", "seg6_accuracy", "seg6_mean_f1", "fg_accuracy", "fg_f1",
]
AGGREGATE_ID = "mean"


class EvalReport(BaseRecord):
    """Metrics of one prediction against its ground truth; errors in millimeters"""
    sample_id: str = Field(..., example="0003-s007_0002")
    mpjpe: float = Field(..., ge=0)
    pa_mpjpe: float = Field(..., ge=0)
    pck: float = Field(..., ge=0, le=100)
    auc: float = Field(..., ge=0, le=100)
    mpvpe: float = Field(..., ge=0)
    mse_params: float = Field(..., ge=0)
    seg_accuracy: float = Field(..., ge=0, le=100)
    seg_mean_f1: float = Field(..., ge=0, le=1)
    seg6_accuracy: Optional[float] = Field(None, ge=0, le=100, description="After merging into 6 body parts")
    seg6_mean_f1: Optional[float] = Field(None, ge=0, le=1)
    fg_accuracy: float = Field(..., ge=0, le=100)
    fg_f1: float = Field(..., ge=0, le=1)
    seg_f1: Dict[int, float] = Field(default_factory=dict, description="F1 per part at model granularity")

    @field_validator("mpjpe", "pa_mpjpe", "pck", "auc", "mpvpe", "mse_params", "seg_accuracy", "fg_accuracy")
    def validate_finite(cls, v, info):
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError(f"{info.field_name} must be finite")
        return v

    def row(self, part_count: int) -> Dict[str, Any]:
        row = {column: getattr(self, column) for column in EVAL_COLUMNS}
        for part in range(1, part_count + 1):
            row[f"f1_part_{part}"] = self.seg_f1.get(part)
        return row


class EvalSummary(BaseRecord):
    evaluated: int
    missing: List[str] = Field(default_factory=list)
    aggregate: Optional[EvalReport] = None
