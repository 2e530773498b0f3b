from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from app.core.errors import ConfigurationError

SUPERVISION_TOKENS = ("rpj", "msk", "adv", "rec", "rgr")
LOSS_LOG_COLUMNS = ["iter", "l_rpj", "l_msk", "l_adv", "l_rec", "l_rgr", "total"]


class SupervisionFlags(BaseModel):
    """Which loss terms have supervision available (the indicators of the total loss)"""
    rpj: bool = Field(True, description="Dense landmark reprojection")
    msk: bool = Field(True, description="Soft part mask IoU")
    adv: bool = Field(True, description="Plausibility prior")
    rec: bool = Field(False, description="3D joint reconstruction, needs ground-truth joints")
    rgr: bool = Field(False, description="Parameter regression, needs ground-truth parameters")

    @classmethod
    def parse(cls, text: str) -> "SupervisionFlags":
        """Build flags from a comma list such as 'rpj,msk,rec'"""
        tokens = [token.strip().lower() for token in text.split(",") if token.strip()]
        unknown = [token for token in tokens if token not in SUPERVISION_TOKENS]
        if unknown:
            raise ConfigurationError(
                f"Unknown supervision token(s) {unknown}; expected a subset of {list(SUPERVISION_TOKENS)}"
            )
        return cls(**{token: token in tokens for token in SUPERVISION_TOKENS})

    def tokens(self) -> List[str]:
        return [token for token in SUPERVISION_TOKENS if getattr(self, token)]


class LossWeights(BaseModel):
    rpj: float = 1.0
    msk: float = 1.0
    adv: float = 1.0
    rec: float = 1.0
    rgr: float = 1.0

    @field_validator("rpj", "msk", "adv", "rec", "rgr")
    def validate_non_negative(cls, v, info):
        if v < 0:
            raise ConfigurationError(f"Loss weight {info.field_name} must be >= 0, got {v}")
        return v


class FitConfig(BaseModel):
    """Settings of one render-and-compare fit"""
    max_iterations: int = Field(500, description="Upper bound on gradient steps")
    step_theta: float = Field(1.0, description="Step size for the pose block, pixels when jacobian_scaling is on")
    step_beta: float = Field(1.0, description="Step size for the shape block, pixels when jacobian_scaling is on")
    step_alpha: float = Field(1.0, description="Step size for the camera block, pixels when jacobian_scaling is on")
    clip_norm: float = Field(1e3, description="Gradient norm clipping threshold")
    sigma_start: float = Field(2.0, description="Soft mask sharpness at iteration 0, pixels")
    sigma_end: float = Field(0.5, description="Soft mask sharpness after annealing, pixels")
    sigma_anneal_fraction: float = Field(0.5, description="Share of iterations spent annealing sigma")
    shape_freeze_fraction: float = Field(0.1, description="Share of iterations with shape frozen")
    tolerance: float = Field(1e-6, description="Stop once the total loss is at or below this value")
    supervision: SupervisionFlags = Field(default_factory=SupervisionFlags)
    weights: LossWeights = Field(default_factory=LossWeights)
    prior_shape_weight: float = Field(0.0, description="Weight of the |beta|^2 term of the prior")
    tau: float = Field(0.05, description="IUV match distance threshold")
    stride: Optional[int] = Field(None, description="Pixel sampling stride; calibrated when unset")
    normalize_rpj: bool = Field(True, description="Average the reprojection loss over pairs")
    normalize_msk: bool = Field(True, description="Average the mask loss over parts")
    jacobian_scaling: bool = Field(
        True, description="Divide each gradient entry by the squared mean pixel motion of its parameter"
    )
    rematch_every: int = Field(0, description="Re-match against visible vertices every K iterations; 0 disables")
    min_pairs: int = Field(0, description="Targets with fewer matched pairs are rejected")
    backoff: bool = Field(True, description="Reject steps that raise the loss and halve the step sizes")
    backoff_factor: float = 0.5
    recovery_factor: float = 1.1
    divergence_factor: float = 10.0
    divergence_patience: int = 20
    image_size: Optional[Tuple[int, int]] = Field(None, description="Expected target (height, width)")

    @field_validator("supervision", mode="before")
    def parse_supervision(cls, v):
        return SupervisionFlags.parse(v) if isinstance(v, str) else v

    @field_validator("max_iterations")
    def validate_iterations(cls, v):
        if v < 1:
            raise ConfigurationError(f"max_iterations must be >= 1, got {v}")
        return v

    @field_validator("step_theta", "step_beta", "step_alpha", "clip_norm", "sigma_start", "sigma_end")
    def validate_positive(cls, v, info):
        if not v > 0:
            raise ConfigurationError(f"{info.field_name} must be positive, got {v}")
        return v

    @field_validator("sigma_anneal_fraction", "shape_freeze_fraction")
    def validate_fraction(cls, v, info):
        if not 0.0 <= v <= 1.0:
            raise ConfigurationError(f"{info.field_name} must lie in [0, 1], got {v}")
        return v

    @field_validator("tau", "prior_shape_weight", "tolerance")
    def validate_non_negative(cls, v, info):
        if v < 0:
            raise ConfigurationError(f"{info.field_name} must be >= 0, got {v}")
        return v

    @field_validator("stride")
    def validate_stride(cls, v):
        if v is not None and v < 1:
            raise ConfigurationError(f"stride must be >= 1, got {v}")
        return v

    @field_validator("rematch_every", "min_pairs")
    def validate_count(cls, v, info):
        if v < 0:
            raise ConfigurationError(f"{info.field_name} must be >= 0, got {v}")
        return v

    def sigma_at(self, iteration: int) -> float:
        """Linear anneal from sigma_start to sigma_end over the annealing share, then constant"""
        span = self.sigma_anneal_fraction * self.max_iterations
        if span <= 0:
            return self.sigma_end
        progress = min(iteration / span, 1.0)
        return self.sigma_start + (self.sigma_end - self.sigma_start) * progress

    def shape_frozen(self, iteration: int) -> bool:
        return iteration < self.shape_freeze_fraction * self.max_iterations


class LossReport(BaseModel):
    """Loss terms of one evaluation; disabled terms are exactly 0"""
    l_rpj: float = 0.0
    l_msk: float = 0.0
    l_adv: float = 0.0
    l_rec: float = 0.0
    l_rgr: float = 0.0
    total: float = 0.0
    weights: LossWeights = Field(default_factory=LossWeights)
    matched_pairs: int = 0
    visible_parts: int = 0

    def row(self, iteration: int) -> Dict[str, float]:
        return {"iter": iteration, "l_rpj": self.l_rpj, "l_msk": self.l_msk, "l_adv": self.l_adv,
                "l_rec": self.l_rec, "l_rgr": self.l_rgr, "total": self.total}


class FitSummary(BaseModel):
    """Serializable outcome of a fit, as returned by the HTTP API and written by the CLI"""
    sample_id: Optional[str] = Field(None, example="0003-s007_0002")
    converged: bool
    iterations: int
    initial_loss: float
    final_loss: float
    duration_seconds: float
    theta: List[List[float]]
    beta: List[float]
    alpha: List[float]
    error: Optional[str] = None
