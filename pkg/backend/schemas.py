import math
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, field_validator, model_validator

from models import BAYER_PATTERNS


def _parse_sentinel(value: Any) -> Any:
    if isinstance(value, str):
        return float(value)
    return value


def _dump_sentinel(value: float) -> Union[float, str]:
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


# Non-finite floats travel through JSON as "inf" / "nan" strings
SentinelFloat = Annotated[
    float,
    BeforeValidator(_parse_sentinel),
    PlainSerializer(_dump_sentinel, return_type=Union[float, str], when_used="json"),
]


# Raw Schemas
class RawSidecar(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    pattern: str
    black_level: int = Field(ge=0)
    white_level: int = Field(le=65535)
    frame_index: int = Field(default=0, ge=0)
    iso: Optional[int] = None
    lens: Optional[str] = None

    @field_validator("pattern")
    @classmethod
    def known_pattern(cls, value: str) -> str:
        value = value.upper()
        if value not in BAYER_PATTERNS:
            raise ValueError(f"Unknown Bayer pattern: {value}")
        return value

    @model_validator(mode="after")
    def check_frame(self) -> "RawSidecar":
        if self.width % 2 or self.height % 2:
            raise ValueError(f"odd dimension: {self.width}x{self.height}")
        if self.black_level >= self.white_level:
            raise ValueError(f"invalid levels: black {self.black_level}, white {self.white_level}")
        return self


class BurstFrameEntry(BaseModel):
    index: int
    path: str
    iso: Optional[int] = None
    lens: Optional[str] = None


class IngestManifest(BaseModel):
    id: str
    kind: Literal["raw", "rgb"]
    width: int
    height: int
    pattern: Optional[str] = None
    frames: List[BurstFrameEntry]


# Registration Schemas
class EccConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pyramid_levels: int = Field(default=4, ge=1)
    max_iterations: int = Field(default=200, ge=1)
    epsilon: float = Field(default=1e-6, gt=0)
    pre_blur_sigma: float = Field(default=1.0, ge=0)
    min_rho: float = Field(default=0.8, ge=-1, le=1)


class WarpRecord(BaseModel):
    index: int
    pairwise: List[float]
    cumulative: List[float]
    rho: SentinelFloat
    converged: bool = True


class WarpFile(BaseModel):
    reference: int = 0
    frames: List[WarpRecord]
    ecc: EccConfig = Field(default_factory=EccConfig)
    motion_suspect: bool = False
    raw_scale: float = 0.5


# Fusion Schemas
FusionMethod = Literal["pixel_contrast", "pixel_variance", "laplacian", "wavelet"]


class FusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: FusionMethod = "wavelet"
    pyramid_levels: int = Field(default=5, ge=1)
    variance_radius: int = Field(default=4, ge=0)
    decision_smooth_radius: int = Field(default=2, ge=0)
    wavelet_levels: int = Field(default=4, ge=1)
    frames: Optional[List[int]] = None


class FusionRecord(BaseModel):
    burst: str
    output: str
    decision_map: Optional[str] = None
    fusion: FusionConfig
    frames_used: List[int]


# Noise Schemas
class NoiseParams(BaseModel):
    lambda_shot: float = Field(ge=0)
    lambda_read: float = Field(ge=0)


class NoiseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["off", "fixed", "sampled"] = "off"
    lambda_shot: Optional[float] = Field(default=None, ge=0)
    lambda_read: Optional[float] = Field(default=None, ge=0)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def check_mode(self) -> "NoiseConfig":
        if self.mode == "fixed" and (self.lambda_shot is None or self.lambda_read is None):
            raise ValueError("fixed noise needs lambda_shot and lambda_read")
        return self


class NoiseRecord(BaseModel):
    burst: str
    mode: str
    seed: int
    params: NoiseParams
    streams: List[int]


# Dataset Schemas
class CropRecord(BaseModel):
    x: int
    y: int
    size: int
    frames: List[str]
    gt: str
    sha256: List[str]
    raw: Optional[List[str]] = None
    augment: Optional[Dict[str, Any]] = None


class BurstCrops(BaseModel):
    id: str
    lens: Optional[str] = None
    split: str = "train"
    gt_source: str = "file"
    crops: List[CropRecord] = []


class CropManifest(BaseModel):
    seed: int = 0
    crop_size: int = 128
    bursts: List[BurstCrops] = []


class SplitRecord(BaseModel):
    seed: int
    counts: Dict[str, List[int]]
    assignment: Dict[str, str]


# Metrics Schemas
class QualityItem(BaseModel):
    id: str
    psnr: SentinelFloat
    ssim: float
    split: Optional[str] = None


class SplitSummary(BaseModel):
    split: str
    mean_psnr: SentinelFloat
    mean_ssim: float
    count: int


class QualityReport(BaseModel):
    ignore_border: int = 4
    psnr_pooling: str = "rgb"
    items: List[QualityItem]
    mean_psnr: SentinelFloat
    mean_ssim: float
    count: int
    splits: List[SplitSummary] = []


# Pipeline Schemas
class StageToggles(BaseModel):
    """Optional pipeline stages; ingest and demosaic always run"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    registration: bool = Field(default=True, alias="register")
    noise: bool = True
    fuse: bool = True
    crops: bool = True
    eval: bool = True


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_dir: Path
    output_dir: Path
    stages: StageToggles = Field(default_factory=StageToggles)
    ecc: EccConfig = Field(default_factory=EccConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    crop_size: int = Field(default=128, gt=0)
    raw_crops: bool = False
    augment: bool = False
    split: Dict[str, List[int]] = {}
    seed: int = 0
    threads: int = Field(default=4, ge=1)

    @field_validator("crop_size")
    @classmethod
    def even_crop(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"crop_size must be even, got {value}")
        return value

    @field_validator("split")
    @classmethod
    def split_pairs(cls, value: Dict[str, List[int]]) -> Dict[str, List[int]]:
        for lens, counts in value.items():
            if len(counts) != 2 or min(counts) < 0:
                raise ValueError(f"split for {lens} must be [train, test], got {counts}")
        return value


class StageRecord(BaseModel):
    stage: str
    burst: Optional[str] = None
    status: str = "ok"
    outputs: List[str] = []


class PipelineManifest(BaseModel):
    config: PipelineConfig
    stages: List[StageRecord] = []
