"""Request/response models for the HTTP service. Audio and tensors travel
as base64-encoded payloads (WAV containers and little-endian float32)."""
from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str
    config_hash: str


class ConfigResponse(BaseModel):
    config_hash: str
    entries: dict[str, str]


class ConditionsResponse(BaseModel):
    classes: list[int]
    unconditional: int


class CmxPackRequest(BaseModel):
    shape: list[int] = Field(min_length=3, max_length=3)
    values_b64: str
    factor_h: int = 2
    factor_w: int = 2
    mode: str = "interleave"


class CmxDescriptorModel(BaseModel):
    in_shape: list[int]
    factor_h: int
    factor_w: int
    mode: str


class CmxTensorResponse(BaseModel):
    shape: list[int]
    values_b64: str
    descriptor: CmxDescriptorModel


class CmxUnpackRequest(BaseModel):
    shape: list[int] = Field(min_length=3, max_length=3)
    values_b64: str
    descriptor: CmxDescriptorModel


class TokenizeRequest(BaseModel):
    wav_b64: str


class TokenMapModel(BaseModel):
    schedule: list[int]
    grids: list[list[list[int]]]


class TokenizeResponse(BaseModel):
    token_map: TokenMapModel
    config_hash: str


class DetokenizeRequest(BaseModel):
    token_map: TokenMapModel
    seed: int = 0


class AudioResponse(BaseModel):
    wav_b64: str
    sample_rate: int
    duration_seconds: float
    config_hash: str


class GenerateRequest(BaseModel):
    count: int = Field(default=1, ge=1, le=64)
    condition: int | None = None    # None = unconditional
    seed: int = 0


class GeneratedItem(BaseModel):
    wav_b64: str
    sample_rate: int
    duration_seconds: float
    seed: int
    index: int
    condition: int | None


class GenerateResponse(BaseModel):
    items: list[GeneratedItem]
    config_hash: str


class EvaluateRequest(BaseModel):
    mode: str = "reconstruction"


class MetricReportModel(BaseModel):
    ndb_over_k: float
    pkid: float
    ikid: float
    pis: float
    iis: float
    mse: float
    mae: float
    fad: float
    provenance: dict


class InspectResponse(BaseModel):
    path: str
    description: str


class ErrorResponse(BaseModel):
    category: str
    message: str
