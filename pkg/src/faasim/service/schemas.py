"""Pydantic request/response models for the HTTP surface."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..costs import PricingConfig


class PricingModel(BaseModel):
    """Inline pricing profile; mirrors the flat config file keys."""

    c_inv: float = Field(ge=0)
    c_run_mb_s: float = Field(ge=0)
    c_pub: float = Field(ge=0)
    c_byte: float = Field(ge=0)
    c_qapi: float = Field(ge=0)
    c_put: float = Field(ge=0)
    c_get: float = Field(ge=0)
    c_list: float = Field(ge=0)

    def to_config(self) -> PricingConfig:
        return PricingConfig(**self.model_dump())


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateRequest(BaseModel):
    out_dir: str
    neurons: int = Field(ge=1)
    layers: int = Field(ge=1)
    nnz_per_row: int = Field(ge=1)
    batch: int = Field(default=1, ge=1)
    input_density: float = Field(default=0.3, ge=0.0, le=1.0)
    seed: int = 0


class GenerateResponse(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    schema_version: int
    model_path: str
    inputs_path: str
    layer_nnz: list[int]
    input_nnz: int


class IngestRequest(BaseModel):
    out_dir: str
    layer_paths: list[str] = Field(min_length=1)
    inputs_path: str
    neurons: int = Field(ge=1)
    batch: int = Field(ge=1)
    bias: float = -0.30
    y_max: float = Field(default=32.0, gt=0)


class PartitionRequest(BaseModel):
    out_dir: str
    workers: int = Field(ge=1)
    scheme: str = Field(default="hgp", pattern="^(hgp|random)$")
    epsilon: float = Field(default=0.10, ge=0.0)
    seed: int = 0


class PartitionResponse(BaseModel):
    schema_version: int
    pack_paths: list[str]
    metrics_path: str
    cut_metrics: dict


class RunRequest(BaseModel):
    out_dir: str
    workers: int = Field(ge=1)
    channel: str = Field(pattern="^(serial|queue|object)$")
    branching: int = Field(default=4, ge=1)
    memory_mb: int = Field(default=1024, ge=1)
    seed: int = 0
    verify: bool = False
    repeats: int = Field(default=3, ge=1)
    pricing: PricingModel | None = None


class VerificationModel(BaseModel):
    checked: bool
    passed: bool | None
    first_diff_row: int | None


class RunResponse(BaseModel):
    schema_version: int
    output_path: str
    meter_path: str
    cost_path: str
    meter: dict
    cost_report: dict
    elapsed_s: dict[str, float]
    output_rows: list[int]
    verification: VerificationModel


class CompareRequest(BaseModel):
    out_dir: str
    workers: list[int] = Field(min_length=1)
    channels: list[str] = Field(default=["serial", "queue", "object"])
    scheme: str = Field(default="hgp", pattern="^(hgp|random)$")
    epsilon: float = Field(default=0.10, ge=0.0)
    branching: int = Field(default=4, ge=1)
    memory_mb: int = Field(default=1024, ge=1)
    seed: int = 0
    repeats: int = Field(default=3, ge=1)
    pricing: PricingModel | None = None


class CompareResponse(BaseModel):
    schema_version: int
    rows: list[dict]
    csv_path: str
    text_path: str
    table: str
