"""Request and response bodies of the HTTP service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, PositiveInt

from ..experiment import ExperimentConfig


class HealthResponse(BaseModel):
    status: str
    version: str


class ArchitectureInfo(BaseModel):
    case: str
    input_dim: int
    hidden: list[tuple[int, str]]
    output_activation: str
    n_params: int
    learning_rate: float


class JobStatus(BaseModel):
    id: str
    status: Literal["queued", "running", "done", "failed"]
    error: str | None = None
    summary: dict[str, dict[str, float]] | None = None


class ExperimentRequest(BaseModel):
    config: ExperimentConfig = Field(default_factory=ExperimentConfig)
    wait: bool = False


class ReportRowOut(BaseModel):
    client: int
    kind: str
    rmse: dict[str, float]
    seconds: dict[str, float]
    val_rmse: dict[str, float]


class ExperimentResult(BaseModel):
    strategies: list[str]
    rows: list[ReportRowOut]
    csv: str


class SearchRequest(BaseModel):
    case: Literal["power_curve", "bearing_temp"] = "power_curve"
    trials: PositiveInt = 100
    seed: int = 0
    max_epochs: PositiveInt = 150
    patience: PositiveInt = 15
    fleet: dict = Field(default_factory=dict, description="synthetic fleet overrides for the public turbine")
    csv_path: str | None = None


class SearchResponse(BaseModel):
    architecture: dict
    learning_rate: float
    test_rmse: float
    n_params: int
    trials: list[dict]
