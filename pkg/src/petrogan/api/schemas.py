"""Request/response bodies for the explorer HTTP API."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ModelInfo(BaseModel):
    name: str
    resolution: int
    style_dim: int
    sefa_k: int


class DirectionInfo(BaseModel):
    index: int
    eigenvalue: float


class BasisOut(BaseModel):
    model: str
    layer_range: tuple[int, int]
    directions: list[DirectionInfo]


class ProjectionOut(BaseModel):
    w: list[float]
    loss_trace: list[float]
    recon: str  # fetchable PNG reference
    steps: int


class JobOut(BaseModel):
    job_id: str
    status: Literal["pending", "running", "done", "error"]
    result: Optional[ProjectionOut] = None
    error: Optional[str] = None


class SurveyItemOut(BaseModel):
    item_id: str
    left: str
    right: str


class SurveyFormOut(BaseModel):
    form_id: str
    n: int
    seed: int
    model: str
    items: list[SurveyItemOut]


class SurveyResponseIn(BaseModel):
    form_id: str
    respondent: str = Field(min_length=1)
    background: Literal["undergraduate", "postgraduate", "researcher",
                        "industry", "other"]
    answers: list[Literal["left", "right", "not_sure"]]


class GroupScoreOut(BaseModel):
    responses: int
    correct_pct: float
    incorrect_pct: float
    not_sure_pct: float


class ReportOut(BaseModel):
    total_responses: int
    overall: GroupScoreOut
    by_background: dict[str, GroupScoreOut]
    item_difficulty: dict[str, float]
