"""Pydantic request/response bodies for the studio service (schema v1)."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field

SCHEMA_VERSION = 1


class StrengthBody(BaseModel):
    lam: float = Field(1.0, alias="lambda", ge=0.0, le=1.0)
    s_end: float = Field(1.0, gt=0.0, le=1.0)
    n_samples: int = Field(256, ge=1)

    model_config = {"populate_by_name": True}


class CreateSessionRequest(BaseModel):
    proxy: dict
    prompt_tag: str = "generic"
    strength: StrengthBody = StrengthBody()
    seed: int = 0


class SessionInfo(BaseModel):
    id: str
    state: str
    prompt_tag: str
    seed: int
    strength: StrengthBody
    part_ids: list[int]
    artifacts: list[str]
    has_cache: bool
    can_undo: bool
    n_views: int
    image_size: int
    schema_version: int = SCHEMA_VERSION
    error: Optional[str] = None


class GenerateRequest(BaseModel):
    candidate_image_b64: Optional[str] = None  # PNG bytes, pass-through mode
    n_candidates: int = Field(1, ge=1, le=16)
    candidate_index: int = Field(0, ge=0)
    steps: Optional[int] = Field(None, ge=1)
    request_token: Optional[str] = None


class JobResponse(BaseModel):
    job_id: str
    session_id: str
    state: str
    kind: str


class EditViewBody(BaseModel):
    azimuth: float
    elevation: float = -30.0


class EditRequestBody(BaseModel):
    parts: list[int]
    view: Optional[EditViewBody] = None
    prompt_tag: Optional[str] = None
    radius: int = Field(2, ge=0)
    seed: Optional[int] = None
    candidate_image_b64: Optional[str] = None
    request_token: Optional[str] = None


class ReconstructRequest(BaseModel):
    iterations: Optional[int] = Field(None, ge=1)
    rays_per_batch: Optional[int] = Field(None, ge=16)
    use_volume_guidance: bool = True
    mesh_resolution: Optional[int] = Field(None, ge=16, le=256)
    request_token: Optional[str] = None


class ErrorBody(BaseModel):
    error: str
    detail: str
    field: Optional[str] = None
