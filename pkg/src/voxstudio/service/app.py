"""HTTP surface of the studio: sessions, jobs, previews, artifacts, SSE."""

from __future__ import annotations

import json
import logging
import os
import queue
from dataclasses import dataclass
from pathlib import Path

import yaml
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse

from ..config import ControlStrength
from ..errors import (
    BusyError,
    CacheMissError,
    InvalidPartError,
    ModelNotReadyError,
    NotReadyError,
    ProxyValidationError,
    VoxError,
)
from .schemas import (
    CreateSessionRequest,
    EditRequestBody,
    GenerateRequest,
    JobResponse,
    ReconstructRequest,
    SessionInfo,
    StrengthBody,
)
from .sessions import SessionStore

log = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    data_dir: str = "./studio_data"
    checkpoint: str | None = None
    workers: int = 2
    port: int = 8502
    host: str = "127.0.0.1"
    frontend_dir: str | None = None  # built browser studio, served at /app

    @staticmethod
    def load(path=None) -> "ServiceConfig":
        """Config file plus VOXSTUDIO_* environment overrides."""
        doc = {}
        if path:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        cfg = ServiceConfig(**doc)
        env = os.environ
        if "VOXSTUDIO_DATA_DIR" in env:
            cfg.data_dir = env["VOXSTUDIO_DATA_DIR"]
        if "VOXSTUDIO_CHECKPOINT" in env:
            cfg.checkpoint = env["VOXSTUDIO_CHECKPOINT"]
        if "VOXSTUDIO_WORKERS" in env:
            cfg.workers = int(env["VOXSTUDIO_WORKERS"])
        if "VOXSTUDIO_PORT" in env:
            cfg.port = int(env["VOXSTUDIO_PORT"])
        if "VOXSTUDIO_FRONTEND" in env:
            cfg.frontend_dir = env["VOXSTUDIO_FRONTEND"]
        return cfg


def _error_status(exc: VoxError) -> int:
    if isinstance(exc, ProxyValidationError):
        return 422
    if isinstance(exc, InvalidPartError):
        return 422
    if isinstance(exc, (BusyError,)):
        return 409
    if isinstance(exc, (NotReadyError, CacheMissError)):
        return 409
    if isinstance(exc, ModelNotReadyError):
        return 503
    return 400


def create_app(model=None, config: ServiceConfig | None = None) -> FastAPI:
    """App factory; tests pass an in-memory model, the CLI passes a
    checkpoint path through the config."""
    config = config or ServiceConfig()
    if model is None:
        from ..model import StudioModel

        if not config.checkpoint:
            raise ModelNotReadyError("service needs a model or a checkpoint path")
        model = StudioModel.load(config.checkpoint)
    store = SessionStore(model, config.data_dir, workers=config.workers)

    app = FastAPI(title="voxstudio", version="0.1.0")
    app.state.store = store
    app.state.config = config

    @app.exception_handler(VoxError)
    async def vox_error_handler(request: Request, exc: VoxError):
        body = {"error": type(exc).__name__, "detail": str(exc)}
        if isinstance(exc, ProxyValidationError):
            body["field"] = exc.field
        return JSONResponse(status_code=_error_status(exc), content=body)

    @app.exception_handler(KeyError)
    async def missing_handler(request: Request, exc: KeyError):
        return JSONResponse(status_code=404, content={"error": "NotFound", "detail": str(exc)})

    def _info(s) -> SessionInfo:
        return SessionInfo(
            id=s.id,
            state=s.state,
            prompt_tag=s.prompt_tag,
            seed=s.seed,
            strength=StrengthBody(
                lam=s.strength.lam, s_end=s.strength.s_end, n_samples=s.strength.n_samples
            ),
            part_ids=list(s.proxy.part_ids),
            artifacts=s.artifact_names(),
            has_cache=s.cache is not None and len(s.cache) > 0,
            can_undo=s.prev_cache_available,
            n_views=model.config.n_views,
            image_size=model.config.image_size,
            error=s.error,
        )

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "trained": model.trained, "sessions": len(store.sessions)}

    @app.post("/sessions", response_model=SessionInfo, status_code=201)
    def create_session(body: CreateSessionRequest):
        strength = ControlStrength(
            lam=body.strength.lam, s_end=body.strength.s_end, n_samples=body.strength.n_samples
        )
        s = store.create(body.proxy, body.prompt_tag, strength, body.seed)
        return _info(s)

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def get_session(session_id: str):
        return _info(store.get(session_id))

    @app.post("/sessions/{session_id}/generate", response_model=JobResponse, status_code=202)
    def generate(session_id: str, body: GenerateRequest):
        if not model.trained:
            raise ModelNotReadyError("no trained weights loaded")
        s = store.get(session_id)
        job = store.start_generation(s, body)
        return JobResponse(job_id=job, session_id=s.id, state=s.state, kind="generation")

    @app.get("/sessions/{session_id}/preview")
    def get_preview(session_id: str, az: float = 0.0, el: float = -30.0, steps: int | None = None):
        s = store.get(session_id)
        png = store.render_preview(s, az, el, steps)
        return Response(content=png, media_type="image/png")

    @app.post("/sessions/{session_id}/edit", response_model=JobResponse, status_code=202)
    def edit(session_id: str, body: EditRequestBody):
        s = store.get(session_id)
        job = store.start_edit(s, body)
        return JobResponse(job_id=job, session_id=s.id, state=s.state, kind="edit")

    @app.post("/sessions/{session_id}/undo", response_model=SessionInfo)
    def undo(session_id: str):
        s = store.get(session_id)
        store.undo(s)
        return _info(s)

    @app.post("/sessions/{session_id}/reconstruct", response_model=JobResponse, status_code=202)
    def reconstruct(session_id: str, body: ReconstructRequest):
        s = store.get(session_id)
        job = store.start_reconstruction(s, body)
        return JobResponse(job_id=job, session_id=s.id, state=s.state, kind="reconstruction")

    @app.get("/sessions/{session_id}/artifacts/{name:path}")
    def artifact(session_id: str, name: str):
        s = store.get(session_id)
        path = (s.root / name).resolve()
        if not str(path).startswith(str(s.root.resolve())) or not path.is_file():
            return JSONResponse(status_code=404, content={"error": "NotFound", "detail": name})
        media = "image/png" if name.endswith(".png") else "application/octet-stream"
        return Response(content=path.read_bytes(), media_type=media)

    if config.frontend_dir and Path(config.frontend_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/app", StaticFiles(directory=config.frontend_dir, html=True), name="app")

    @app.get("/sessions/{session_id}/stream")
    def stream(session_id: str, max_events: int | None = None):
        s = store.get(session_id)
        q = s.subscribe()

        def gen():
            sent = 0
            try:
                yield f"data: {json.dumps({'type': 'state', 'state': s.state})}\n\n"
                while max_events is None or sent < max_events:
                    try:
                        event = q.get(timeout=1.0)
                    except queue.Empty:
                        if s.state not in ("generating", "editing", "reconstructing"):
                            break
                        yield ": keep-alive\n\n"
                        continue
                    yield f"data: {json.dumps(event)}\n\n"
                    sent += 1
            finally:
                s.unsubscribe(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    return app
