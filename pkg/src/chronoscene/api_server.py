"""
FastAPI server over a chronoscene store.

Provides REST endpoints for clients that stream or replay captures elsewhere:
- /scene, /changes, /where: the Q&A tools, as JSON
- /query: one command of the REPL grammar, answered as a qa narration
- /embed: the embedding adapter wire format, served by the default providers
- /health: status
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from chronoscene.config import load_config
from chronoscene.embeddings import GridGradientEmbedder, TrigramEmbedder
from chronoscene.errors import ChronosceneError, FormatError, UsageError
from chronoscene.esm import EpisodicSceneMemory
from chronoscene.otm import ObjectTemporalMemory
from chronoscene.qa import QAService, parse_duration
from chronoscene.utils import decode_png_base64

STORE_ENV_VAR = "CHRONOSCENE_STORE_DIR"
LOCATION_ENV_VAR = "CHRONOSCENE_LOCATION_ID"

try:
    from importlib.metadata import version

    __version__ = version("chronoscene")
except Exception:
    __version__ = "0.1.0"

app = FastAPI(
    title="Chronoscene API Server",
    description="Scene memory, object changes and spatial queries for revisited places",
    version=__version__,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class QueryRequest(BaseModel):
    command: str


class EmbedRequest(BaseModel):
    kind: Literal["visual", "text"]
    payload: Any


class VisualPayload(BaseModel):
    image: str
    mask: str | None = None


def get_store_dir() -> Path:
    """Store directory from ``CHRONOSCENE_STORE_DIR``."""
    raw = os.getenv(STORE_ENV_VAR)
    if not raw:
        raise HTTPException(status_code=503, detail=f"{STORE_ENV_VAR} is not set")
    store_dir = Path(raw)
    if not store_dir.is_dir():
        raise HTTPException(status_code=503, detail=f"Store directory not found: {store_dir}")
    return store_dir


def get_location_id(store_dir: Path = Depends(get_store_dir)) -> str:
    """``CHRONOSCENE_LOCATION_ID``, or the store's only location."""
    location_id = os.getenv(LOCATION_ENV_VAR)
    if location_id:
        return location_id
    locations = sorted(p.name for p in store_dir.iterdir() if (p / "esm").is_dir() or (p / "otm").is_dir())
    if len(locations) != 1:
        raise HTTPException(
            status_code=400,
            detail=f"Set {LOCATION_ENV_VAR}; the store holds {len(locations)} locations",
        )
    return locations[0]


def get_service(
    store_dir: Path = Depends(get_store_dir), location_id: str = Depends(get_location_id)
) -> QAService:
    try:
        config = load_config()
        esm = EpisodicSceneMemory.load(store_dir, location_id, config=config)
        otm = ObjectTemporalMemory.load(store_dir, location_id)
    except (ChronosceneError, FileNotFoundError) as exc:
        raise HTTPException(status_code=500, detail=str(exc)) from exc
    return QAService(esm, otm, qa_n=config.qa_n)


@app.get("/")
def landing_page(request: Request) -> dict[str, Any]:
    """Landing page listing the endpoints."""
    base_url = str(request.base_url).rstrip("/")
    return {
        "name": "Chronoscene API Server",
        "version": __version__,
        "base_url": base_url,
        "endpoints": [
            {"path": "/health", "method": "GET", "description": "Liveness check"},
            {"path": "/scene", "method": "GET", "description": "Most recent frames", "parameters": {"n": "frames"}},
            {
                "path": "/changes",
                "method": "GET",
                "description": "Recent object changes with clock direction and distance",
                "parameters": {"since": "duration such as 90, 5m, 2h, 1d", "limit": "max results"},
            },
            {"path": "/where", "method": "GET", "description": "Locate tracked objects", "parameters": {"label": "text"}},
            {"path": "/query", "method": "POST", "description": "Run one REPL command"},
            {"path": "/embed", "method": "POST", "description": "Embedding adapter reference server"},
        ],
        "documentation": "/docs",
    }


@app.get("/health")
def health_check() -> dict[str, str]:
    return {"status": "ok"}


@app.get("/scene")
def scene(n: int | None = None, service: QAService = Depends(get_service)) -> dict[str, Any]:
    frames = service.tool_esm_retrieval(n)
    return {"object": "list", "data": [f.model_dump() for f in frames]}


@app.get("/changes")
def changes(
    since: str | None = None, limit: int | None = None, service: QAService = Depends(get_service)
) -> dict[str, Any]:
    try:
        horizon = None
        if since is not None:
            latest = service.latest_time()
            horizon = None if latest is None else latest - parse_duration(since)
        reports = service.tool_otm_retrieval(limit=limit, since=horizon) if service.observer_pose else []
    except UsageError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return {"object": "list", "data": [r.model_dump() for r in reports]}


@app.get("/where")
def where(label: str, service: QAService = Depends(get_service)) -> dict[str, Any]:
    matches = service.tool_spatial(label) if service.observer_pose else []
    return {"object": "list", "data": [m.model_dump() for m in matches]}


@app.post("/query")
def query(request: QueryRequest, service: QAService = Depends(get_service)) -> dict[str, Any]:
    try:
        item = service.answer(request.command)
    except UsageError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return item.model_dump()


@app.post("/embed")
def embed(request: EmbedRequest) -> dict[str, list[float]]:
    """Reference implementation of the ``{kind, payload}`` -> ``{vector}`` adapter."""
    try:
        if request.kind == "text":
            if not isinstance(request.payload, str):
                raise FormatError("text payload must be a string")
            vector = TrigramEmbedder().embed_text(request.payload)
        else:
            payload = VisualPayload.model_validate(request.payload)
            image = decode_png_base64(payload.image)
            mask = None if payload.mask is None else decode_png_base64(payload.mask) > 0
            vector = GridGradientEmbedder().embed_visual(image, mask)
    except (ChronosceneError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return {"vector": vector.to_list()}
