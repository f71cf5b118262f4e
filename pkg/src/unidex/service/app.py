"""FastAPI app answering searches against an immutable in-memory snapshot."""

from __future__ import annotations

import logging
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse

from ..errors import ConfigError
from ..pipeline import SearchEngine, load_engine
from .schemas import Hit, SearchRequest, SearchResponse, StatsResponse

logger = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    index: str = ""
    touch_ckpt: str = ""
    rank_ckpt: str = ""
    corpus: str = ""
    embeddings: str | None = None
    top_k: int = 10
    max_concurrent: int = 64
    max_candidates: int | None = None

    @classmethod
    def from_env(cls, **overrides) -> ServiceConfig:
        """Defaults from ``UNIDEX_*`` variables; explicit non-None overrides win."""
        cfg = cls()
        bind = os.environ.get("UNIDEX_BIND")
        if bind:
            cfg.host, cfg.port = parse_bind(bind)
        env = {
            "index": "UNIDEX_INDEX",
            "touch_ckpt": "UNIDEX_TOUCH_CKPT",
            "rank_ckpt": "UNIDEX_RANK_CKPT",
            "corpus": "UNIDEX_CORPUS",
            "embeddings": "UNIDEX_EMBEDDINGS",
        }
        for attr, var in env.items():
            if os.environ.get(var):
                setattr(cfg, attr, os.environ[var])
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0 < self.port < 65536:
            raise ConfigError(f"invalid port {self.port}")
        if self.top_k < 1 or self.max_concurrent < 1:
            raise ConfigError("top_k and max_concurrent must be positive")
        for name in ("index", "touch_ckpt", "rank_ckpt", "corpus"):
            path = getattr(self, name)
            if not path or not Path(path).is_file():
                raise ConfigError(f"{name} file not found: {path!r}")
        if self.embeddings and not Path(self.embeddings).is_file():
            raise ConfigError(f"embeddings file not found: {self.embeddings!r}")


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"bind address must be HOST:PORT, got {bind!r}") from None


def create_app(engine: SearchEngine, *, default_top_k: int = 10, max_concurrent: int = 64) -> FastAPI:
    app = FastAPI(title="unidex", version="0.1.0")
    slots = threading.BoundedSemaphore(max_concurrent)
    stats = StatsResponse(**asdict(engine.index.stats()))

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "invalid request", "detail": exc.errors()})

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        incident = uuid.uuid4().hex[:12]
        logger.exception("request failed (incident %s)", incident)
        return JSONResponse(status_code=500, content={"error": "internal error", "id": incident})

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz() -> str:
        return "ok"

    @app.get("/v1/stats", response_model=StatsResponse)
    def index_stats() -> StatsResponse:
        return stats

    @app.post("/v1/search", response_model=SearchResponse)
    def do_search(req: SearchRequest) -> SearchResponse:
        with slots:
            start = time.perf_counter()
            outcome = engine.search(req.query, top_k=req.top_k or default_top_k)
            latency = (time.perf_counter() - start) * 1000.0
        return SearchResponse(
            hits=[Hit(id=h.doc_id, score=h.score) for h in outcome.hits],
            touched=outcome.touched,
            latency_ms=latency,
        )

    app.state.engine = engine
    app.state.default_top_k = default_top_k
    return app


def app_from_config(config: ServiceConfig) -> FastAPI:
    engine = load_engine(
        config.index,
        config.touch_ckpt,
        config.rank_ckpt,
        config.corpus,
        config.embeddings,
        max_candidates=config.max_candidates,
    )
    return create_app(engine, default_top_k=config.top_k, max_concurrent=config.max_concurrent)


def serve(config: ServiceConfig) -> None:
    import uvicorn

    app = app_from_config(config)
    logger.info("serving %d documents on %s:%d", len(app.state.engine.index), config.host, config.port)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
