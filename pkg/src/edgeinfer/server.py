"""HTTP gateway: model listing and image prediction over a read-only
variant registry, plus static hosting for the browser UI.

Uploaded images are handled in memory and discarded; an opt-in audit log
records content hashes only.  Request handlers are synchronous so FastAPI
dispatches them to its threadpool, and a semaphore bounds simultaneous
inferences to protect small devices.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import __version__, engine
from .bundle import ModelBundle, load_bundle, size_of
from .errors import BundleError, EdgeInferError, ImageDecodeError

log = logging.getLogger("edgeinfer.server")

MAX_IMAGE_BYTES = 10 * 1024 * 1024
VARIANT_ORDER = ("original", "fp32opt", "fp16", "int8")


@dataclass
class RegistryEntry:
    id: str
    precision: str
    bundle: ModelBundle
    container_bytes: int
    payload_bytes: int


def registry_id(variant: str) -> str:
    """The unoptimized trained bundle (variant tag 'fp32') registers under
    the id 'original'; optimized variants keep their tags."""
    return "original" if variant == "fp32" else variant


def build_registry(models_dir) -> dict[str, RegistryEntry]:
    models_dir = Path(models_dir)
    if not models_dir.is_dir():
        raise BundleError(f"models directory {models_dir} does not exist",
                          code="missing-models-dir")
    entries: dict[str, RegistryEntry] = {}
    for child in sorted(models_dir.iterdir()):
        if not (child / "manifest.json").is_file():
            continue
        bundle = load_bundle(child)  # validates graph + checksum
        rid = registry_id(bundle.variant)
        if rid in entries:
            raise BundleError(f"duplicate registry id {rid!r} "
                              f"({child} vs {entries[rid].bundle.path})",
                              code="duplicate-variant")
        container, payload = size_of(bundle)
        entries[rid] = RegistryEntry(id=rid, precision=bundle.variant,
                                     bundle=bundle, container_bytes=container,
                                     payload_bytes=payload)
    if not entries:
        raise BundleError(f"no bundles found under {models_dir}",
                          code="empty-models-dir")
    return entries


def registry_order(entries: dict[str, RegistryEntry]) -> list[RegistryEntry]:
    known = [entries[v] for v in VARIANT_ORDER if v in entries]
    extra = [entries[k] for k in sorted(entries) if k not in VARIANT_ORDER]
    return known + extra


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": {"code": code, "message": message}})


def create_app(models_dir, max_concurrent: int = 4,
               static_dir=None, audit_log: Optional[str] = None) -> FastAPI:
    registry = build_registry(models_dir)
    gate = threading.Semaphore(max_concurrent)
    app = FastAPI(title="edgeinfer gateway", version=__version__)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        missing = ", ".join(str(e.get("loc", ("?",))[-1]) for e in exc.errors())
        return _error(422, "missing-field",
                      f"invalid or missing fields: {missing}")

    @app.exception_handler(EdgeInferError)
    async def on_domain_error(request: Request, exc: EdgeInferError):
        return _error(500, exc.code, str(exc))

    @app.get("/api/health")
    def health():
        return {"service": "edgeinfer-gateway", "version": __version__,
                "variants": len(registry)}

    @app.get("/api/models")
    def models():
        return [{"id": e.id, "precision": e.precision,
                 "size_bytes": e.container_bytes,
                 "payload_bytes": e.payload_bytes,
                 "classes": e.bundle.classes}
                for e in registry_order(registry)]

    @app.post("/api/predict")
    def predict(image: UploadFile, model: str = Form(...)):
        entry = registry.get(model)
        if entry is None:
            return _error(404, "unknown-model",
                          f"no model registered under id {model!r}")
        blob = image.file.read(MAX_IMAGE_BYTES + 1)
        if len(blob) > MAX_IMAGE_BYTES:
            return _error(413, "image-too-large",
                          f"image exceeds {MAX_IMAGE_BYTES} bytes")
        if not blob:
            return _error(422, "missing-field", "image upload is empty")
        digest = hashlib.sha256(blob).hexdigest()
        if audit_log:
            with open(audit_log, "a", encoding="utf-8") as fh:
                fh.write(f"{digest}\n")
        try:
            with gate:
                result = engine.predict(entry.bundle, blob)
        except ImageDecodeError as exc:
            return _error(400, exc.code, str(exc))
        return {"label": result.label, "confidence": result.confidence,
                "model": entry.id, "latency_ms": result.latency_ms,
                "scores": result.class_probabilities(entry.bundle.classes),
                "image_echo": f"sha256:{digest}"}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    else:
        default_static = Path(__file__).parent / "static"
        if default_static.is_dir():
            app.mount("/", StaticFiles(directory=default_static, html=True), name="ui")

    return app


@dataclass
class ServerConfig:
    host: str = "0.0.0.0"
    port: int = 8321
    models_dir: str = "models"
    max_concurrent: int = 4
    static_dir: Optional[str] = None
    audit_log: Optional[str] = None


def resolve_server_config(host=None, port=None, models_dir=None,
                          max_concurrent=None, static_dir=None,
                          audit_log=None) -> ServerConfig:
    """Precedence: explicit flags > EDGEINFER_* environment > defaults."""
    env = os.environ
    cfg = ServerConfig()
    cfg.host = host or env.get("EDGEINFER_HOST") or cfg.host
    cfg.port = int(port or env.get("EDGEINFER_PORT") or cfg.port)
    cfg.models_dir = models_dir or env.get("EDGEINFER_MODELS_DIR") or cfg.models_dir
    cfg.max_concurrent = int(max_concurrent
                             or env.get("EDGEINFER_MAX_CONCURRENT")
                             or cfg.max_concurrent)
    cfg.static_dir = static_dir or env.get("EDGEINFER_STATIC_DIR") or None
    cfg.audit_log = audit_log or env.get("EDGEINFER_AUDIT_LOG") or None
    return cfg


def serve(cfg: ServerConfig) -> None:
    import uvicorn

    app = create_app(cfg.models_dir, max_concurrent=cfg.max_concurrent,
                     static_dir=cfg.static_dir, audit_log=cfg.audit_log)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="info")
