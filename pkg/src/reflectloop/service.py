"""HTTP face of the reflection loop.

POST /v1/reflect runs one closed-loop trajectory over the posted image and
question and returns the structured trajectory document with every round's
rendered context inlined as base64 PNG. GET /healthz reports liveness.
"""

from __future__ import annotations

import base64
import binascii
import dataclasses

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import __version__
from .config import AppConfig, ConfigError
from .loop import (
    GroundingFailurePolicy,
    MalformedPolicy,
    run_trajectory,
    trajectory_document,
)
from .pngio import ImageDecodeError, decode_png, encode_png


class ReflectRequest(BaseModel):
    image: str  # base64 PNG
    question: str
    config: dict = {}


_OVERRIDABLE = {
    "max_rounds": int,
    "overlay_mode": str,
    "resend_all_images": bool,
}


def _apply_overrides(loop_config, overrides: dict):
    unknown = set(overrides) - set(_OVERRIDABLE) - {"on_empty_grounding", "on_malformed"}
    if unknown:
        raise HTTPException(
            status_code=400, detail=f"unknown config overrides: {sorted(unknown)}"
        )
    kwargs = {
        key: cast(overrides[key])
        for key, cast in _OVERRIDABLE.items()
        if key in overrides
    }
    if "on_empty_grounding" in overrides:
        kwargs["on_empty_grounding"] = GroundingFailurePolicy(
            overrides["on_empty_grounding"]
        )
    if "on_malformed" in overrides:
        kwargs["on_malformed"] = MalformedPolicy(overrides["on_malformed"])
    try:
        return dataclasses.replace(loop_config, **kwargs)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def build_app(app_config: AppConfig) -> FastAPI:
    backends = app_config.make_backends()
    app = FastAPI(title="reflectloop", version=__version__)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/v1/reflect")
    def reflect(request: ReflectRequest) -> dict:
        if not request.question.strip():
            raise HTTPException(status_code=400, detail="question must be non-empty")
        try:
            image_png = base64.b64decode(request.image, validate=True)
            decode_png(image_png)
        except (binascii.Error, ValueError, ImageDecodeError) as exc:
            raise HTTPException(
                status_code=400, detail=f"image is not decodable PNG base64: {exc}"
            ) from exc
        config = _apply_overrides(app_config.loop, request.config)
        trajectory = run_trajectory(image_png, request.question, backends, config)
        images = [
            base64.b64encode(encode_png(ctx.rendered)).decode("ascii")
            for ctx in trajectory.contexts
        ]
        return trajectory_document(trajectory, image_refs=images)

    return app


def serve(app_config: AppConfig, host: str, port: int) -> None:
    import uvicorn

    uvicorn.run(build_app(app_config), host=host, port=port, log_level="warning")


__all__ = ["ReflectRequest", "build_app", "serve", "ConfigError"]
