"""HTTP application serving /ground, /segment and /healthz.

The reply shapes are exactly what the reflectloop HTTP backend clients
parse; the conformance suite in reflectloop.contract runs against this
app over real HTTP with no adjustments. Handlers are stateless, so any
request may be served concurrently.

Real mode wraps caller-supplied adapters (see build_app); until both are
provided the model endpoints answer 503, which also covers the loading
window of a slow checkpoint.
"""

from __future__ import annotations

import base64
import binascii
from typing import Protocol, Sequence

import numpy as np
from fastapi import FastAPI, HTTPException, Request

from reflectloop.pngio import ImageDecodeError, png_dimensions
from reflectloop.render import rle_encode

from . import __version__
from .config import ShimConfig, load_fixtures


class GrounderAdapter(Protocol):
    def ground(self, image_png: bytes, query: str) -> list[tuple[float, float]]: ...


class SegmenterAdapter(Protocol):
    def segment(self, image_png: bytes, points: Sequence[tuple[float, float]]) -> dict: ...


class StubGrounder:
    """Answers from the fixture table; unknown anchors ground to nothing."""

    def __init__(self, fixtures: dict[str, list[tuple[float, float]]]):
        self._fixtures = fixtures

    def ground(self, image_png, query):
        return list(self._fixtures.get(query, []))


class StubSegmenter:
    """A deterministic square of `side` pixels around each prompt point."""

    def __init__(self, side: int):
        self.side = side

    def segment(self, image_png, points):
        width, height = png_dimensions(image_png)
        bitmap = np.zeros((height, width), dtype=bool)
        for x, y in points:
            # same fraction-to-pixel convention as the marker renderer
            px = min(int(x * width), width - 1)
            py = min(int(y * height), height - 1)
            x0 = max(0, px - self.side // 2)
            y0 = max(0, py - self.side // 2)
            bitmap[y0 : min(height, y0 + self.side), x0 : min(width, x0 + self.side)] = True
        runs = rle_encode(bitmap).runs
        if bitmap.any():
            ys, xs = bitmap.nonzero()
            box = {
                "x0": int(xs.min()),
                "y0": int(ys.min()),
                "x1": int(xs.max()),
                "y1": int(ys.max()),
            }
            empty = False
        else:
            box = {"x0": 0, "y0": 0, "x1": 0, "y1": 0}
            empty = True
        return {
            "width": width,
            "height": height,
            "runs": list(runs),
            "box": box,
            "empty": empty,
        }


async def _json_object(request: Request) -> dict:
    try:
        body = await request.json()
    except Exception:
        raise HTTPException(400, "body must be a JSON object") from None
    if not isinstance(body, dict):
        raise HTTPException(400, "body must be a JSON object")
    return body


def _image_bytes(body: dict) -> bytes:
    encoded = body.get("image")
    if not isinstance(encoded, str):
        raise HTTPException(400, "body needs a base64 'image' field")
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError):
        raise HTTPException(400, "'image' is not valid base64") from None
    try:
        png_dimensions(raw)
    except ImageDecodeError as exc:
        raise HTTPException(400, f"'image' does not decode: {exc}") from None
    return raw


def _point_list(body: dict) -> list[tuple[float, float]]:
    raw = body.get("points")
    if not isinstance(raw, list) or not raw:
        raise HTTPException(400, "body needs a non-empty 'points' list")
    points = []
    for item in raw:
        if (
            not isinstance(item, dict)
            or not isinstance(item.get("x"), (int, float))
            or not isinstance(item.get("y"), (int, float))
        ):
            raise HTTPException(400, f"malformed point: {item!r}")
        x, y = float(item["x"]), float(item["y"])
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise HTTPException(400, f"point ({x}, {y}) outside [0,1]")
        points.append((x, y))
    return points


def build_app(
    config: ShimConfig,
    grounder: GrounderAdapter | None = None,
    segmenter: SegmenterAdapter | None = None,
) -> FastAPI:
    """Wire the adapters for the configured mode and return the app.

    In real mode the caller passes adapters wrapping the actual models;
    endpoints whose adapter is missing reply 503.
    """
    if config.mode == "stub":
        grounder = StubGrounder(load_fixtures(config.fixture_path))
        segmenter = StubSegmenter(config.segment_side)

    app = FastAPI(title="model-shims", version=__version__)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "mode": config.mode, "version": __version__}

    @app.post("/ground")
    async def ground(request: Request):
        if grounder is None:
            raise HTTPException(503, "grounding model not loaded")
        body = await _json_object(request)
        image = _image_bytes(body)
        query = body.get("query")
        if not isinstance(query, str):
            raise HTTPException(400, "body needs a string 'query'")
        points = grounder.ground(image, query)
        return {"points": [{"x": x, "y": y} for x, y in points]}

    @app.post("/segment")
    async def segment(request: Request):
        if segmenter is None:
            raise HTTPException(503, "segmentation model not loaded")
        body = await _json_object(request)
        image = _image_bytes(body)
        points = _point_list(body)
        return segmenter.segment(image, points)

    return app
