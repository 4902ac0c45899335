"""Conformance checks for backend implementations.

Any object claiming to implement a backend capability can be driven
through these; they assert the full behavioral contract (types, ranges,
dimensional consistency, determinism) and raise AssertionError with a
pointed message on the first deviation. The bundled mocks, the HTTP
clients, and any external service fronted by those clients are all
expected to pass identically.
"""

from __future__ import annotations

import math
from typing import Sequence

import requests

from .pngio import png_dimensions
from .render import Point, mask_is_empty, rle_decode


def check_grounder(
    grounder,
    image_png: bytes,
    known_anchor: str,
    expected_points: Sequence[tuple[float, float]] | None = None,
    unknown_anchor: str = "zzz nothing by this name",
) -> None:
    """Grounding returns in-range points for known anchors, [] for unknown."""
    points = grounder.ground(image_png, known_anchor)
    assert isinstance(points, list), f"ground() must return a list, got {type(points)}"
    for p in points:
        assert isinstance(p, Point), f"ground() must return Points, got {type(p)}"
        assert 0.0 <= p.x <= 1.0 and 0.0 <= p.y <= 1.0, f"point {p} outside [0,1]"
        assert math.isfinite(p.x) and math.isfinite(p.y), f"point {p} not finite"
    if expected_points is not None:
        got = [(p.x, p.y) for p in points]
        assert len(got) == len(expected_points), (
            f"expected {len(expected_points)} point(s), got {len(got)}"
        )
        for g, e in zip(got, expected_points):
            assert abs(g[0] - e[0]) < 1e-9 and abs(g[1] - e[1]) < 1e-9, (
                f"expected point {e}, got {g}"
            )
    repeat = grounder.ground(image_png, known_anchor)
    assert repeat == points, "ground() must be deterministic per request"

    empty = grounder.ground(image_png, unknown_anchor)
    assert empty == [], f"unknown anchor must ground to [], got {empty}"


def check_segmenter(segmenter, image_png: bytes, points: Sequence[Point]) -> None:
    """Segmentation masks match the image dimensions and decode cleanly."""
    width, height = png_dimensions(image_png)
    result = segmenter.segment(image_png, points)
    mask = result.mask
    assert (mask.width, mask.height) == (width, height), (
        f"mask is {mask.width}x{mask.height}, image is {width}x{height}"
    )
    bitmap = rle_decode(mask)  # raises RunSumMismatch if runs are inconsistent
    assert bitmap.shape == (height, width)
    x0, y0, x1, y1 = result.box
    assert 0 <= x0 <= x1 < width and 0 <= y0 <= y1 < height, (
        f"box {result.box} out of bounds for {width}x{height}"
    )
    if not mask_is_empty(mask):
        ys, xs = bitmap.nonzero()
        assert x0 <= xs.min() and xs.max() <= x1, "box must cover the mask columns"
        assert y0 <= ys.min() and ys.max() <= y1, "box must cover the mask rows"
    repeat = segmenter.segment(image_png, points)
    assert repeat.mask == mask and repeat.box == result.box, (
        "segment() must be deterministic per request"
    )


def check_health(base_url: str, timeout_s: float = 5.0) -> None:
    """GET /healthz answers 200 with a JSON status document."""
    resp = requests.get(base_url.rstrip("/") + "/healthz", timeout=timeout_s)
    assert resp.status_code == 200, f"/healthz returned HTTP {resp.status_code}"
    body = resp.json()
    assert isinstance(body, dict) and body.get("status") == "ok", (
        f"/healthz body must report status ok, got {body!r}"
    )
