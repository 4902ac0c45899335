"""Marker rendering: the visual update that turns a tool call into a new image.

Markers (discs, circles, ellipses, boxes, mask overlays) are composed onto
the original image to produce the next round's visual context. Rasterization
is integer/exact arithmetic on numpy arrays with no anti-aliasing, so
identical inputs produce byte-identical pixels everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pngio import ZeroSizeImage
from .protocol import Color, Shape, ToolCall

COLOR_RGB: dict[Color, tuple[int, int, int]] = {
    Color.RED: (255, 0, 0),
    Color.GREEN: (0, 200, 0),
    Color.BLUE: (0, 0, 255),
    Color.YELLOW: (255, 255, 0),
    Color.CYAN: (0, 255, 255),
    Color.MAGENTA: (255, 0, 255),
    Color.PURPLE: (160, 32, 240),
    Color.ORANGE: (255, 165, 0),
}

_RGB_COLOR = {rgb: color for color, rgb in COLOR_RGB.items()}


class RenderError(ValueError):
    pass


class GeometryOutOfBounds(RenderError):
    def __init__(self, marker_index: int, detail: str):
        super().__init__(f"marker {marker_index}: {detail}")
        self.marker_index = marker_index


class NoEvidence(RenderError):
    pass


class ShapeMaskMismatch(RenderError):
    pass


class RunSumMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Point:
    """Position as fractions of width/height, origin top-left."""

    x: float
    y: float


@dataclass(frozen=True)
class MaskRLE:
    """Row-major run-length encoded binary mask; first run counts zeros."""

    width: int
    height: int
    runs: tuple[int, ...]


@dataclass(frozen=True)
class PointGeom:
    center: Point
    radius_px: int


@dataclass(frozen=True)
class CircleGeom:
    center: Point
    radius_px: int


@dataclass(frozen=True)
class EllipseGeom:
    center: Point
    semi_x_px: int
    semi_y_px: int
    rotation_rad: float = 0.0


@dataclass(frozen=True)
class BoxGeom:
    corner_a: Point
    corner_b: Point


@dataclass(frozen=True)
class MaskGeom:
    mask: MaskRLE


Geometry = PointGeom | CircleGeom | EllipseGeom | BoxGeom | MaskGeom


@dataclass(frozen=True)
class Marker:
    shape: Shape
    color: tuple[int, int, int, int]  # RGBA; alpha used for mask fill
    geometry: Geometry
    anchor_text: str = ""
    round_index: int = 0


@dataclass(frozen=True)
class VisualContext:
    """The image a given round reasons over: base plus rendered markers."""

    base_image: np.ndarray
    markers: tuple[Marker, ...]
    rendered: np.ndarray
    round_index: int


@dataclass(frozen=True)
class RenderStyle:
    """Rasterization constants. ``None`` widths fall back to the size rule."""

    stroke_width: int | None = None
    mask_fill_alpha: int = 128


DEFAULT_STYLE = RenderStyle()


def default_marker_px(width: int, height: int) -> int:
    """Default point radius and stroke width: max(3 px, 1% of min dimension)."""
    return max(3, min(width, height) // 100)


def color_rgba(color: Color, alpha: int = 255) -> tuple[int, int, int, int]:
    r, g, b = COLOR_RGB[color]
    return (r, g, b, alpha)


def color_name(rgba: Sequence[int]) -> str:
    """Reverse-map an RGBA to its palette name; raises on unknown colors."""
    rgb = tuple(int(c) for c in rgba[:3])
    try:
        return _RGB_COLOR[rgb].value
    except KeyError:
        raise ValueError(f"color {rgb} is not in the marker palette") from None


# --- RLE codec -------------------------------------------------------------

def rle_encode(bitmap: np.ndarray) -> MaskRLE:
    """Encode a 2-D boolean raster; the first run counts zeros (possibly 0)."""
    if bitmap.ndim != 2 or bitmap.size == 0:
        raise ValueError("bitmap must be a non-empty 2-D array")
    flat = np.asarray(bitmap, dtype=bool).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    runs = (ends - starts).tolist()
    if flat[0]:
        runs = [0] + runs
    return MaskRLE(width=bitmap.shape[1], height=bitmap.shape[0], runs=tuple(runs))


def rle_decode(mask: MaskRLE) -> np.ndarray:
    """Decode to a 2-D boolean raster; run total must match the dimensions."""
    if mask.width <= 0 or mask.height <= 0:
        raise RunSumMismatch(f"invalid dimensions {mask.width}x{mask.height}")
    if any(r < 0 for r in mask.runs):
        raise RunSumMismatch("negative run length")
    total = sum(mask.runs)
    if total != mask.width * mask.height:
        raise RunSumMismatch(
            f"runs sum to {total}, expected {mask.width * mask.height}"
        )
    values = np.arange(len(mask.runs)) % 2 == 1
    flat = np.repeat(values, np.asarray(mask.runs, dtype=np.int64))
    return flat.reshape(mask.height, mask.width)


def mask_is_empty(mask: MaskRLE) -> bool:
    return all(r == 0 for r in mask.runs[1::2])


def mask_bbox(mask: MaskRLE) -> tuple[int, int, int, int]:
    """Tight pixel bounding box (x0, y0, x1, y1), inclusive."""
    bitmap = rle_decode(mask)
    ys, xs = np.nonzero(bitmap)
    if ys.size == 0:
        raise ValueError("mask has no set pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


# --- rasterization ---------------------------------------------------------

def _px(frac: float, size: int) -> int:
    return min(int(frac * size), size - 1)


def _frac(px: int, size: int) -> float:
    return (px + 0.5) / size


def _check_unit(value: float, index: int, what: str) -> None:
    if not (0.0 <= value <= 1.0) or not math.isfinite(value):
        raise GeometryOutOfBounds(index, f"{what}={value} outside [0,1]")


def _validate_marker(marker: Marker, index: int, width: int, height: int) -> None:
    geom = marker.geometry
    if isinstance(geom, (PointGeom, CircleGeom)):
        _check_unit(geom.center.x, index, "center.x")
        _check_unit(geom.center.y, index, "center.y")
        if geom.radius_px <= 0:
            raise GeometryOutOfBounds(index, "radius_px must be > 0")
    elif isinstance(geom, EllipseGeom):
        _check_unit(geom.center.x, index, "center.x")
        _check_unit(geom.center.y, index, "center.y")
        if geom.semi_x_px <= 0 or geom.semi_y_px <= 0:
            raise GeometryOutOfBounds(index, "semi-axes must be > 0")
    elif isinstance(geom, BoxGeom):
        for corner in (geom.corner_a, geom.corner_b):
            _check_unit(corner.x, index, "corner.x")
            _check_unit(corner.y, index, "corner.y")
    elif isinstance(geom, MaskGeom):
        if (geom.mask.width, geom.mask.height) != (width, height):
            raise GeometryOutOfBounds(
                index,
                f"mask is {geom.mask.width}x{geom.mask.height}, "
                f"image is {width}x{height}",
            )


def _disc_mask(height: int, width: int, cx: int, cy: int, radius: int) -> np.ndarray:
    ys, xs = np.ogrid[:height, :width]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return d2 <= radius * radius


def _ring_mask(
    height: int, width: int, cx: int, cy: int, radius: int, stroke: int
) -> np.ndarray:
    ys, xs = np.ogrid[:height, :width]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    outer = radius + stroke // 2
    inner = max(radius - stroke // 2, 0)
    return (d2 <= outer * outer) & (d2 >= inner * inner)


def _ellipse_mask(
    height: int,
    width: int,
    cx: int,
    cy: int,
    semi_x: float,
    semi_y: float,
    rotation: float,
) -> np.ndarray:
    if semi_x <= 0 or semi_y <= 0:
        return np.zeros((height, width), dtype=bool)
    ys, xs = np.ogrid[:height, :width]
    dx = xs - cx
    dy = ys - cy
    # libm trig differs across platforms in the last ulp; quantizing keeps
    # the boundary comparison (and therefore golden hashes) byte-stable.
    cos_t = round(math.cos(rotation), 12)
    sin_t = round(math.sin(rotation), 12)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (u / semi_x) ** 2 + (v / semi_y) ** 2 <= 1.0


def _erode4(bitmap: np.ndarray) -> np.ndarray:
    padded = np.pad(bitmap, 1, mode="constant", constant_values=False)
    return (
        bitmap
        & padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )


def _dilate4(bitmap: np.ndarray, iterations: int) -> np.ndarray:
    out = bitmap
    for _ in range(iterations):
        padded = np.pad(out, 1, mode="constant", constant_values=False)
        out = (
            out
            | padded[:-2, 1:-1]
            | padded[2:, 1:-1]
            | padded[1:-1, :-2]
            | padded[1:-1, 2:]
        )
    return out


def _marker_footprint(
    marker: Marker, width: int, height: int, stroke: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Return (solid-color pixels, alpha-blended fill pixels or None)."""
    geom = marker.geometry
    if isinstance(geom, PointGeom):
        cx, cy = _px(geom.center.x, width), _px(geom.center.y, height)
        return _disc_mask(height, width, cx, cy, geom.radius_px), None
    if isinstance(geom, CircleGeom):
        cx, cy = _px(geom.center.x, width), _px(geom.center.y, height)
        return _ring_mask(height, width, cx, cy, geom.radius_px, stroke), None
    if isinstance(geom, EllipseGeom):
        cx, cy = _px(geom.center.x, width), _px(geom.center.y, height)
        half = stroke / 2.0
        outer = _ellipse_mask(
            height, width, cx, cy,
            geom.semi_x_px + half, geom.semi_y_px + half, geom.rotation_rad,
        )
        inner = _ellipse_mask(
            height, width, cx, cy,
            geom.semi_x_px - half, geom.semi_y_px - half, geom.rotation_rad,
        )
        return outer & ~inner, None
    if isinstance(geom, BoxGeom):
        x0 = _px(min(geom.corner_a.x, geom.corner_b.x), width)
        x1 = _px(max(geom.corner_a.x, geom.corner_b.x), width)
        y0 = _px(min(geom.corner_a.y, geom.corner_b.y), height)
        y1 = _px(max(geom.corner_a.y, geom.corner_b.y), height)
        outer = np.zeros((height, width), dtype=bool)
        outer[y0 : y1 + 1, x0 : x1 + 1] = True
        inner = np.zeros((height, width), dtype=bool)
        iy0, iy1 = y0 + stroke, y1 - stroke
        ix0, ix1 = x0 + stroke, x1 - stroke
        if iy0 <= iy1 and ix0 <= ix1:
            inner[iy0 : iy1 + 1, ix0 : ix1 + 1] = True
        return outer & ~inner, None
    if isinstance(geom, MaskGeom):
        bitmap = rle_decode(geom.mask)
        contour = bitmap & ~_erode4(bitmap)
        if stroke > 1:
            contour = _dilate4(contour, stroke // 2)
        return contour, bitmap & ~contour
    raise RenderError(f"unsupported geometry {type(geom).__name__}")


def render_markers(
    base: np.ndarray,
    markers: Sequence[Marker],
    style: RenderStyle = DEFAULT_STYLE,
) -> np.ndarray:
    """Draw markers over a copy of ``base`` in list order, later over earlier.

    Points are filled discs, circles/ellipses stroked outlines, boxes
    stroked rectangles, masks an alpha-blended fill plus a solid contour.
    Output dimensions always equal input dimensions.
    """
    if base.ndim != 3 or base.shape[2] != 3 or base.dtype != np.uint8:
        raise RenderError(f"base must be HxWx3 uint8, got {base.shape} {base.dtype}")
    height, width = base.shape[:2]
    if height == 0 or width == 0:
        raise ZeroSizeImage("base image has zero size")

    for i, marker in enumerate(markers):
        _validate_marker(marker, i, width, height)

    stroke = style.stroke_width or default_marker_px(width, height)
    out = base.copy()
    for marker in markers:
        solid, fill = _marker_footprint(marker, width, height, stroke)
        rgb = np.asarray(marker.color[:3], dtype=np.uint8)
        if fill is not None and fill.any():
            alpha = style.mask_fill_alpha
            blended = (
                rgb.astype(np.uint16) * alpha
                + out[fill].astype(np.uint16) * (255 - alpha)
                + 127
            ) // 255
            out[fill] = blended.astype(np.uint8)
        if solid.any():
            out[solid] = rgb
    return out


# --- composition -----------------------------------------------------------

def _fit_markers(
    call: ToolCall,
    points: Sequence[Point],
    mask: MaskRLE | None,
    width: int,
    height: int,
    round_index: int,
) -> list[Marker]:
    """Build markers for one tool call from grounded evidence.

    Fitting rules: point markers become one disc per point; circles and
    ellipses wrap the mask bounding box when a mask exists, otherwise a
    fixed radius around each point; boxes take the mask bounding box or the
    tight box around the points; mask markers need the mask itself.
    """
    rgba = color_rgba(call.color)
    base_px = default_marker_px(width, height)
    markers: list[Marker] = []

    if call.shape is Shape.MASK:
        if mask is None:
            raise ShapeMaskMismatch("shape=mask requires a segmentation mask")
        return [
            Marker(Shape.MASK, rgba, MaskGeom(mask), call.anchor, round_index)
        ]

    if mask is not None and call.shape in (Shape.CIRCLE, Shape.ELLIPSE, Shape.BOX):
        x0, y0, x1, y1 = mask_bbox(mask)
        cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
        center = Point(_frac(cx, width), _frac(cy, height))
        bw, bh = x1 - x0 + 1, y1 - y0 + 1
        if call.shape is Shape.CIRCLE:
            radius = max(math.ceil(math.hypot(bw, bh) / 2), base_px)
            geometry: Geometry = CircleGeom(center, radius)
        elif call.shape is Shape.ELLIPSE:
            geometry = EllipseGeom(center, max((bw + 1) // 2, 1), max((bh + 1) // 2, 1))
        else:
            geometry = BoxGeom(
                Point(_frac(x0, width), _frac(y0, height)),
                Point(_frac(x1, width), _frac(y1, height)),
            )
        return [Marker(call.shape, rgba, geometry, call.anchor, round_index)]

    if not points:
        raise NoEvidence("no points and no mask to mark")

    if call.shape is Shape.POINT:
        for p in points:
            markers.append(
                Marker(Shape.POINT, rgba, PointGeom(p, base_px), call.anchor, round_index)
            )
    elif call.shape is Shape.CIRCLE:
        for p in points:
            markers.append(
                Marker(
                    Shape.CIRCLE, rgba, CircleGeom(p, 4 * base_px), call.anchor, round_index
                )
            )
    elif call.shape is Shape.ELLIPSE:
        for p in points:
            markers.append(
                Marker(
                    Shape.ELLIPSE,
                    rgba,
                    EllipseGeom(p, 4 * base_px, 4 * base_px),
                    call.anchor,
                    round_index,
                )
            )
    else:  # box around the point set
        xs = [p.x for p in points]
        ys = [p.y for p in points]
        markers.append(
            Marker(
                Shape.BOX,
                rgba,
                BoxGeom(Point(min(xs), min(ys)), Point(max(xs), max(ys))),
                call.anchor,
                round_index,
            )
        )
    return markers


def compose_visual_context(
    base: np.ndarray,
    call: ToolCall,
    points: Sequence[Point],
    mask: MaskRLE | None,
    round_index: int,
    mode: str = "fresh",
    prior_markers: Sequence[Marker] = (),
) -> VisualContext:
    """Render the visual context for the round after ``call`` was grounded.

    ``fresh`` renders only this round's markers onto the original image;
    ``cumulative`` stacks them over every earlier round's markers.
    """
    if not call.flag:
        raise RenderError("compose requires a verification request (flag=true)")
    if mode not in ("fresh", "cumulative"):
        raise RenderError(f"unknown overlay mode: {mode}")
    if not points and mask is None:
        raise NoEvidence("no points and no mask to mark")

    height, width = base.shape[:2]
    new_markers = _fit_markers(call, points, mask, width, height, round_index)
    if mode == "cumulative":
        markers = tuple(prior_markers) + tuple(new_markers)
    else:
        markers = tuple(new_markers)
    rendered = render_markers(base, markers)
    return VisualContext(
        base_image=base,
        markers=markers,
        rendered=rendered,
        round_index=round_index,
    )


def bare_context(base: np.ndarray) -> VisualContext:
    """Round-zero context: no markers, rendered image is the base itself."""
    return VisualContext(base_image=base, markers=(), rendered=base, round_index=0)


# --- dict forms (trajectory documents, pipeline intermediates) ---------------

def geometry_to_dict(geometry: Geometry) -> dict:
    if isinstance(geometry, PointGeom):
        return {
            "type": "point",
            "center": [geometry.center.x, geometry.center.y],
            "radius_px": geometry.radius_px,
        }
    if isinstance(geometry, CircleGeom):
        return {
            "type": "circle",
            "center": [geometry.center.x, geometry.center.y],
            "radius_px": geometry.radius_px,
        }
    if isinstance(geometry, EllipseGeom):
        return {
            "type": "ellipse",
            "center": [geometry.center.x, geometry.center.y],
            "semi_x_px": geometry.semi_x_px,
            "semi_y_px": geometry.semi_y_px,
            "rotation_rad": geometry.rotation_rad,
        }
    if isinstance(geometry, BoxGeom):
        return {
            "type": "box",
            "corner_a": [geometry.corner_a.x, geometry.corner_a.y],
            "corner_b": [geometry.corner_b.x, geometry.corner_b.y],
        }
    if isinstance(geometry, MaskGeom):
        return {
            "type": "mask",
            "width": geometry.mask.width,
            "height": geometry.mask.height,
            "runs": list(geometry.mask.runs),
        }
    raise ValueError(f"unsupported geometry {type(geometry).__name__}")


def geometry_from_dict(d: dict) -> Geometry:
    kind = d.get("type")
    if kind == "point":
        return PointGeom(Point(*d["center"]), int(d["radius_px"]))
    if kind == "circle":
        return CircleGeom(Point(*d["center"]), int(d["radius_px"]))
    if kind == "ellipse":
        return EllipseGeom(
            Point(*d["center"]),
            int(d["semi_x_px"]),
            int(d["semi_y_px"]),
            float(d.get("rotation_rad", 0.0)),
        )
    if kind == "box":
        return BoxGeom(Point(*d["corner_a"]), Point(*d["corner_b"]))
    if kind == "mask":
        return MaskGeom(
            MaskRLE(int(d["width"]), int(d["height"]), tuple(int(r) for r in d["runs"]))
        )
    raise ValueError(f"unknown geometry type: {kind!r}")


def marker_to_dict(marker: Marker) -> dict:
    return {
        "shape": marker.shape.value,
        "color": list(marker.color),
        "anchor": marker.anchor_text,
        "round_index": marker.round_index,
        "geometry": geometry_to_dict(marker.geometry),
    }


def marker_from_dict(d: dict) -> Marker:
    color = tuple(int(c) for c in d["color"])
    if len(color) != 4:
        raise ValueError("marker color must be RGBA")
    return Marker(
        shape=Shape(d["shape"]),
        color=color,  # type: ignore[arg-type]
        geometry=geometry_from_dict(d["geometry"]),
        anchor_text=str(d.get("anchor", "")),
        round_index=int(d.get("round_index", 0)),
    )
