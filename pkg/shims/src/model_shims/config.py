"""Shim configuration and fixture loading.

Stub mode answers from a fixture file and needs no model assets; real
mode names the models to wrap and leaves the fixture slot empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


class ShimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ShimConfig:
    mode: str = "stub"
    fixture_path: str | None = None
    grounder_model: str | None = None
    segmenter_model: str | None = None
    bind: str = "127.0.0.1:9100"
    segment_side: int = 4

    def __post_init__(self):
        if self.mode not in ("stub", "real"):
            raise ShimConfigError(f"mode must be 'stub' or 'real', got {self.mode!r}")
        if self.mode == "stub" and (self.grounder_model or self.segmenter_model):
            raise ShimConfigError("stub mode must not name model assets")
        if self.mode == "real" and self.fixture_path is not None:
            raise ShimConfigError("real mode does not read fixtures")
        if self.segment_side < 0:
            raise ShimConfigError("segment_side must be >= 0")
        host, _, port = self.bind.rpartition(":")
        if not host or not port.isdigit():
            raise ShimConfigError(f"bind must be HOST:PORT, got {self.bind!r}")


def load_fixtures(path: str | None) -> dict[str, list[tuple[float, float]]]:
    """JSON mapping of anchor text to [x, y] fraction pairs."""
    if path is None:
        return {}
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ShimConfigError("fixture file must be a JSON object")
    fixtures: dict[str, list[tuple[float, float]]] = {}
    for anchor, pairs in raw.items():
        if not isinstance(pairs, list):
            raise ShimConfigError(f"fixture {anchor!r} must map to a list of pairs")
        parsed = []
        for pair in pairs:
            if (
                not isinstance(pair, list)
                or len(pair) != 2
                or not all(isinstance(v, (int, float)) for v in pair)
            ):
                raise ShimConfigError(f"fixture {anchor!r} has a malformed pair: {pair!r}")
            x, y = float(pair[0]), float(pair[1])
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ShimConfigError(
                    f"fixture {anchor!r} point ({x}, {y}) outside [0,1]"
                )
            parsed.append((x, y))
        fixtures[str(anchor)] = parsed
    return fixtures
