"""Deterministic in-process stand-ins for the model services.

Every algorithm in this package is exercised in tests through these:
a scripted chat backend that replays canned replies, a grounder backed by
a query fixture table, a segmenter that stamps a fixed square, and a judge
driven by a score queue. None of them touch the network.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

from .backends import (
    BackendError,
    Backends,
    ChatMessage,
    ConsistencyVerdict,
    JudgeScore,
    SegmentResult,
)
from .render import MaskRLE, Point, rle_encode
import numpy as np


class ScriptExhausted(BackendError):
    """A scripted backend was asked for more replies than it was given."""


class ScriptedChatBackend:
    """Replays a fixed list of raw model texts, recording every request."""

    def __init__(self, script: Sequence[str]):
        self._script = list(script)
        self._cursor = 0
        self.calls: list[tuple[ChatMessage, ...]] = []

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        self.calls.append(tuple(messages))
        if self._cursor >= len(self._script):
            raise ScriptExhausted(
                f"chat script exhausted after {len(self._script)} replies"
            )
        reply = self._script[self._cursor]
        self._cursor += 1
        return reply

    @property
    def remaining(self) -> int:
        return len(self._script) - self._cursor


class FixtureGrounder:
    """Maps anchor queries to fixed point lists; unknown queries ground empty."""

    def __init__(self, fixtures: dict[str, Sequence[Point]] | None = None):
        self._fixtures = {k: list(v) for k, v in (fixtures or {}).items()}
        self.queries: list[str] = []

    def ground(self, image_png: bytes, query: str) -> list[Point]:
        self.queries.append(query)
        return list(self._fixtures.get(query, []))


class StubSegmenter:
    """Stamps a ``side`` x ``side`` square of ones at the first prompt point."""

    def __init__(self, side: int = 2, width: int = 100, height: int = 100):
        self.side = side
        self.width = width
        self.height = height
        self.calls: list[list[Point]] = []

    def segment(self, image_png: bytes, points: Sequence[Point]) -> SegmentResult:
        self.calls.append(list(points))
        bitmap = np.zeros((self.height, self.width), dtype=bool)
        if points:
            px = min(int(points[0].x * self.width), self.width - 1)
            py = min(int(points[0].y * self.height), self.height - 1)
            x1 = min(px + self.side, self.width)
            y1 = min(py + self.side, self.height)
            bitmap[py:y1, px:x1] = True
            box = (px, py, x1 - 1, y1 - 1)
        else:
            box = (0, 0, 0, 0)
        return SegmentResult(mask=rle_encode(bitmap), box=box)


def _image_key(image_png: bytes) -> str:
    return hashlib.sha256(image_png).hexdigest()[:16]


@dataclass
class StubJudge:
    """Deterministic scorer.

    ``score_script`` replies are consumed in order; once empty, exact match
    of candidate and ground truth scores 10, anything else 2. Consistency
    verdicts come from ``consistency_fixtures`` keyed on a short image hash
    plus reflection text; unkeyed reflections are consistent unless they
    contain one of ``inconsistent_substrings``.
    """

    score_script: list[int] = field(default_factory=list)
    consistency_fixtures: dict[tuple[str, str], bool] = field(default_factory=dict)
    inconsistent_substrings: list[str] = field(default_factory=list)
    score_calls: list[tuple[str, str, str]] = field(default_factory=list)
    consistency_calls: list[tuple[str, str]] = field(default_factory=list)

    def score(self, question: str, candidate_answer: str, ground_truth: str) -> JudgeScore:
        self.score_calls.append((question, candidate_answer, ground_truth))
        if self.score_script:
            value = self.score_script.pop(0)
        else:
            value = 10 if candidate_answer.strip() == ground_truth.strip() else 2
        return JudgeScore(score=value, rationale=f"scored {value}/10")

    def consistency(self, image_png: bytes, reflection: str) -> ConsistencyVerdict:
        key = (_image_key(image_png), reflection)
        self.consistency_calls.append(key)
        default = not any(s in reflection for s in self.inconsistent_substrings)
        verdict = self.consistency_fixtures.get(key, default)
        rationale = "reflection matches image" if verdict else "reflection contradicts image"
        return ConsistencyVerdict(consistent=verdict, rationale=rationale)


def mock_backends(
    chat_script: Sequence[str] = (),
    grounder_fixtures: dict[str, Sequence[Point]] | None = None,
    judge: StubJudge | None = None,
    teacher_script: Sequence[str] | None = None,
    segmenter: StubSegmenter | None = None,
) -> Backends:
    """Bundle the mocks the way http_backends bundles the real clients."""
    return Backends(
        chat=ScriptedChatBackend(chat_script),
        grounder=FixtureGrounder(grounder_fixtures),
        segmenter=segmenter if segmenter is not None else StubSegmenter(),
        judge=judge if judge is not None else StubJudge(),
        teacher_chat=ScriptedChatBackend(teacher_script) if teacher_script is not None else None,
    )
