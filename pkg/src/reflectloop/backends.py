"""Clients for the model services the engine delegates inference to.

Four capabilities, each behind a small duck-typed interface so tests can
substitute deterministic stand-ins (see mocks.py):

  * chat        -- multimodal chat completion, returns raw model text
  * grounder    -- phrase grounding, text query to image points
  * segmenter   -- point-prompted segmentation, points to a binary mask
  * judge       -- answer scoring and image/text consistency checks

HTTP implementations retry only transport-class failures (timeouts,
connection errors, 5xx). A malformed reply body is a contract violation
and is never retried: the service is up but speaking the wrong protocol.
"""

from __future__ import annotations

import base64
import threading
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence, runtime_checkable

import requests

from .render import MaskRLE, Point

DEFAULT_TIMEOUT_S = 60.0
DEFAULT_MAX_RETRIES = 2
DEFAULT_MAX_IN_FLIGHT = 4


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """The service could not be reached, even after retries."""

    def __init__(self, url: str, attempts: int, cause: str):
        super().__init__(f"{url} unreachable after {attempts} attempt(s): {cause}")
        self.url = url
        self.attempts = attempts


class ContractViolation(BackendError):
    """The service answered, but not in the agreed shape."""


class InvalidCoordinates(ContractViolation):
    """A reply carried points outside the unit square."""


# --- message envelope -------------------------------------------------------

@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    png: bytes


Part = TextPart | ImagePart


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user" | "assistant" | "tool"
    parts: tuple[Part, ...]

    @staticmethod
    def text(role: str, text: str) -> "ChatMessage":
        return ChatMessage(role=role, parts=(TextPart(text),))

    def text_content(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    def has_image(self) -> bool:
        return any(isinstance(p, ImagePart) for p in self.parts)

    def without_images(self) -> "ChatMessage":
        return ChatMessage(
            role=self.role,
            parts=tuple(p for p in self.parts if not isinstance(p, ImagePart)),
        )


@dataclass(frozen=True)
class JudgeScore:
    score: int
    rationale: str


@dataclass(frozen=True)
class ConsistencyVerdict:
    consistent: bool
    rationale: str


@dataclass(frozen=True)
class SegmentResult:
    mask: MaskRLE
    box: tuple[int, int, int, int]  # pixel x0, y0, x1, y1


# --- capability interfaces ---------------------------------------------------

@runtime_checkable
class ChatBackend(Protocol):
    def complete(self, messages: Sequence[ChatMessage]) -> str: ...


@runtime_checkable
class Grounder(Protocol):
    def ground(self, image_png: bytes, query: str) -> list[Point]: ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image_png: bytes, points: Sequence[Point]) -> SegmentResult: ...


@runtime_checkable
class Judge(Protocol):
    def score(
        self, question: str, candidate_answer: str, ground_truth: str
    ) -> JudgeScore: ...

    def consistency(self, image_png: bytes, reflection: str) -> ConsistencyVerdict: ...


@dataclass
class Backends:
    """One bundle of everything the engine and pipeline may call."""

    chat: ChatBackend
    grounder: Grounder
    segmenter: Segmenter
    judge: Judge
    teacher_chat: ChatBackend | None = None

    def teacher(self) -> ChatBackend:
        return self.teacher_chat if self.teacher_chat is not None else self.chat


@dataclass(frozen=True)
class BackendEndpoints:
    chat_url: str
    grounder_url: str
    segmenter_url: str
    judge_url: str
    model: str = "default"
    timeout_s: float = DEFAULT_TIMEOUT_S
    max_retries: int = DEFAULT_MAX_RETRIES
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT


# --- HTTP plumbing -----------------------------------------------------------

class _Limiter:
    """Caps concurrent in-flight requests across all clients of one bundle."""

    def __init__(self, size: int):
        self._sem = threading.BoundedSemaphore(max(1, size))

    def __enter__(self):
        self._sem.acquire()
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


def _b64(png: bytes) -> str:
    return base64.b64encode(png).decode("ascii")


class _HttpClient:
    def __init__(
        self,
        timeout_s: float,
        max_retries: int,
        limiter: _Limiter,
        session: requests.Session | None = None,
    ):
        self._timeout_s = timeout_s
        self._max_retries = max_retries
        self._limiter = limiter
        self._session = session or requests.Session()

    def post_json(self, url: str, payload: dict) -> dict:
        attempts = 0
        last = ""
        while attempts <= self._max_retries:
            attempts += 1
            try:
                with self._limiter:
                    resp = self._session.post(url, json=payload, timeout=self._timeout_s)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last = type(exc).__name__
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ContractViolation(f"{url} returned HTTP {resp.status_code}")
            try:
                body = resp.json()
            except ValueError as exc:
                raise ContractViolation(f"{url} reply is not JSON: {exc}") from exc
            if not isinstance(body, dict):
                raise ContractViolation(f"{url} reply is not a JSON object")
            return body
        raise TransportError(url, attempts, last)


def _require(body: dict, key: str, kind: type, url: str) -> Any:
    if key not in body:
        raise ContractViolation(f"{url} reply missing '{key}'")
    value = body[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ContractViolation(f"{url} reply field '{key}' is not a number")
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ContractViolation(f"{url} reply field '{key}' is not an int")
    if not isinstance(value, kind):
        raise ContractViolation(
            f"{url} reply field '{key}' is not {kind.__name__}"
        )
    return value


def _parse_points(raw: Any, url: str) -> list[Point]:
    if not isinstance(raw, list):
        raise ContractViolation(f"{url} reply field 'points' is not a list")
    points: list[Point] = []
    for item in raw:
        if not isinstance(item, dict):
            raise ContractViolation(f"{url} point entry is not an object")
        x = _require(item, "x", float, url)
        y = _require(item, "y", float, url)
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise InvalidCoordinates(f"{url} point ({x}, {y}) outside [0,1]")
        points.append(Point(x, y))
    return points


# --- HTTP capability clients -------------------------------------------------

class HttpChatBackend:
    def __init__(self, endpoints: BackendEndpoints, client: _HttpClient):
        self._url = endpoints.chat_url
        self._model = endpoints.model
        self._client = client

    def complete(self, messages: Sequence[ChatMessage]) -> str:
        wire = []
        for msg in messages:
            content = []
            for part in msg.parts:
                if isinstance(part, TextPart):
                    content.append({"type": "text", "text": part.text})
                else:
                    content.append({"type": "image", "data": _b64(part.png)})
            wire.append({"role": msg.role, "content": content})
        body = self._client.post_json(
            self._url, {"model": self._model, "messages": wire}
        )
        choices = _require(body, "choices", list, self._url)
        if not choices or not isinstance(choices[0], dict):
            raise ContractViolation(f"{self._url} reply has no usable choice")
        message = _require(choices[0], "message", dict, self._url)
        return _require(message, "content", str, self._url)


class HttpGrounder:
    def __init__(self, endpoints: BackendEndpoints, client: _HttpClient):
        self._url = endpoints.grounder_url.rstrip("/") + "/ground"
        self._client = client

    def ground(self, image_png: bytes, query: str) -> list[Point]:
        body = self._client.post_json(
            self._url, {"image": _b64(image_png), "query": query}
        )
        return _parse_points(body.get("points"), self._url)


class HttpSegmenter:
    def __init__(self, endpoints: BackendEndpoints, client: _HttpClient):
        self._url = endpoints.segmenter_url.rstrip("/") + "/segment"
        self._client = client

    def segment(self, image_png: bytes, points: Sequence[Point]) -> SegmentResult:
        body = self._client.post_json(
            self._url,
            {
                "image": _b64(image_png),
                "points": [{"x": p.x, "y": p.y} for p in points],
            },
        )
        width = _require(body, "width", int, self._url)
        height = _require(body, "height", int, self._url)
        runs = _require(body, "runs", list, self._url)
        if not all(isinstance(r, int) and not isinstance(r, bool) for r in runs):
            raise ContractViolation(f"{self._url} runs must be a list of ints")
        box_raw = _require(body, "box", dict, self._url)
        box = tuple(_require(box_raw, k, int, self._url) for k in ("x0", "y0", "x1", "y1"))
        mask = MaskRLE(width=width, height=height, runs=tuple(runs))
        if sum(mask.runs) != width * height:
            raise ContractViolation(
                f"{self._url} runs sum {sum(mask.runs)} != {width}x{height}"
            )
        return SegmentResult(mask=mask, box=box)  # type: ignore[arg-type]


class HttpJudge:
    def __init__(self, endpoints: BackendEndpoints, client: _HttpClient):
        base = endpoints.judge_url.rstrip("/")
        self._score_url = base + "/score"
        self._consistency_url = base + "/consistency"
        self._client = client

    def score(
        self, question: str, candidate_answer: str, ground_truth: str
    ) -> JudgeScore:
        body = self._client.post_json(
            self._score_url,
            {
                "question": question,
                "candidate_answer": candidate_answer,
                "ground_truth": ground_truth,
            },
        )
        score = _require(body, "score", int, self._score_url)
        if not 0 <= score <= 10:
            raise ContractViolation(
                f"{self._score_url} score {score} outside 0..10"
            )
        rationale = _require(body, "rationale", str, self._score_url)
        return JudgeScore(score=score, rationale=rationale)

    def consistency(self, image_png: bytes, reflection: str) -> ConsistencyVerdict:
        body = self._client.post_json(
            self._consistency_url,
            {"image": _b64(image_png), "reflection": reflection},
        )
        consistent = _require(body, "consistent", bool, self._consistency_url)
        rationale = _require(body, "rationale", str, self._consistency_url)
        return ConsistencyVerdict(consistent=consistent, rationale=rationale)


def http_backends(
    endpoints: BackendEndpoints, session: requests.Session | None = None
) -> Backends:
    """Wire up one HTTP client bundle sharing a session and in-flight cap."""
    limiter = _Limiter(endpoints.max_in_flight)
    client = _HttpClient(
        timeout_s=endpoints.timeout_s,
        max_retries=endpoints.max_retries,
        limiter=limiter,
        session=session,
    )
    return Backends(
        chat=HttpChatBackend(endpoints, client),
        grounder=HttpGrounder(endpoints, client),
        segmenter=HttpSegmenter(endpoints, client),
        judge=HttpJudge(endpoints, client),
    )
