"""Structured model-output grammar: answer text, reflection block, tool call.

A well-formed generation looks like

    It is 3. <reflection>Count again.</reflection> <tool_call>{"name":
    "Visual Prompt Generator","flag":true,"anchor":"green cylinder",
    "args":{"color":"blue","shape":"circle"}}</tool_call>

with at most one reflection block and at most one tool-call block. Parsing
is strict: anything off-grammar raises a typed :class:`ProtocolError`
subclass instead of being silently repaired, and the loop engine decides
what to do about it.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

TOOL_NAME = "Visual Prompt Generator"

REFLECTION_OPEN = "<reflection>"
REFLECTION_CLOSE = "</reflection>"
TOOL_CALL_OPEN = "<tool_call>"
TOOL_CALL_CLOSE = "</tool_call>"

# Verbatim generation from a chat backend, before any parsing.
RawModelText = str


class Color(enum.Enum):
    RED = "red"
    GREEN = "green"
    BLUE = "blue"
    YELLOW = "yellow"
    CYAN = "cyan"
    MAGENTA = "magenta"
    PURPLE = "purple"
    ORANGE = "orange"


class Shape(enum.Enum):
    POINT = "point"
    CIRCLE = "circle"
    ELLIPSE = "ellipse"
    BOX = "box"
    MASK = "mask"


class ProtocolError(ValueError):
    """Base class for every grammar violation this module reports."""


class EmptyAnswer(ProtocolError):
    """All text was consumed by blocks; no answer remains."""


class UnclosedBlock(ProtocolError):
    def __init__(self, tag: str, offset: int):
        super().__init__(f"opening <{tag}> at byte {offset} has no closing tag")
        self.tag = tag
        self.offset = offset


class MalformedToolCall(ProtocolError):
    """A tool-call block exists but cannot be parsed.

    ``offset`` is the UTF-8 byte offset of the offending block in the raw
    text; ``reason`` is a short machine-readable explanation.
    """

    def __init__(self, reason: str, offset: int = 0):
        super().__init__(f"malformed tool call at byte {offset}: {reason}")
        self.reason = reason
        self.offset = offset


class DuplicateBlock(MalformedToolCall):
    """More than one block of the same kind; ambiguity must be loud."""

    def __init__(self, tag: str, offset: int):
        super().__init__(f"duplicate <{tag}> block", offset)
        self.tag = tag


class ToolCallParseError(ProtocolError):
    """Base for errors raised while parsing a tool-call body."""


class NotAnObject(ToolCallParseError):
    pass


class MissingField(ToolCallParseError):
    def __init__(self, field_name: str):
        super().__init__(f"missing field: {field_name}")
        self.field = field_name


class UnexpectedField(ToolCallParseError):
    def __init__(self, field_name: str):
        super().__init__(f"unexpected field: {field_name}")
        self.field = field_name


class UnknownEnumValue(ToolCallParseError):
    def __init__(self, field_name: str, value: object):
        super().__init__(f"unknown value for {field_name}: {value!r}")
        self.field = field_name
        self.value = value


class InvariantViolation(ProtocolError):
    pass


@dataclass(frozen=True)
class ToolCall:
    """One verification request: ground ``anchor``, mark it ``color``/``shape``.

    ``flag`` is the continue/stop bit: true asks for a region check, false
    declares the current answer validated (anchor may then be empty).
    """

    flag: bool
    anchor: str
    color: Color
    shape: Shape
    name: str = TOOL_NAME

    def __post_init__(self):
        if self.name != TOOL_NAME:
            raise UnknownEnumValue("name", self.name)
        if not isinstance(self.flag, bool):
            raise UnknownEnumValue("flag", self.flag)
        if not isinstance(self.color, Color):
            raise UnknownEnumValue("color", self.color)
        if not isinstance(self.shape, Shape):
            raise UnknownEnumValue("shape", self.shape)
        if not isinstance(self.anchor, str):
            raise UnknownEnumValue("anchor", self.anchor)
        if self.flag and not self.anchor.strip():
            raise InvariantViolation("flag=true requires a non-empty anchor")


@dataclass(frozen=True)
class TurnOutput:
    """One parsed turn: answer, reflection (may be empty), optional tool call."""

    answer: str
    reflection: str
    tool_call: ToolCall | None
    round_index: int

    def __post_init__(self):
        if not isinstance(self.reflection, str):
            raise InvariantViolation("reflection must be a string (may be empty)")
        if not self.answer.strip():
            raise EmptyAnswer("answer must be non-empty")
        if self.round_index < 1:
            raise InvariantViolation("round_index must be >= 1")
        if self.tool_call is not None and not self.reflection.strip():
            raise InvariantViolation(
                "a tool call must be motivated by a non-empty reflection"
            )


@dataclass(frozen=True)
class _Block:
    body: str
    start: int  # char offset of the opening tag
    end: int    # char offset just past the closing tag


def _byte_offset(text: str, char_index: int) -> int:
    # surrogatepass: lone surrogates (from lossy byte decoding) must not
    # turn a diagnostic offset into a UnicodeEncodeError
    return len(text[:char_index].encode("utf-8", "surrogatepass"))


def _extract_block(text: str, open_tag: str, close_tag: str) -> _Block | None:
    """Extract the single block delimited by the given tags, if present."""
    start = text.find(open_tag)
    if start == -1:
        return None
    second = text.find(open_tag, start + len(open_tag))
    if second != -1:
        raise DuplicateBlock(open_tag.strip("<>"), _byte_offset(text, second))
    body_start = start + len(open_tag)
    close = text.find(close_tag, body_start)
    if close == -1:
        raise UnclosedBlock(open_tag.strip("<>"), _byte_offset(text, start))
    return _Block(text[body_start:close], start, close + len(close_tag))


def parse_tool_call(block_body: str) -> ToolCall:
    """Parse the text between tool-call tags into a validated ToolCall.

    The body must be a single JSON object with exactly the keys
    ``name``, ``flag``, ``anchor``, ``args``; ``args`` must have exactly
    ``color`` and ``shape``. Unknown enum values are errors, never defaults.
    """
    try:
        obj = json.loads(block_body)
    except json.JSONDecodeError as exc:
        raise NotAnObject(f"body is not valid JSON: {exc.msg}") from exc
    return tool_call_from_wire(obj)


def tool_call_from_wire(obj: object) -> ToolCall:
    """Validate the already-decoded JSON object form of a tool call."""
    if not isinstance(obj, dict):
        raise NotAnObject("body must be a JSON object")

    for key in ("name", "flag", "anchor", "args"):
        if key not in obj:
            raise MissingField(key)
    for key in obj:
        if key not in ("name", "flag", "anchor", "args"):
            raise UnexpectedField(key)

    args = obj["args"]
    if not isinstance(args, dict):
        raise NotAnObject("args must be a JSON object")
    for key in ("color", "shape"):
        if key not in args:
            raise MissingField(f"args.{key}")
    for key in args:
        if key not in ("color", "shape"):
            raise UnexpectedField(f"args.{key}")

    if not isinstance(obj["flag"], bool):
        raise UnknownEnumValue("flag", obj["flag"])
    if not isinstance(obj["anchor"], str):
        raise UnknownEnumValue("anchor", obj["anchor"])
    try:
        color = Color(args["color"])
    except ValueError:
        raise UnknownEnumValue("color", args["color"]) from None
    try:
        shape = Shape(args["shape"])
    except ValueError:
        raise UnknownEnumValue("shape", args["shape"]) from None

    return ToolCall(
        name=obj["name"],
        flag=obj["flag"],
        anchor=obj["anchor"],
        color=color,
        shape=shape,
    )


def tool_call_to_wire(call: ToolCall) -> dict:
    """The JSON object form, keys in fixed order."""
    return {
        "name": call.name,
        "flag": call.flag,
        "anchor": call.anchor,
        "args": {"color": call.color.value, "shape": call.shape.value},
    }


def serialize_tool_call(call: ToolCall) -> str:
    """Emit the canonical tagged wire form.

    Keys in fixed order, no insignificant whitespace, UTF-8; identical
    ToolCalls serialize to identical bytes and round-trip through
    :func:`parse_tool_call`.
    """
    if call.flag and not call.anchor.strip():
        raise InvariantViolation("flag=true requires a non-empty anchor")
    body = json.dumps(
        tool_call_to_wire(call), ensure_ascii=False, separators=(",", ":")
    )
    return f"{TOOL_CALL_OPEN}{body}{TOOL_CALL_CLOSE}"


def serialize_turn_output(turn: TurnOutput) -> str:
    """Render a turn back to its canonical text form (answer, blocks)."""
    parts = [turn.answer]
    if turn.reflection:
        parts.append(f"{REFLECTION_OPEN}{turn.reflection}{REFLECTION_CLOSE}")
    if turn.tool_call is not None:
        parts.append(serialize_tool_call(turn.tool_call))
    return "\n".join(parts)


def parse_turn_output(raw: RawModelText, round_index: int) -> TurnOutput:
    """Split a raw generation into (answer, reflection, tool call).

    Only the first reflection block and the first tool-call block are
    legal; a second block of either kind raises :class:`DuplicateBlock`.
    The answer is whatever text remains once both blocks are removed.
    Total over arbitrary input: returns a TurnOutput or raises a
    :class:`ProtocolError` subclass, never anything else.
    """
    if not raw or not raw.strip():
        raise EmptyAnswer("raw model text is empty")

    reflection_block = _extract_block(raw, REFLECTION_OPEN, REFLECTION_CLOSE)
    tool_block = _extract_block(raw, TOOL_CALL_OPEN, TOOL_CALL_CLOSE)

    tool_call = None
    if tool_block is not None:
        try:
            tool_call = parse_tool_call(tool_block.body)
        except ToolCallParseError as exc:
            raise MalformedToolCall(
                str(exc), _byte_offset(raw, tool_block.start)
            ) from exc
        except InvariantViolation as exc:
            raise MalformedToolCall(
                str(exc), _byte_offset(raw, tool_block.start)
            ) from exc

    spans = [
        (b.start, b.end)
        for b in (reflection_block, tool_block)
        if b is not None
    ]
    spans.sort()
    answer_parts = []
    cursor = 0
    for start, end in spans:
        if start > cursor:
            answer_parts.append(raw[cursor:start])
        cursor = max(cursor, end)
    answer_parts.append(raw[cursor:])
    answer = "".join(answer_parts).strip()

    if not answer:
        raise EmptyAnswer("all text was consumed by blocks")

    reflection = reflection_block.body.strip() if reflection_block else ""
    return TurnOutput(
        answer=answer,
        reflection=reflection,
        tool_call=tool_call,
        round_index=round_index,
    )
