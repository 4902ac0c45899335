"""Closed-loop reasoning engine.

One run: the model drafts an answer and a reflection; if the reflection
requests visual verification, the anchor phrase is grounded, the region is
marked on the original image, and the marked image is fed back for the
next round. The loop ends when a reflection validates the answer, when the
model stops requesting verification, or at the round cap. Every path
consumes a round, so a run halts for any backend behavior whatsoever.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backends import BackendError, Backends, ChatMessage, ImagePart, TextPart
from .protocol import (
    Color,
    ProtocolError,
    Shape,
    TurnOutput,
    parse_turn_output,
    tool_call_to_wire,
)
from .pngio import decode_png, encode_png
from .render import (
    MaskRLE,
    RenderError,
    VisualContext,
    bare_context,
    compose_visual_context,
    marker_to_dict,
    mask_is_empty,
)

DEFAULT_MAX_ROUNDS = 5

DEFAULT_COLOR_CYCLE: tuple[Color, ...] = tuple(Color)

GROUNDING_FAILURE_TEXT = "no region found for: {anchor}"

DEFAULT_SYSTEM_PROMPT = """\
You answer questions about an image. Structure every reply as: the answer \
text first, then a <reflection>...</reflection> block that checks the answer \
against the image. If the check needs visual evidence, add a \
<tool_call>{"name": "Visual Prompt Generator", "flag": true, "anchor": \
"<phrase to locate>", "args": {"color": "<red|green|blue|yellow|cyan|magenta\
|purple|orange>", "shape": "<point|circle|ellipse|box|mask>"}}</tool_call> \
block; a marked-up copy of the image comes back for your next turn. Once the \
reflection confirms the answer, emit the same block with "flag": false and an \
empty anchor to finish.\
"""

DEFAULT_MALFORMED_FEEDBACK = (
    "Your last reply did not follow the required format ({error}). "
    "Reply again with the answer text, then a <reflection> block, "
    "then a <tool_call> block."
)

DEFAULT_TOOL_RESULT_TEXT = (
    'verification image attached: {color} {shape} marking "{anchor}"'
)

# shapes whose fitting wants a segmentation mask, not just points
_SEGMENTED_SHAPES = frozenset({Shape.ELLIPSE, Shape.BOX, Shape.MASK})


class Termination(enum.Enum):
    VALIDATED = "validated"
    NO_TOOL_CALL = "no_tool_call"
    ROUND_CAP = "round_cap"
    GROUNDING_FAILED = "grounding_failed"
    BACKEND_ERROR = "backend_error"


class GroundingFailurePolicy(enum.Enum):
    FEEDBACK = "feedback"
    TERMINATE = "terminate"


class MalformedPolicy(enum.Enum):
    FEEDBACK = "feedback"
    TERMINATE = "terminate"


@dataclass(frozen=True)
class LoopConfig:
    max_rounds: int = DEFAULT_MAX_ROUNDS
    overlay_mode: str = "fresh"  # or "cumulative"
    on_empty_grounding: GroundingFailurePolicy = GroundingFailurePolicy.FEEDBACK
    on_malformed: MalformedPolicy = MalformedPolicy.FEEDBACK
    resend_all_images: bool = False
    color_cycle: tuple[Color, ...] = DEFAULT_COLOR_CYCLE
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    malformed_feedback: str = DEFAULT_MALFORMED_FEEDBACK
    tool_result_text: str = DEFAULT_TOOL_RESULT_TEXT

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.overlay_mode not in ("fresh", "cumulative"):
            raise ValueError(f"unknown overlay mode: {self.overlay_mode}")
        if not self.color_cycle:
            raise ValueError("color_cycle must not be empty")


@dataclass(frozen=True)
class Trajectory:
    """One finished run. contexts[i] is the image turn i reasoned over."""

    question: str
    image_png: bytes
    turns: tuple[TurnOutput, ...]
    contexts: tuple[VisualContext, ...]
    raw_texts: tuple[str, ...]
    termination: Termination
    token_counts: tuple[int, ...]
    wall_time_ms: int
    error: str = ""

    def __post_init__(self):
        if not (len(self.turns) == len(self.contexts) == len(self.raw_texts)):
            raise ValueError("turns, contexts and raw_texts must align")
        if len(self.token_counts) != len(self.turns):
            raise ValueError("token_counts must align with turns")

    @property
    def rounds(self) -> int:
        return len(self.turns)

    @property
    def validated(self) -> bool:
        return self.termination is Termination.VALIDATED

    @property
    def final_answer(self) -> str:
        return self.turns[-1].answer if self.turns else ""


def should_terminate(
    turn: TurnOutput, round_index: int, config: LoopConfig
) -> Termination | None:
    """Decide before any tool execution; grounding never runs at the cap."""
    if turn.tool_call is None:
        return Termination.NO_TOOL_CALL
    if not turn.tool_call.flag:
        return Termination.VALIDATED
    if round_index >= config.max_rounds:
        return Termination.ROUND_CAP
    return None


def prepare_messages(
    messages: Sequence[ChatMessage], resend_all_images: bool
) -> list[ChatMessage]:
    """Keep images only on the latest image-bearing message unless resending."""
    if resend_all_images:
        return list(messages)
    latest = max(
        (i for i, m in enumerate(messages) if m.has_image()), default=None
    )
    return [
        m if (i == latest or not m.has_image()) else m.without_images()
        for i, m in enumerate(messages)
    ]


def _count_tokens(text: str) -> int:
    return len(text.split())


def run_trajectory(
    image_png: bytes,
    question: str,
    backends: Backends,
    config: LoopConfig = LoopConfig(),
) -> Trajectory:
    """Run the reflection loop to termination and return the trajectory."""
    if not question.strip():
        raise ValueError("question must be non-empty")
    started = time.monotonic()
    base = decode_png(image_png)

    turns: list[TurnOutput] = []
    contexts: list[VisualContext] = []
    raws: list[str] = []
    current = bare_context(base)
    termination: Termination | None = None
    error = ""

    messages: list[ChatMessage] = [
        ChatMessage.text("system", config.system_prompt),
        ChatMessage("user", (ImagePart(image_png), TextPart(question))),
    ]

    round_index = 1
    while termination is None:
        try:
            raw = backends.chat.complete(
                prepare_messages(messages, config.resend_all_images)
            )
        except BackendError as exc:
            termination = Termination.BACKEND_ERROR
            error = str(exc)
            break

        try:
            turn = parse_turn_output(raw, round_index)
        except ProtocolError as exc:
            if config.on_malformed is MalformedPolicy.TERMINATE:
                termination = Termination.BACKEND_ERROR
                error = f"malformed model output: {exc}"
                break
            # feedback mode: the bad reply still consumes a round, so a
            # model that never conforms cannot spin past the cap
            messages.append(ChatMessage.text("assistant", raw))
            messages.append(
                ChatMessage.text(
                    "user", config.malformed_feedback.format(error=exc)
                )
            )
            if round_index >= config.max_rounds:
                termination = Termination.ROUND_CAP
            round_index += 1
            continue

        turns.append(turn)
        contexts.append(current)
        raws.append(raw)
        messages.append(ChatMessage.text("assistant", raw))

        termination = should_terminate(turn, round_index, config)
        if termination is not None:
            break

        call = turn.tool_call
        assert call is not None  # should_terminate returned None
        try:
            points = backends.grounder.ground(image_png, call.anchor)
            mask: MaskRLE | None = None
            if points and call.shape in _SEGMENTED_SHAPES:
                seg = backends.segmenter.segment(image_png, points)
                if not mask_is_empty(seg.mask):
                    mask = seg.mask
        except BackendError as exc:
            termination = Termination.BACKEND_ERROR
            error = str(exc)
            break

        if not points or (call.shape in _SEGMENTED_SHAPES and mask is None):
            # nothing usable to mark: either report back and reuse the
            # same view, or stop with the draft answer standing
            if config.on_empty_grounding is GroundingFailurePolicy.TERMINATE:
                termination = Termination.GROUNDING_FAILED
                break
            messages.append(
                ChatMessage.text(
                    "tool", GROUNDING_FAILURE_TEXT.format(anchor=call.anchor)
                )
            )
        else:
            try:
                current = compose_visual_context(
                    base,
                    call,
                    points,
                    mask,
                    round_index=round_index,
                    mode=config.overlay_mode,
                    prior_markers=current.markers,
                )
            except RenderError as exc:
                termination = Termination.BACKEND_ERROR
                error = f"render failed: {exc}"
                break
            messages.append(
                ChatMessage(
                    "tool",
                    (
                        ImagePart(encode_png(current.rendered)),
                        TextPart(
                            config.tool_result_text.format(
                                color=call.color.value,
                                shape=call.shape.value,
                                anchor=call.anchor,
                            )
                        ),
                    ),
                )
            )
        round_index += 1

    elapsed_ms = int((time.monotonic() - started) * 1000)
    return Trajectory(
        question=question,
        image_png=image_png,
        turns=tuple(turns),
        contexts=tuple(contexts),
        raw_texts=tuple(raws),
        termination=termination,
        token_counts=tuple(_count_tokens(r) for r in raws),
        wall_time_ms=elapsed_ms,
        error=error,
    )


# --- persistence -------------------------------------------------------------

def trajectory_document(
    trajectory: Trajectory, image_refs: Sequence[str] | None = None
) -> dict:
    """Structured form of a trajectory, stable across identical runs.

    ``image_refs`` names each round's context image (file names when
    persisting, base64 strings in service replies). Wall time is kept out
    so replays with deterministic backends are byte-identical.
    """
    if image_refs is not None and len(image_refs) != len(trajectory.contexts):
        raise ValueError("image_refs must align with contexts")
    rounds = []
    for i, turn in enumerate(trajectory.turns):
        rounds.append(
            {
                "round_index": turn.round_index,
                "answer": turn.answer,
                "reflection": turn.reflection,
                "tool_call": (
                    tool_call_to_wire(turn.tool_call)
                    if turn.tool_call is not None
                    else None
                ),
                "markers": [
                    marker_to_dict(m) for m in trajectory.contexts[i].markers
                ],
                "image": image_refs[i] if image_refs is not None else f"round_{i}.png",
                "token_count": trajectory.token_counts[i],
            }
        )
    return {
        "question": trajectory.question,
        "termination": trajectory.termination.value,
        "final_answer": trajectory.final_answer,
        "rounds": rounds,
        "error": trajectory.error,
    }


def persist_trajectory(trajectory: Trajectory, out_dir) -> Path:
    """Write round_k.png per context plus trajectory.json; returns the json path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    refs = []
    for i, ctx in enumerate(trajectory.contexts):
        name = f"round_{i}.png"
        (out / name).write_bytes(encode_png(ctx.rendered))
        refs.append(name)
    doc = trajectory_document(trajectory, image_refs=refs)
    path = out / "trajectory.json"
    path.write_text(
        json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return path
