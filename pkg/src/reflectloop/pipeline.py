"""Reflective training-data construction.

Stages, each pure over its inputs plus the injected backends:

  1. simulate student-teacher dialogues until a perfect score or budget
  2. filter: strict score ascent, perfect final score, ground-truth match
  3. ground: extract anchor keywords, locate them, render marker images
  4. convert teacher feedback to first-person reflections with the marker
     attribute phrase injected
  5. verify each reflection against its marker image
  6. adapt: emit a hybrid of multi-turn chains and collapsed QA pairs at a
     configured multi-turn ratio

Records move through stages independently, so every stage can run its
records in parallel and re-emit them in input order.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import math
import random
import re
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

from .backends import BackendError, Backends, ChatMessage, ImagePart, TextPart
from .pngio import decode_png, encode_png
from .protocol import Color, Shape, ToolCall, tool_call_from_wire, tool_call_to_wire
from .render import (
    MaskRLE,
    Marker,
    Point,
    color_name,
    compose_visual_context,
    marker_from_dict,
    marker_to_dict,
    mask_is_empty,
)

T = TypeVar("T")
U = TypeVar("U")

ATTRIBUTE_PHRASE = "as indicated by the {color} {shape}"

PERFECT_SCORE = 10


class Domain(enum.Enum):
    GENERAL_QA = "general_qa"
    OCR = "ocr"
    DOC = "doc"
    CHART = "chart"


# domains whose ground truth is short and literal enough to ground directly
DENSE_DOMAINS: frozenset[Domain] = frozenset(
    {Domain.OCR, Domain.DOC, Domain.CHART}
)

DEFAULT_MARKER_COLORS: tuple[Color, ...] = tuple(Color)


class PipelineError(RuntimeError):
    pass


class ChainBuildError(PipelineError):
    """This record cannot become a reflective chain; collapse it to QA."""


class NoCorrections(ChainBuildError):
    """Single-turn perfect dialogue: nothing to reflect on."""


class EmptyAnchor(ChainBuildError):
    """Keyword extraction produced no usable anchor text."""


class EmptyGrounding(ChainBuildError):
    """The grounder found nothing for the anchor."""

    def __init__(self, anchor: str):
        super().__init__(f"no region found for: {anchor}")
        self.anchor = anchor


class ConversionRejected(PipelineError):
    """Feedback conversion kept addressing the student after a retry."""


class SimulationIncomplete(PipelineError):
    """Backend failure mid-dialogue; carries the partial record."""

    def __init__(self, record: "DialogueRecord", cause: BackendError):
        super().__init__(f"dialogue incomplete: {cause}")
        self.record = record
        self.cause = cause


class UnderTargetWarning(Warning):
    """Too few verified chains to fill the multi-turn ratio target."""


class JsonlSchemaError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# --- domain types ------------------------------------------------------------

@dataclass(frozen=True)
class SourceSample:
    id: str
    image_png: bytes
    question: str
    ground_truth: str
    domain: Domain

    def __post_init__(self):
        if not self.id or not self.image_png or not self.question.strip():
            raise ValueError("id, image and question must be non-empty")
        if not self.ground_truth.strip():
            raise ValueError("ground_truth must be non-empty")
        if not isinstance(self.domain, Domain):
            raise ValueError(f"bad domain: {self.domain!r}")


@dataclass(frozen=True)
class DialogueTurn:
    student_response: str
    teacher_feedback: str
    score: int

    def __post_init__(self):
        if not 0 <= self.score <= PERFECT_SCORE:
            raise ValueError(f"score {self.score} outside 0..{PERFECT_SCORE}")


@dataclass(frozen=True)
class DialogueRecord:
    source: SourceSample
    turns: tuple[DialogueTurn, ...]
    gt_aligned: bool
    incomplete: bool = False

    def __post_init__(self):
        if not self.turns and not self.incomplete:
            raise ValueError("a complete dialogue needs at least one turn")

    @property
    def scores(self) -> tuple[int, ...]:
        return tuple(t.score for t in self.turns)


@dataclass(frozen=True)
class PromptTemplates:
    student_system: str = (
        "You are a student answering questions about an image. Commit to "
        "one concise answer; when given feedback, look again and revise."
    )
    teacher_system: str = (
        "You are a strict teacher grading against a ground truth the "
        "student cannot see. Point at what to re-check in the image; never "
        "quote the ground truth outright."
    )
    teacher_user: str = (
        "Question: {question}\n"
        "Ground truth: {ground_truth}\n"
        "Student answer: {answer}\n"
        "Give one short paragraph of feedback."
    )
    subject_extraction: str = (
        "Extract the core subjects and key modifiers from this answer as "
        "one short noun phrase suitable for locating them in an image. "
        "Reply with the phrase only.\nAnswer: {ground_truth}"
    )
    object_identification: str = (
        "List the visual objects or regions this feedback says were "
        "misread or missed. Reply with a comma-separated list only.\n"
        "Feedback: {feedback}"
    )
    caption_merge: str = (
        "Merge these objects into one short grounding phrase of a few "
        "words, no punctuation. Reply with the phrase only.\n"
        "Objects: {objects}"
    )
    caption_insertion: str = "{reflection}, {phrase}"
    self_reflection_conversion: str = (
        "Rewrite the teacher feedback below as the student's own inner "
        "realization in the first person, e.g. starting \"Wait, upon "
        "closer inspection, I realize...\". Never address anyone; the "
        "words \"you\" and \"your\" must not appear. Reply with the "
        "rewritten text only.\nFeedback: {feedback}"
    )
    conversion_retry_note: str = (
        "The previous rewrite still addressed the student directly. "
        "Rewrite it strictly in the first person; the words \"you\" and "
        "\"your\" must not appear."
    )
    validation_reflection: str = (
        "Looking once more at the region as indicated by the {color} "
        "{shape}, the evidence supports my answer, so no further "
        "verification is needed."
    )
    logic_rubric: str = (
        "Rate the logical coherence of the candidate reasoning trajectory "
        "for this question on a 1-5 scale (5 = flawless). "
        "Question: {question}"
    )
    visual_rubric: str = (
        "Rate the visual validity of the candidate reasoning trajectory "
        "for this question on a 1-5 scale (5 = every visual reference is "
        "correct). Question: {question}"
    )


@dataclass(frozen=True)
class PipelineConfig:
    rho: float = 0.75  # fraction of emitted samples kept as multi-turn chains
    seed: int = 0
    dense_domains: frozenset[Domain] = DENSE_DOMAINS
    marker_colors: tuple[Color, ...] = DEFAULT_MARKER_COLORS
    marker_shape: Shape = Shape.POINT
    max_teacher_rounds: int = 4
    workers: int = 1
    templates: PromptTemplates = field(default_factory=PromptTemplates)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho {self.rho} outside [0,1]")
        if not self.marker_colors:
            raise ValueError("marker_colors must not be empty")
        if self.max_teacher_rounds < 1:
            raise ValueError("max_teacher_rounds must be >= 1")


@dataclass(frozen=True)
class GroundedRound:
    """One correction turn with its grounded, rendered marker evidence."""

    answer: str
    feedback: str
    tool_call: ToolCall
    marker: Marker
    marker_png: bytes
    points: tuple[Point, ...]
    mask: MaskRLE | None


@dataclass(frozen=True)
class GroundedRecord:
    source: SourceSample
    rounds: tuple[GroundedRound, ...]
    final_answer: str

    def __post_init__(self):
        if not self.rounds:
            raise ValueError("a grounded record needs at least one round")
        if not self.final_answer.strip():
            raise ValueError("final_answer must be non-empty")


@dataclass(frozen=True)
class ChainRound:
    """One emitted turn: answer, first-person reflection, tool call.

    ``marker_png`` is the image this round's tool call produced; the final
    validation round produces none and inherits the previous round's
    marker for its attribute phrase.
    """

    answer: str
    reflection: str
    tool_call: ToolCall
    marker: Marker
    marker_png: bytes | None
    points: tuple[Point, ...]
    mask: MaskRLE | None
    feedback: str = ""


def attribute_phrase(color: str, shape: str) -> str:
    return ATTRIBUTE_PHRASE.format(color=color, shape=shape)


def _round_phrase(round_: ChainRound) -> str:
    return attribute_phrase(
        color_name(round_.marker.color), round_.marker.shape.value
    )


@dataclass(frozen=True)
class ReflectiveChain:
    source: SourceSample
    rounds: tuple[ChainRound, ...]
    final_answer: str

    def __post_init__(self):
        if len(self.rounds) < 2:
            raise ValueError("a chain needs a correction and a validation round")
        if self.rounds[-1].tool_call.flag:
            raise ValueError("the last round must validate (flag=false)")
        for r in self.rounds[:-1]:
            if not r.tool_call.flag:
                raise ValueError("only the last round may validate")
            if r.marker_png is None:
                raise ValueError("correction rounds must carry a marker image")
        for r in self.rounds:
            if _round_phrase(r) not in r.reflection:
                raise ValueError(
                    f"reflection lacks its marker phrase: {_round_phrase(r)!r}"
                )
        if self.final_answer != self.rounds[-1].answer:
            raise ValueError("final_answer must equal the last round's answer")


class SampleKind(enum.Enum):
    REFLECTIVE_CHAIN = "reflective_chain"
    TRUNCATED_QA = "truncated_qa"


@dataclass(frozen=True)
class TruncatedQa:
    image_png: bytes
    question: str
    answer: str
    domain: Domain = Domain.GENERAL_QA


@dataclass(frozen=True)
class DatasetSample:
    kind: SampleKind
    provenance: tuple[str, ...]  # record id first, then decisions applied
    chain: ReflectiveChain | None = None
    qa: TruncatedQa | None = None

    def __post_init__(self):
        if self.kind is SampleKind.REFLECTIVE_CHAIN:
            if self.chain is None or self.qa is not None:
                raise ValueError("chain samples carry exactly a chain payload")
        else:
            if self.qa is None or self.chain is not None:
                raise ValueError("qa samples carry exactly a qa payload")

    @property
    def source_id(self) -> str:
        return self.provenance[0]


# --- stage 1: dialogue simulation ---------------------------------------------

def simulate_dialogue(
    sample: SourceSample,
    backends: Backends,
    max_teacher_rounds: int = 4,
    templates: PromptTemplates | None = None,
) -> DialogueRecord:
    """Student answers, judge scores, teacher corrects, until 10 or budget.

    The judge is consulted once more at the end to decide whether the
    final response is semantically aligned with the ground truth; the
    result is stored so downstream filtering stays a pure function.
    """
    if max_teacher_rounds < 1:
        raise ValueError("max_teacher_rounds must be >= 1")
    tpl = templates or PromptTemplates()
    turns: list[DialogueTurn] = []

    student_msgs: list[ChatMessage] = [
        ChatMessage.text("system", tpl.student_system),
        ChatMessage(
            "user", (ImagePart(sample.image_png), TextPart(sample.question))
        ),
    ]
    try:
        for round_no in range(1, max_teacher_rounds + 1):
            response = backends.chat.complete(student_msgs).strip()
            score = backends.judge.score(
                sample.question, response, sample.ground_truth
            ).score
            feedback = ""
            if score < PERFECT_SCORE and round_no < max_teacher_rounds:
                feedback = backends.teacher().complete(
                    [
                        ChatMessage.text("system", tpl.teacher_system),
                        ChatMessage.text(
                            "user",
                            tpl.teacher_user.format(
                                question=sample.question,
                                ground_truth=sample.ground_truth,
                                answer=response,
                            ),
                        ),
                    ]
                ).strip()
            turns.append(DialogueTurn(response, feedback, score))
            if score == PERFECT_SCORE:
                break
            student_msgs.append(ChatMessage.text("assistant", response))
            student_msgs.append(ChatMessage.text("user", feedback))
        gt_aligned = (
            backends.judge.score(
                sample.question, turns[-1].student_response, sample.ground_truth
            ).score
            == PERFECT_SCORE
        )
    except BackendError as exc:
        raise SimulationIncomplete(
            DialogueRecord(sample, tuple(turns), gt_aligned=False, incomplete=True),
            exc,
        ) from exc
    return DialogueRecord(sample, tuple(turns), gt_aligned=gt_aligned)


# --- stage 2: filtering --------------------------------------------------------

class FilterReason(enum.Enum):
    NOT_STRICTLY_ASCENDING = "not_strictly_ascending"
    FINAL_NOT_PERFECT = "final_not_perfect"
    NOT_GT_ALIGNED = "not_gt_aligned"


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: FilterReason | None = None


def filter_dialogue(record: DialogueRecord) -> FilterDecision:
    """Keep iff scores strictly ascend, end at 10, and the GT check passed.

    Pure over the record; the first violated criterion names the reason.
    """
    if not record.turns:
        raise ValueError("filter needs at least one scored turn")
    scores = record.scores
    if any(b <= a for a, b in zip(scores, scores[1:])):
        return FilterDecision(False, FilterReason.NOT_STRICTLY_ASCENDING)
    if scores[-1] != PERFECT_SCORE:
        return FilterDecision(False, FilterReason.FINAL_NOT_PERFECT)
    if not record.gt_aligned:
        return FilterDecision(False, FilterReason.NOT_GT_ALIGNED)
    return FilterDecision(True)


@dataclass(frozen=True)
class FunnelCounts:
    """Stage survival counts: all records, score-criteria pass, plus GT pass."""

    original: int
    response_filtered: int
    gt_filtered: int


def filter_funnel(records: Sequence[DialogueRecord]) -> FunnelCounts:
    response = 0
    gt = 0
    for record in records:
        decision = filter_dialogue(record)
        if decision.reason in (
            FilterReason.NOT_STRICTLY_ASCENDING,
            FilterReason.FINAL_NOT_PERFECT,
        ):
            continue
        response += 1
        if decision.keep:
            gt += 1
    return FunnelCounts(
        original=len(records), response_filtered=response, gt_filtered=gt
    )


# --- stage 3: grounding ---------------------------------------------------------

def extract_keywords(
    record: DialogueRecord,
    turn_index: int,
    cfg: PipelineConfig,
    backends: Backends,
) -> str:
    """Anchor text for one correction turn.

    Text-dense domains ground the ground truth itself (its subjects are
    literally in the image); general QA distills the teacher feedback in
    two steps, naming the misread objects then merging them into a phrase.
    """
    if not 0 <= turn_index < len(record.turns) - 1:
        raise ValueError("turn_index must name a non-final turn")
    feedback = record.turns[turn_index].teacher_feedback
    if not feedback.strip():
        raise ValueError("the turn carries no correction feedback")

    chat = backends.teacher()
    if record.source.domain in cfg.dense_domains:
        anchor = chat.complete(
            [
                ChatMessage.text(
                    "user",
                    cfg.templates.subject_extraction.format(
                        ground_truth=record.source.ground_truth
                    ),
                )
            ]
        )
    else:
        objects = chat.complete(
            [
                ChatMessage.text(
                    "user",
                    cfg.templates.object_identification.format(feedback=feedback),
                )
            ]
        ).strip()
        anchor = chat.complete(
            [
                ChatMessage.text(
                    "user", cfg.templates.caption_merge.format(objects=objects)
                )
            ]
        )
    anchor = anchor.strip()
    if not anchor:
        raise EmptyAnchor("keyword extraction returned nothing")
    return anchor


_SEGMENTED_SHAPES = frozenset({Shape.ELLIPSE, Shape.BOX, Shape.MASK})


def ground_record(
    record: DialogueRecord, cfg: PipelineConfig, backends: Backends
) -> GroundedRecord:
    """Anchor, locate and render a marker image for every correction turn."""
    if len(record.turns) < 2:
        raise NoCorrections("single-turn dialogue has nothing to ground")
    base = decode_png(record.source.image_png)
    rounds: list[GroundedRound] = []
    for i, turn in enumerate(record.turns[:-1]):
        anchor = extract_keywords(record, i, cfg, backends)
        points = backends.grounder.ground(record.source.image_png, anchor)
        if not points:
            raise EmptyGrounding(anchor)
        mask: MaskRLE | None = None
        if cfg.marker_shape in _SEGMENTED_SHAPES:
            seg = backends.segmenter.segment(record.source.image_png, points)
            if mask_is_empty(seg.mask):
                raise EmptyGrounding(anchor)
            mask = seg.mask
        call = ToolCall(
            flag=True,
            anchor=anchor,
            color=cfg.marker_colors[i % len(cfg.marker_colors)],
            shape=cfg.marker_shape,
        )
        ctx = compose_visual_context(
            base, call, points, mask, round_index=i + 1, mode="fresh"
        )
        rounds.append(
            GroundedRound(
                answer=turn.student_response,
                feedback=turn.teacher_feedback,
                tool_call=call,
                marker=ctx.markers[0],
                marker_png=encode_png(ctx.rendered),
                points=tuple(points),
                mask=mask,
            )
        )
    return GroundedRecord(
        source=record.source,
        rounds=tuple(rounds),
        final_answer=record.turns[-1].student_response,
    )


# --- stage 4: reflection conversion --------------------------------------------

def inject_visual_caption(
    reflection_text: str,
    marker: Marker,
    template: str = "{reflection}, {phrase}",
) -> str:
    """Weave the marker attribute phrase into a reflection, idempotently.

    Terminal punctuation is preserved: "I missed the cup." becomes
    "I missed the cup, as indicated by the red point."
    """
    if not reflection_text.strip():
        raise ValueError("reflection_text must be non-empty")
    phrase = attribute_phrase(color_name(marker.color), marker.shape.value)
    if phrase in reflection_text:
        return reflection_text
    stripped = reflection_text.rstrip()
    punct = stripped[-1] if stripped and stripped[-1] in ".!?" else ""
    body = stripped[:-1].rstrip() if punct else stripped
    return template.format(reflection=body, phrase=phrase) + punct


_SECOND_PERSON = re.compile(
    r"\b(you|your|yours|yourself|yourselves)\b", re.IGNORECASE
)
_QUOTED = re.compile(r'"[^"]*"')


def is_first_person(text: str) -> bool:
    """No second-person address outside double-quoted spans."""
    return _SECOND_PERSON.search(_QUOTED.sub('""', text)) is None


def convert_to_self_reflection(
    teacher_feedback: str,
    backends: Backends,
    cfg: PipelineConfig,
) -> str:
    """Turn teacher feedback into the student's own first-person realization."""
    if not teacher_feedback.strip():
        raise ValueError("teacher_feedback must be non-empty")
    chat = backends.teacher()
    prompt = cfg.templates.self_reflection_conversion.format(
        feedback=teacher_feedback
    )
    out = chat.complete([ChatMessage.text("user", prompt)]).strip()
    if out and is_first_person(out):
        return out
    retry_prompt = (
        f"{prompt}\n\n{cfg.templates.conversion_retry_note}\n"
        f"Previous attempt: {out}"
    )
    out = chat.complete([ChatMessage.text("user", retry_prompt)]).strip()
    if out and is_first_person(out):
        return out
    raise ConversionRejected(
        f"conversion still second-person after retry: {out[:120]!r}"
    )


def reflect_chain(
    grounded: GroundedRecord, cfg: PipelineConfig, backends: Backends
) -> ReflectiveChain:
    """Fill in reflections and the terminal validation round."""
    rounds: list[ChainRound] = []
    for g in grounded.rounds:
        converted = convert_to_self_reflection(g.feedback, backends, cfg)
        reflection = inject_visual_caption(
            converted, g.marker, cfg.templates.caption_insertion
        )
        rounds.append(
            ChainRound(
                answer=g.answer,
                reflection=reflection,
                tool_call=g.tool_call,
                marker=g.marker,
                marker_png=g.marker_png,
                points=g.points,
                mask=g.mask,
                feedback=g.feedback,
            )
        )
    last = grounded.rounds[-1]
    validation = cfg.templates.validation_reflection.format(
        color=color_name(last.marker.color), shape=last.marker.shape.value
    )
    rounds.append(
        ChainRound(
            answer=grounded.final_answer,
            reflection=validation,
            tool_call=ToolCall(
                flag=False,
                anchor="",
                color=last.tool_call.color,
                shape=last.tool_call.shape,
            ),
            marker=last.marker,
            marker_png=None,
            points=(),
            mask=None,
        )
    )
    return ReflectiveChain(
        source=grounded.source,
        rounds=tuple(rounds),
        final_answer=grounded.final_answer,
    )


def build_chain(
    record: DialogueRecord, cfg: PipelineConfig, backends: Backends
) -> ReflectiveChain:
    return reflect_chain(ground_record(record, cfg, backends), cfg, backends)


# --- stage 5: verification -------------------------------------------------------

def verify_chain(chain: ReflectiveChain, backends: Backends) -> bool:
    """Every round's reflection must be consistent with the marker image it cites.

    The validation round cites the previous round's marker, so it is
    checked against that image.
    """
    if not chain.rounds:
        raise ValueError("cannot verify an empty chain")
    for i, round_ in enumerate(chain.rounds):
        png = round_.marker_png
        if png is None:
            png = chain.rounds[i - 1].marker_png
        assert png is not None  # chain invariant: correction rounds carry images
        if not backends.judge.consistency(png, round_.reflection).consistent:
            return False
    return True


# --- stage 6: adaptation ----------------------------------------------------------

def _qa_from_chain(chain: ReflectiveChain) -> TruncatedQa:
    return TruncatedQa(
        image_png=chain.source.image_png,
        question=chain.source.question,
        answer=chain.final_answer,
        domain=chain.source.domain,
    )


def _qa_from_record(record: DialogueRecord) -> TruncatedQa:
    return TruncatedQa(
        image_png=record.source.image_png,
        question=record.source.question,
        answer=record.source.ground_truth,
        domain=record.source.domain,
    )


def adapt_trajectories(
    verified: Sequence[ReflectiveChain],
    failed: Sequence[DialogueRecord],
    cfg: PipelineConfig,
) -> list[DatasetSample]:
    """Blend chains and collapsed QA at the configured multi-turn ratio.

    Every failed record collapses to (image, question -> ground truth).
    With N = |verified| + |failed| and target floor(rho * N), surplus
    chains are converted to QA pairs (seeded shuffle picks which), never
    discarded; a shortfall keeps every chain and warns.
    """
    total = len(verified) + len(failed)
    if total == 0:
        return []
    m_target = math.floor(cfg.rho * total)
    surplus = len(verified) - m_target
    converted: set[int] = set()
    if surplus > 0:
        order = list(range(len(verified)))
        random.Random(cfg.seed).shuffle(order)
        converted = set(order[:surplus])
    else:
        warnings.warn(
            UnderTargetWarning(
                f"{len(verified)} verified chains cannot exceed the "
                f"multi-turn target of {m_target} (N={total}, rho={cfg.rho})"
            ),
            stacklevel=2,
        )

    kept = [
        DatasetSample(
            kind=SampleKind.REFLECTIVE_CHAIN,
            provenance=(chain.source.id, "chain_kept"),
            chain=chain,
        )
        for i, chain in enumerate(verified)
        if i not in converted
    ]
    collapsed = [
        DatasetSample(
            kind=SampleKind.TRUNCATED_QA,
            provenance=(chain.source.id, "chain_collapsed_for_ratio"),
            qa=_qa_from_chain(chain),
        )
        for i, chain in enumerate(verified)
        if i in converted
    ]
    failures = [
        DatasetSample(
            kind=SampleKind.TRUNCATED_QA,
            provenance=(record.source.id, "dialogue_collapsed"),
            qa=_qa_from_record(record),
        )
        for record in failed
    ]
    return kept + collapsed + failures


def multi_turn_fraction(samples: Sequence[DatasetSample]) -> float:
    if not samples:
        return 0.0
    chains = sum(1 for s in samples if s.kind is SampleKind.REFLECTIVE_CHAIN)
    return chains / len(samples)


# --- parallel helper ---------------------------------------------------------------

def map_ordered(
    fn: Callable[[T], U], items: Iterable[T], workers: int = 1
) -> list[U]:
    """Apply fn to every item, in parallel, preserving input order."""
    items = list(items)
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- JSONL serialization --------------------------------------------------------------

class _ImageStore:
    """Writes referenced PNGs into a sibling directory, deduplicated by hash."""

    def __init__(self, jsonl_path: Path):
        self.dir = jsonl_path.parent / (jsonl_path.stem + "_images")
        self._written: set[str] = set()

    def put(self, png: bytes) -> str:
        name = hashlib.sha256(png).hexdigest()[:16] + ".png"
        if name not in self._written:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / name).write_bytes(png)
            self._written.add(name)
        return f"{self.dir.name}/{name}"


def _load_image(value: object, base_dir: Path, line: int) -> bytes:
    if not isinstance(value, str) or not value:
        raise JsonlSchemaError(line, "image must be a path or base64 string")
    candidate = Path(value)
    if not candidate.is_absolute():
        candidate = base_dir / value
    try:
        # long base64 payloads overflow the OS path length limit
        is_file = candidate.is_file()
    except OSError:
        is_file = False
    if is_file:
        return candidate.read_bytes()
    try:
        return base64.b64decode(value, validate=True)
    except Exception:
        raise JsonlSchemaError(
            line, f"image {value[:60]!r} is neither a readable path nor base64"
        ) from None


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise JsonlSchemaError(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise JsonlSchemaError(line_no, "line is not a JSON object")
            yield line_no, obj


def _write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    count = 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            count += 1
    return count


def _need(d: dict, key: str, line: int) -> object:
    if key not in d:
        raise JsonlSchemaError(line, f"missing field: {key}")
    return d[key]


def _source_to_dict(source: SourceSample, store: _ImageStore) -> dict:
    return {
        "id": source.id,
        "image": store.put(source.image_png),
        "question": source.question,
        "ground_truth": source.ground_truth,
        "domain": source.domain.value,
    }


def _source_from_dict(d: object, base_dir: Path, line: int) -> SourceSample:
    if not isinstance(d, dict):
        raise JsonlSchemaError(line, "source must be an object")
    try:
        domain = Domain(str(_need(d, "domain", line)))
    except ValueError:
        raise JsonlSchemaError(line, f"unknown domain: {d.get('domain')!r}") from None
    try:
        return SourceSample(
            id=str(_need(d, "id", line)),
            image_png=_load_image(_need(d, "image", line), base_dir, line),
            question=str(_need(d, "question", line)),
            ground_truth=str(_need(d, "ground_truth", line)),
            domain=domain,
        )
    except ValueError as exc:
        raise JsonlSchemaError(line, str(exc)) from exc


def read_source_samples(path) -> list[SourceSample]:
    path = Path(path)
    return [
        _source_from_dict(obj, path.parent, line) for line, obj in _read_jsonl(path)
    ]


def write_source_samples(path, samples: Sequence[SourceSample]) -> int:
    path = Path(path)
    store = _ImageStore(path)
    return _write_jsonl(path, (_source_to_dict(s, store) for s in samples))


def _mask_to_dict(mask: MaskRLE | None) -> dict | None:
    if mask is None:
        return None
    return {"width": mask.width, "height": mask.height, "runs": list(mask.runs)}


def _mask_from_dict(d: object, line: int) -> MaskRLE | None:
    if d is None:
        return None
    if not isinstance(d, dict):
        raise JsonlSchemaError(line, "mask must be an object or null")
    return MaskRLE(
        width=int(_need(d, "width", line)),
        height=int(_need(d, "height", line)),
        runs=tuple(int(r) for r in _need(d, "runs", line)),
    )


def write_dialogues(path, records: Sequence[DialogueRecord]) -> int:
    path = Path(path)
    store = _ImageStore(path)
    rows = (
        {
            "source": _source_to_dict(r.source, store),
            "turns": [
                [t.student_response, t.teacher_feedback, t.score] for t in r.turns
            ],
            "gt_aligned": r.gt_aligned,
            "incomplete": r.incomplete,
        }
        for r in records
    )
    return _write_jsonl(path, rows)


def read_dialogues(path) -> list[DialogueRecord]:
    path = Path(path)
    records = []
    for line, obj in _read_jsonl(path):
        source = _source_from_dict(_need(obj, "source", line), path.parent, line)
        turns_raw = _need(obj, "turns", line)
        if not isinstance(turns_raw, list):
            raise JsonlSchemaError(line, "turns must be a list")
        try:
            turns = tuple(
                DialogueTurn(str(t[0]), str(t[1]), int(t[2])) for t in turns_raw
            )
            records.append(
                DialogueRecord(
                    source=source,
                    turns=turns,
                    gt_aligned=bool(_need(obj, "gt_aligned", line)),
                    incomplete=bool(obj.get("incomplete", False)),
                )
            )
        except (ValueError, IndexError, TypeError) as exc:
            raise JsonlSchemaError(line, f"bad dialogue record: {exc}") from exc
    return records


def _chain_to_dict(chain: ReflectiveChain, store: _ImageStore) -> dict:
    return {
        "source": _source_to_dict(chain.source, store),
        "rounds": [
            {
                "answer": r.answer,
                "feedback": r.feedback,
                "reflection": r.reflection,
                "tool_call": tool_call_to_wire(r.tool_call),
                "marker": marker_to_dict(r.marker),
                "marker_image": store.put(r.marker_png) if r.marker_png else None,
                "points": [[p.x, p.y] for p in r.points],
                "mask": _mask_to_dict(r.mask),
            }
            for r in chain.rounds
        ],
        "final_answer": chain.final_answer,
    }


def _chain_from_dict(obj: dict, base_dir: Path, line: int) -> ReflectiveChain:
    source = _source_from_dict(_need(obj, "source", line), base_dir, line)
    rounds_raw = _need(obj, "rounds", line)
    if not isinstance(rounds_raw, list):
        raise JsonlSchemaError(line, "rounds must be a list")
    rounds = []
    try:
        for r in rounds_raw:
            marker_image = r.get("marker_image")
            rounds.append(
                ChainRound(
                    answer=str(_need(r, "answer", line)),
                    feedback=str(r.get("feedback", "")),
                    reflection=str(_need(r, "reflection", line)),
                    tool_call=tool_call_from_wire(_need(r, "tool_call", line)),
                    marker=marker_from_dict(_need(r, "marker", line)),
                    marker_png=(
                        _load_image(marker_image, base_dir, line)
                        if marker_image
                        else None
                    ),
                    points=tuple(Point(float(p[0]), float(p[1])) for p in r["points"]),
                    mask=_mask_from_dict(r.get("mask"), line),
                )
            )
        return ReflectiveChain(
            source=source,
            rounds=tuple(rounds),
            final_answer=str(_need(obj, "final_answer", line)),
        )
    except JsonlSchemaError:
        raise
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise JsonlSchemaError(line, f"bad chain record: {exc}") from exc


def write_grounded(path, records: Sequence[GroundedRecord]) -> int:
    path = Path(path)
    store = _ImageStore(path)
    rows = (
        {
            "source": _source_to_dict(r.source, store),
            "rounds": [
                {
                    "answer": g.answer,
                    "feedback": g.feedback,
                    "tool_call": tool_call_to_wire(g.tool_call),
                    "marker": marker_to_dict(g.marker),
                    "marker_image": store.put(g.marker_png),
                    "points": [[p.x, p.y] for p in g.points],
                    "mask": _mask_to_dict(g.mask),
                }
                for g in r.rounds
            ],
            "final_answer": r.final_answer,
        }
        for r in records
    )
    return _write_jsonl(path, rows)


def read_grounded(path) -> list[GroundedRecord]:
    path = Path(path)
    records = []
    for line, obj in _read_jsonl(path):
        source = _source_from_dict(_need(obj, "source", line), path.parent, line)
        rounds_raw = _need(obj, "rounds", line)
        if not isinstance(rounds_raw, list):
            raise JsonlSchemaError(line, "rounds must be a list")
        try:
            rounds = tuple(
                GroundedRound(
                    answer=str(_need(r, "answer", line)),
                    feedback=str(_need(r, "feedback", line)),
                    tool_call=tool_call_from_wire(_need(r, "tool_call", line)),
                    marker=marker_from_dict(_need(r, "marker", line)),
                    marker_png=_load_image(
                        _need(r, "marker_image", line), path.parent, line
                    ),
                    points=tuple(Point(float(p[0]), float(p[1])) for p in r["points"]),
                    mask=_mask_from_dict(r.get("mask"), line),
                )
                for r in rounds_raw
            )
            records.append(
                GroundedRecord(
                    source=source,
                    rounds=rounds,
                    final_answer=str(_need(obj, "final_answer", line)),
                )
            )
        except JsonlSchemaError:
            raise
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise JsonlSchemaError(line, f"bad grounded record: {exc}") from exc
    return records


def write_chains(path, chains: Sequence[ReflectiveChain]) -> int:
    path = Path(path)
    store = _ImageStore(path)
    return _write_jsonl(path, (_chain_to_dict(c, store) for c in chains))


def read_chains(path) -> list[ReflectiveChain]:
    path = Path(path)
    return [_chain_from_dict(obj, path.parent, line) for line, obj in _read_jsonl(path)]


def write_dataset(path, samples: Sequence[DatasetSample]) -> int:
    path = Path(path)
    store = _ImageStore(path)
    rows = []
    for s in samples:
        row: dict = {"kind": s.kind.value, "provenance": list(s.provenance)}
        if s.chain is not None:
            row["chain"] = _chain_to_dict(s.chain, store)
        if s.qa is not None:
            row["qa"] = {
                "image": store.put(s.qa.image_png),
                "question": s.qa.question,
                "answer": s.qa.answer,
                "domain": s.qa.domain.value,
            }
        rows.append(row)
    return _write_jsonl(path, rows)


def read_dataset(path) -> list[DatasetSample]:
    path = Path(path)
    samples = []
    for line, obj in _read_jsonl(path):
        try:
            kind = SampleKind(str(_need(obj, "kind", line)))
        except ValueError:
            raise JsonlSchemaError(line, f"unknown kind: {obj.get('kind')!r}") from None
        provenance = tuple(str(p) for p in _need(obj, "provenance", line))
        if kind is SampleKind.REFLECTIVE_CHAIN:
            chain = _chain_from_dict(_need(obj, "chain", line), path.parent, line)
            samples.append(
                DatasetSample(kind=kind, provenance=provenance, chain=chain)
            )
        else:
            qa_raw = _need(obj, "qa", line)
            if not isinstance(qa_raw, dict):
                raise JsonlSchemaError(line, "qa must be an object")
            try:
                domain = Domain(str(qa_raw.get("domain", "general_qa")))
            except ValueError:
                raise JsonlSchemaError(
                    line, f"unknown domain: {qa_raw.get('domain')!r}"
                ) from None
            qa = TruncatedQa(
                image_png=_load_image(_need(qa_raw, "image", line), path.parent, line),
                question=str(_need(qa_raw, "question", line)),
                answer=str(_need(qa_raw, "answer", line)),
                domain=domain,
            )
            samples.append(DatasetSample(kind=kind, provenance=provenance, qa=qa))
    return samples
