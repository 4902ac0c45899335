"""Training-set export and descriptive statistics.

The export format is the common multi-turn SFT layout: one JSON object per
line with ordered image refs and role/content/loss_mask conversations, where
"<image>" placeholders in contents correspond one-to-one with the image
list and exactly the assistant messages are loss-masked as targets.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backends import Backends, ContractViolation
from .loop import DEFAULT_TOOL_RESULT_TEXT, Trajectory
from .pipeline import (
    DatasetSample,
    PromptTemplates,
    SampleKind,
    _ImageStore,
    _read_jsonl,
    JsonlSchemaError,
)
from .protocol import TurnOutput, serialize_turn_output

IMAGE_PLACEHOLDER = "<image>"


class EmptyInput(ValueError):
    pass


class SchemaViolation(ValueError):
    pass


@dataclass(frozen=True)
class SftMessage:
    role: str
    content: str
    loss_mask: bool


@dataclass(frozen=True)
class SftRecord:
    id: str
    images: tuple[str, ...]
    conversations: tuple[SftMessage, ...]
    meta: dict

    def __post_init__(self):
        placeholders = sum(
            m.content.count(IMAGE_PLACEHOLDER) for m in self.conversations
        )
        if placeholders != len(self.images):
            raise SchemaViolation(
                f"{placeholders} image placeholder(s) for {len(self.images)} image(s)"
            )
        for m in self.conversations:
            if m.loss_mask != (m.role == "assistant"):
                raise SchemaViolation(
                    f"loss_mask must be true exactly on assistant messages, "
                    f"got {m.loss_mask} on {m.role!r}"
                )


def _record_dict(record: SftRecord) -> dict:
    return {
        "id": record.id,
        "images": list(record.images),
        "conversations": [
            {"role": m.role, "content": m.content, "loss_mask": m.loss_mask}
            for m in record.conversations
        ],
        "meta": record.meta,
    }


def _chain_record(sample: DatasetSample, record_id: str, store: _ImageStore) -> SftRecord:
    chain = sample.chain
    assert chain is not None
    images = [store.put(chain.source.image_png)]
    conversations: list[SftMessage] = [
        SftMessage(
            "user", f"{IMAGE_PLACEHOLDER}\n{chain.source.question}", False
        )
    ]
    for i, round_ in enumerate(chain.rounds):
        turn_text = serialize_turn_output(
            TurnOutput(
                answer=round_.answer,
                reflection=round_.reflection,
                tool_call=round_.tool_call,
                round_index=i + 1,
            )
        )
        conversations.append(SftMessage("assistant", turn_text, True))
        if i + 1 < len(chain.rounds):
            # the image this round's tool call produced opens the next turn
            assert round_.marker_png is not None
            images.append(store.put(round_.marker_png))
            status = DEFAULT_TOOL_RESULT_TEXT.format(
                color=round_.tool_call.color.value,
                shape=round_.tool_call.shape.value,
                anchor=round_.tool_call.anchor,
            )
            conversations.append(
                SftMessage("user", f"{IMAGE_PLACEHOLDER}\n{status}", False)
            )
    return SftRecord(
        id=record_id,
        images=tuple(images),
        conversations=tuple(conversations),
        meta={
            "rounds": len(chain.rounds),
            "domain": chain.source.domain.value,
            "kind": sample.kind.value,
        },
    )


def _qa_record(sample: DatasetSample, record_id: str, store: _ImageStore) -> SftRecord:
    qa = sample.qa
    assert qa is not None
    return SftRecord(
        id=record_id,
        images=(store.put(qa.image_png),),
        conversations=(
            SftMessage("user", f"{IMAGE_PLACEHOLDER}\n{qa.question}", False),
            SftMessage("assistant", qa.answer, True),
        ),
        meta={"rounds": 1, "domain": qa.domain.value, "kind": sample.kind.value},
    )


def sample_to_sft(sample: DatasetSample, record_id: str, store: _ImageStore) -> SftRecord:
    if sample.kind is SampleKind.REFLECTIVE_CHAIN:
        return _chain_record(sample, record_id, store)
    return _qa_record(sample, record_id, store)


def export_sft(samples: Sequence[DatasetSample], out_dir) -> dict:
    """Write sft.jsonl plus its images and manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "sft.jsonl"
    store = _ImageStore(data_path)

    counts = {kind.value: 0 for kind in SampleKind}
    lines = []
    for i, sample in enumerate(samples):
        record = sample_to_sft(sample, f"{i:06d}-{sample.source_id}", store)
        counts[sample.kind.value] += 1
        lines.append(json.dumps(_record_dict(record), ensure_ascii=False))
    payload = "".join(line + "\n" for line in lines)
    data_path.write_text(payload, encoding="utf-8")

    manifest = {
        "total": len(lines),
        "counts": counts,
        "content_hash": "sha256:" + hashlib.sha256(payload.encode("utf-8")).hexdigest(),
        "files": {"data": data_path.name, "images": store.dir.name},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


def parse_sft_jsonl(path) -> list[SftRecord]:
    """Re-read an export; validates the schema invariants line by line."""
    records = []
    for line, obj in _read_jsonl(Path(path)):
        try:
            conversations = tuple(
                SftMessage(
                    role=str(m["role"]),
                    content=str(m["content"]),
                    loss_mask=bool(m["loss_mask"]),
                )
                for m in obj["conversations"]
            )
            records.append(
                SftRecord(
                    id=str(obj["id"]),
                    images=tuple(str(i) for i in obj["images"]),
                    conversations=conversations,
                    meta=dict(obj["meta"]),
                )
            )
        except SchemaViolation as exc:
            raise JsonlSchemaError(line, str(exc)) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise JsonlSchemaError(line, f"bad sft record: {exc}") from exc
    return records


# --- statistics ----------------------------------------------------------------

@dataclass(frozen=True)
class RoundHistogram:
    """Share of runs resolved in 1, 2, or 3+ rounds."""

    one: float
    two: float
    three_plus: float
    total: int

    def __post_init__(self):
        if self.total > 0 and abs(self.one + self.two + self.three_plus - 1.0) > 1e-9:
            raise ValueError("bucket fractions must sum to 1")

    def fractions(self) -> dict[str, float]:
        return {"1": self.one, "2": self.two, ">=3": self.three_plus}


def _turn_count(item) -> int:
    if isinstance(item, int):
        return item
    if isinstance(item, Trajectory):
        return item.rounds
    raise TypeError(f"expected Trajectory or int, got {type(item).__name__}")


def round_distribution(trajectories: Sequence) -> RoundHistogram:
    """Bucket runs by how many turns they took; fractions sum to one."""
    if not trajectories:
        raise EmptyInput("round_distribution needs at least one trajectory")
    counts = [0, 0, 0]
    for item in trajectories:
        n = _turn_count(item)
        if n <= 1:
            counts[0] += 1
        elif n == 2:
            counts[1] += 1
        else:
            counts[2] += 1
    total = len(trajectories)
    return RoundHistogram(
        one=counts[0] / total,
        two=counts[1] / total,
        three_plus=counts[2] / total,
        total=total,
    )


def render_round_table(hist: RoundHistogram) -> str:
    lines = ["rounds  share", "------  -----"]
    for label, frac in hist.fractions().items():
        lines.append(f"{label:>6}  {frac * 100:5.1f}%")
    lines.append(f"total   {hist.total}")
    return "\n".join(lines)


@dataclass(frozen=True)
class QualityRow:
    logic: float
    visual: float
    count: int


def _sample_text(sample: DatasetSample) -> tuple[str, str, str]:
    """(question, serialized content, ground truth) for judging."""
    if sample.kind is SampleKind.REFLECTIVE_CHAIN:
        chain = sample.chain
        assert chain is not None
        content = "\n\n".join(
            serialize_turn_output(
                TurnOutput(r.answer, r.reflection, r.tool_call, i + 1)
            )
            for i, r in enumerate(chain.rounds)
        )
        return chain.source.question, content, chain.source.ground_truth
    qa = sample.qa
    assert qa is not None
    return qa.question, qa.answer, qa.answer


def _rubric_score(backends: Backends, rubric: str, content: str, gt: str) -> int:
    score = backends.judge.score(rubric, content, gt).score
    if not 1 <= score <= 5:
        raise ContractViolation(f"judge returned {score}, rubric scale is 1..5")
    return score


def quality_report(
    subsets: dict[str, Sequence[DatasetSample]],
    backends: Backends,
    sample_size: int | None = None,
    seed: int = 0,
    templates: PromptTemplates | None = None,
) -> dict[str, QualityRow]:
    """Judge-scored logical coherence and visual validity means per subset."""
    tpl = templates or PromptTemplates()
    rows: dict[str, QualityRow] = {}
    for name, samples in subsets.items():
        samples = list(samples)
        if not samples:
            raise EmptyInput(f"subset {name!r} is empty")
        if sample_size is not None:
            if len(samples) < sample_size:
                raise ValueError(
                    f"subset {name!r} has {len(samples)} samples, "
                    f"{sample_size} requested"
                )
            samples = random.Random(seed).sample(samples, sample_size)
        logic_total = 0
        visual_total = 0
        for sample in samples:
            question, content, gt = _sample_text(sample)
            logic_total += _rubric_score(
                backends, tpl.logic_rubric.format(question=question), content, gt
            )
            visual_total += _rubric_score(
                backends, tpl.visual_rubric.format(question=question), content, gt
            )
        rows[name] = QualityRow(
            logic=logic_total / len(samples),
            visual=visual_total / len(samples),
            count=len(samples),
        )
    return rows


def render_quality_table(rows: dict[str, QualityRow]) -> str:
    width = max((len(n) for n in rows), default=6)
    width = max(width, len("subset"))
    lines = [
        f"{'subset':<{width}}  logic  visual  n",
        f"{'-' * width}  -----  ------  -",
    ]
    for name, row in rows.items():
        lines.append(
            f"{name:<{width}}  {row.logic:5.2f}  {row.visual:6.2f}  {row.count}"
        )
    return "\n".join(lines)


def render_funnel_table(counts) -> str:
    return "\n".join(
        [
            "stage              kept",
            "-----------------  ----",
            f"original           {counts.original:4d}",
            f"response_filtered  {counts.response_filtered:4d}",
            f"gt_filtered        {counts.gt_filtered:4d}",
        ]
    )
