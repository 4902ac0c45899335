"""Configuration document loading.

One YAML (or JSON) file configures everything an invocation needs:

    backends:
      kind: http            # or: scripted
      chat_url: http://localhost:8001/v1/chat/completions
      grounder_url: http://localhost:8002
      segmenter_url: http://localhost:8003
      judge_url: http://localhost:8004
      model: my-vlm
    loop:
      max_rounds: 5
      overlay_mode: fresh
    pipeline:
      rho: 0.75
      seed: 0

``kind: scripted`` builds the deterministic in-process backends instead,
with inline scripts and fixtures, so every command can run without any
service. When no --config flag is given, the MIRROR_CONFIG environment
variable may supply the path.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backends import BackendEndpoints, Backends, http_backends
from .loop import (
    GroundingFailurePolicy,
    LoopConfig,
    MalformedPolicy,
)
from .mocks import FixtureGrounder, ScriptedChatBackend, StubJudge, StubSegmenter
from .pipeline import Domain, PipelineConfig, PromptTemplates
from .protocol import Color, Shape
from .render import Point

CONFIG_ENV_VAR = "MIRROR_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    loop: LoopConfig = field(default_factory=LoopConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    backends_spec: dict | None = None
    raw: dict = field(default_factory=dict)

    def make_backends(self) -> Backends:
        if self.backends_spec is None:
            raise ConfigError(
                "this command needs backends; add a 'backends' section to "
                "the config file (or set MIRROR_CONFIG)"
            )
        return _build_backends(self.backends_spec)


def _expect_mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a mapping")
    return value


def _enum(cls, value, where: str):
    try:
        return cls(value)
    except ValueError:
        valid = ", ".join(e.value for e in cls)
        raise ConfigError(f"{where}: {value!r} is not one of: {valid}") from None


def _loop_config(section: dict) -> LoopConfig:
    kwargs: dict = {}
    if "max_rounds" in section:
        kwargs["max_rounds"] = int(section["max_rounds"])
    if "overlay_mode" in section:
        kwargs["overlay_mode"] = str(section["overlay_mode"])
    if "on_empty_grounding" in section:
        kwargs["on_empty_grounding"] = _enum(
            GroundingFailurePolicy,
            section["on_empty_grounding"],
            "loop.on_empty_grounding",
        )
    if "on_malformed" in section:
        kwargs["on_malformed"] = _enum(
            MalformedPolicy, section["on_malformed"], "loop.on_malformed"
        )
    if "resend_all_images" in section:
        kwargs["resend_all_images"] = bool(section["resend_all_images"])
    if "color_cycle" in section:
        kwargs["color_cycle"] = tuple(
            _enum(Color, c, "loop.color_cycle") for c in section["color_cycle"]
        )
    for key in ("system_prompt", "malformed_feedback", "tool_result_text"):
        if key in section:
            kwargs[key] = str(section[key])
    try:
        return LoopConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"loop: {exc}") from exc


def _templates(section: dict) -> PromptTemplates:
    known = {f.name for f in dataclasses.fields(PromptTemplates)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"pipeline.templates: unknown keys {sorted(unknown)}")
    return PromptTemplates(**{k: str(v) for k, v in section.items()})


def _pipeline_config(section: dict) -> PipelineConfig:
    kwargs: dict = {}
    if "rho" in section:
        kwargs["rho"] = float(section["rho"])
    if "seed" in section:
        kwargs["seed"] = int(section["seed"])
    if "dense_domains" in section:
        kwargs["dense_domains"] = frozenset(
            _enum(Domain, d, "pipeline.dense_domains")
            for d in section["dense_domains"]
        )
    if "marker_colors" in section:
        kwargs["marker_colors"] = tuple(
            _enum(Color, c, "pipeline.marker_colors")
            for c in section["marker_colors"]
        )
    if "marker_shape" in section:
        kwargs["marker_shape"] = _enum(
            Shape, section["marker_shape"], "pipeline.marker_shape"
        )
    if "max_teacher_rounds" in section:
        kwargs["max_teacher_rounds"] = int(section["max_teacher_rounds"])
    if "workers" in section:
        kwargs["workers"] = int(section["workers"])
    if "templates" in section:
        kwargs["templates"] = _templates(
            _expect_mapping(section["templates"], "pipeline.templates")
        )
    try:
        return PipelineConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"pipeline: {exc}") from exc


def _build_http(section: dict) -> Backends:
    missing = [
        k
        for k in ("chat_url", "grounder_url", "segmenter_url", "judge_url")
        if k not in section
    ]
    if missing:
        raise ConfigError(f"backends: missing {', '.join(missing)}")
    endpoints = BackendEndpoints(
        chat_url=str(section["chat_url"]),
        grounder_url=str(section["grounder_url"]),
        segmenter_url=str(section["segmenter_url"]),
        judge_url=str(section["judge_url"]),
        model=str(section.get("model", "default")),
        timeout_s=float(section.get("timeout_s", 60.0)),
        max_retries=int(section.get("max_retries", 2)),
        max_in_flight=int(section.get("max_in_flight", 4)),
    )
    return http_backends(endpoints)


def _build_scripted(section: dict) -> Backends:
    fixtures = {}
    for anchor, points in _expect_mapping(
        section.get("grounder_fixtures"), "backends.grounder_fixtures"
    ).items():
        fixtures[str(anchor)] = [Point(float(p[0]), float(p[1])) for p in points]
    seg = _expect_mapping(section.get("segmenter"), "backends.segmenter")
    judge = StubJudge(
        score_script=[int(s) for s in section.get("judge_scores", [])],
        inconsistent_substrings=[
            str(s) for s in section.get("inconsistent_reflections", [])
        ],
    )
    teacher_script = section.get("teacher_script")
    return Backends(
        chat=ScriptedChatBackend([str(s) for s in section.get("chat_script", [])]),
        grounder=FixtureGrounder(fixtures),
        segmenter=StubSegmenter(
            side=int(seg.get("side", 2)),
            width=int(seg.get("width", 100)),
            height=int(seg.get("height", 100)),
        ),
        judge=judge,
        teacher_chat=(
            ScriptedChatBackend([str(s) for s in teacher_script])
            if teacher_script is not None
            else None
        ),
    )


def _build_backends(section: dict) -> Backends:
    kind = section.get("kind", "http")
    if kind == "http":
        return _build_http(section)
    if kind == "scripted":
        return _build_scripted(section)
    raise ConfigError(f"backends.kind: {kind!r} is not 'http' or 'scripted'")


def load_config(path: str | os.PathLike | None = None) -> AppConfig:
    """Load the config document; falls back to $MIRROR_CONFIG, then defaults."""
    if path is None:
        env = os.environ.get(CONFIG_ENV_VAR)
        path = env if env else None
    if path is None:
        return AppConfig()

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {p} does not parse: {exc}") from exc
    raw = _expect_mapping(raw, "config document")

    known = {"backends", "loop", "pipeline"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"config: unknown top-level keys {sorted(unknown)}")

    backends_spec = raw.get("backends")
    if backends_spec is not None:
        backends_spec = _expect_mapping(backends_spec, "backends")
        _build_backends(backends_spec)  # validate eagerly, fail at load time
    return AppConfig(
        loop=_loop_config(_expect_mapping(raw.get("loop"), "loop")),
        pipeline=_pipeline_config(_expect_mapping(raw.get("pipeline"), "pipeline")),
        backends_spec=backends_spec,
        raw=raw,
    )
