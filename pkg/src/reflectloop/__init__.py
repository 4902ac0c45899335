"""Closed-loop visual reflection: a reasoning engine that verifies answers
against marked-up image regions, and a pipeline that builds the reflective
multi-turn training data the engine's behavior is distilled from.
"""

__version__ = "0.1.0"

from .protocol import (  # noqa: F401
    Color,
    ProtocolError,
    Shape,
    ToolCall,
    TurnOutput,
    parse_tool_call,
    parse_turn_output,
    serialize_tool_call,
    serialize_turn_output,
)
from .render import (  # noqa: F401
    Marker,
    MaskRLE,
    Point,
    VisualContext,
    compose_visual_context,
    render_markers,
    rle_decode,
    rle_encode,
)
from .backends import (  # noqa: F401
    BackendEndpoints,
    BackendError,
    Backends,
    ChatMessage,
    ContractViolation,
    TransportError,
    http_backends,
)
from .loop import (  # noqa: F401
    LoopConfig,
    Termination,
    Trajectory,
    persist_trajectory,
    run_trajectory,
    should_terminate,
)
from .pipeline import (  # noqa: F401
    DatasetSample,
    DialogueRecord,
    Domain,
    PipelineConfig,
    ReflectiveChain,
    SampleKind,
    SourceSample,
    adapt_trajectories,
    build_chain,
    convert_to_self_reflection,
    extract_keywords,
    filter_dialogue,
    inject_visual_caption,
    simulate_dialogue,
    verify_chain,
)
from .export import (  # noqa: F401
    RoundHistogram,
    SftRecord,
    export_sft,
    parse_sft_jsonl,
    quality_report,
    round_distribution,
)
