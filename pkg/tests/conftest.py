import numpy as np
import pytest

from reflectloop.pngio import encode_png
from reflectloop.protocol import Color, Shape, ToolCall


def gradient_rgb(width: int, height: int, phase: int = 0) -> np.ndarray:
    """Deterministic non-uniform test image; every pixel differs from its row/col neighbors."""
    y = np.arange(height, dtype=np.uint32)[:, None]
    x = np.arange(width, dtype=np.uint32)[None, :]
    r = (x * 3 + y + phase) % 256
    g = (x + y * 5 + 2 * phase) % 256
    b = (x * 7 + y * 11 + 3 * phase) % 256
    return np.stack([r, g, b], axis=-1).astype(np.uint8)


@pytest.fixture
def base_rgb() -> np.ndarray:
    return gradient_rgb(100, 100)


@pytest.fixture
def base_png(base_rgb) -> bytes:
    return encode_png(base_rgb)


def make_call(flag=True, anchor="green cylinder", color=Color.BLUE, shape=Shape.CIRCLE) -> ToolCall:
    return ToolCall(flag=flag, anchor=anchor, color=color, shape=shape)


def turn_text(answer: str, reflection: str | None = None, call: ToolCall | None = None) -> str:
    from reflectloop.protocol import TurnOutput, serialize_turn_output

    return serialize_turn_output(
        TurnOutput(answer=answer, reflection=reflection, tool_call=call, round_index=1)
    )
