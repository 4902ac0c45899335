"""HTTP shims that put grounding and segmentation models behind the
reflectloop backend wire format."""

__version__ = "0.1.0"

from .config import ShimConfig, ShimConfigError, load_fixtures  # noqa: E402
from .app import StubGrounder, StubSegmenter, build_app  # noqa: E402

__all__ = [
    "ShimConfig",
    "ShimConfigError",
    "StubGrounder",
    "StubSegmenter",
    "build_app",
    "load_fixtures",
]
