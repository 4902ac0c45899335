"""Entry point: parse flags, build the app, serve it."""

from __future__ import annotations

import argparse
import sys

import uvicorn

from . import __version__
from .app import build_app
from .config import ShimConfig, ShimConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="model-shims")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--mode", choices=["stub", "real"], default="stub")
    parser.add_argument("--fixtures", help="JSON fixture file (stub mode)")
    parser.add_argument("--bind", default="127.0.0.1:9100")
    parser.add_argument("--segment-side", type=int, default=4, dest="segment_side")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ShimConfig(
            mode=args.mode,
            fixture_path=args.fixtures,
            bind=args.bind,
            segment_side=args.segment_side,
        )
        app = build_app(config)
    except (ShimConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    host, _, port = config.bind.rpartition(":")
    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
