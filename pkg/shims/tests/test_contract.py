"""Backend-client conformance against the stub shims over real HTTP.

The checks come from reflectloop.contract and run unmodified: the
reflectloop HTTP clients talk to a live uvicorn server on a loopback
port, so the wire format is exercised end to end, not just in-process.
"""

import json
import threading
import time

import numpy as np
import pytest
import uvicorn

from model_shims import ShimConfig, build_app
from reflectloop.backends import BackendEndpoints, http_backends
from reflectloop.contract import check_grounder, check_health, check_segmenter
from reflectloop.pngio import encode_png
from reflectloop.render import Point


def make_png(width=64, height=48):
    x = np.arange(width)
    y = np.arange(height)[:, None]
    rgb = np.stack(
        [np.broadcast_to((x * 3 + y) % 256, (height, width)),
         np.broadcast_to((x + y * 5) % 256, (height, width)),
         np.broadcast_to((x * 7 + y * 11) % 256, (height, width))],
        axis=2,
    ).astype(np.uint8)
    return encode_png(rgb)


@pytest.fixture(scope="module")
def base_url(tmp_path_factory):
    fixtures = tmp_path_factory.mktemp("shim") / "fixtures.json"
    fixtures.write_text(
        json.dumps({"red cup": [[0.42, 0.61]], "two mugs": [[0.2, 0.3], [0.7, 0.8]]}),
        encoding="utf-8",
    )
    app = build_app(ShimConfig(mode="stub", fixture_path=str(fixtures)))
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("shim server did not start within 10s")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


@pytest.fixture(scope="module")
def backends(base_url):
    endpoints = BackendEndpoints(
        chat_url=base_url,  # unused by these checks
        grounder_url=base_url,
        segmenter_url=base_url,
        judge_url=base_url,  # unused by these checks
        timeout_s=10.0,
        max_retries=0,
    )
    return http_backends(endpoints)


def test_grounder_conformance(backends):
    check_grounder(
        backends.grounder,
        make_png(),
        known_anchor="red cup",
        expected_points=[(0.42, 0.61)],
    )


def test_grounder_multi_point_anchor(backends):
    points = backends.grounder.ground(make_png(), "two mugs")
    assert points == [Point(0.2, 0.3), Point(0.7, 0.8)]


def test_segmenter_conformance(backends):
    check_segmenter(backends.segmenter, make_png(), [Point(0.4, 0.6)])
    check_segmenter(
        backends.segmenter, make_png(100, 100), [Point(0.0, 0.0), Point(1.0, 1.0)]
    )


def test_health_conformance(base_url):
    check_health(base_url)
