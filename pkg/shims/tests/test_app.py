"""Endpoint behavior through the in-process test client."""

import base64
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from model_shims import ShimConfig, ShimConfigError, build_app, load_fixtures
from reflectloop.pngio import encode_png


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


PNG = make_png()
PNG_B64 = base64.b64encode(PNG).decode("ascii")


@pytest.fixture
def client(tmp_path):
    fixtures = tmp_path / "fixtures.json"
    fixtures.write_text(json.dumps({"red cup": [[0.42, 0.61]]}), encoding="utf-8")
    config = ShimConfig(mode="stub", fixture_path=str(fixtures))
    return TestClient(build_app(config))


class TestHealth:
    def test_healthz(self, client):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["mode"] == "stub"
        assert "version" in body


class TestGround:
    def test_known_anchor(self, client):
        resp = client.post("/ground", json={"image": PNG_B64, "query": "red cup"})
        assert resp.status_code == 200
        assert resp.json() == {"points": [{"x": 0.42, "y": 0.61}]}

    def test_unknown_anchor_is_empty_not_error(self, client):
        resp = client.post("/ground", json={"image": PNG_B64, "query": "unicorn"})
        assert resp.status_code == 200
        assert resp.json() == {"points": []}

    def test_missing_image_is_400(self, client):
        assert client.post("/ground", json={"query": "red cup"}).status_code == 400

    def test_bad_base64_is_400(self, client):
        resp = client.post("/ground", json={"image": "&&&", "query": "red cup"})
        assert resp.status_code == 400

    def test_non_png_payload_is_400(self, client):
        blob = base64.b64encode(b"just some bytes").decode("ascii")
        resp = client.post("/ground", json={"image": blob, "query": "red cup"})
        assert resp.status_code == 400

    def test_non_object_body_is_400(self, client):
        resp = client.post("/ground", content=b"[1, 2]",
                           headers={"content-type": "application/json"})
        assert resp.status_code == 400

    def test_unparseable_body_is_400(self, client):
        resp = client.post("/ground", content=b"{nope",
                           headers={"content-type": "application/json"})
        assert resp.status_code == 400

    def test_missing_query_is_400(self, client):
        assert client.post("/ground", json={"image": PNG_B64}).status_code == 400


class TestSegment:
    def test_square_mask_matches_image_dims(self, client):
        resp = client.post(
            "/segment",
            json={"image": PNG_B64, "points": [{"x": 0.5, "y": 0.5}]},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["width"] == 64
        assert body["height"] == 48
        assert sum(body["runs"]) == 64 * 48
        assert body["empty"] is False
        box = body["box"]
        # default side 4 centered near (32, 24)
        assert box == {"x0": 30, "y0": 22, "x1": 33, "y1": 25}

    def test_identical_requests_identical_replies(self, client):
        payload = {"image": PNG_B64, "points": [{"x": 0.3, "y": 0.9}]}
        first = client.post("/segment", json=payload)
        second = client.post("/segment", json=payload)
        assert first.json() == second.json()

    def test_corner_point_clips_to_bounds(self, client):
        resp = client.post(
            "/segment",
            json={"image": PNG_B64, "points": [{"x": 1.0, "y": 1.0}]},
        )
        body = resp.json()
        assert body["box"]["x1"] == 63
        assert body["box"]["y1"] == 47
        assert sum(body["runs"]) == 64 * 48

    def test_zero_points_is_400(self, client):
        resp = client.post("/segment", json={"image": PNG_B64, "points": []})
        assert resp.status_code == 400

    def test_out_of_range_point_is_400(self, client):
        resp = client.post(
            "/segment",
            json={"image": PNG_B64, "points": [{"x": 1.5, "y": 0.5}]},
        )
        assert resp.status_code == 400

    def test_missing_image_is_400(self, client):
        resp = client.post("/segment", json={"points": [{"x": 0.5, "y": 0.5}]})
        assert resp.status_code == 400

    def test_side_zero_marks_empty(self):
        config = ShimConfig(mode="stub", segment_side=0)
        local = TestClient(build_app(config))
        resp = local.post(
            "/segment",
            json={"image": PNG_B64, "points": [{"x": 0.5, "y": 0.5}]},
        )
        body = resp.json()
        assert body["empty"] is True
        assert body["runs"] == [64 * 48]
        assert body["box"] == {"x0": 0, "y0": 0, "x1": 0, "y1": 0}


class TestRealMode:
    def test_endpoints_503_until_adapters_arrive(self):
        local = TestClient(build_app(ShimConfig(mode="real")))
        assert local.get("/healthz").status_code == 200
        resp = local.post("/ground", json={"image": PNG_B64, "query": "x"})
        assert resp.status_code == 503
        resp = local.post(
            "/segment", json={"image": PNG_B64, "points": [{"x": 0.5, "y": 0.5}]}
        )
        assert resp.status_code == 503

    def test_injected_adapter_serves(self):
        class OnePoint:
            def ground(self, image_png, query):
                return [(0.25, 0.75)]

        local = TestClient(build_app(ShimConfig(mode="real"), grounder=OnePoint()))
        resp = local.post("/ground", json={"image": PNG_B64, "query": "anything"})
        assert resp.json() == {"points": [{"x": 0.25, "y": 0.75}]}


class TestConfig:
    def test_stub_must_not_name_models(self):
        with pytest.raises(ShimConfigError):
            ShimConfig(mode="stub", grounder_model="some-checkpoint")

    def test_real_must_not_read_fixtures(self):
        with pytest.raises(ShimConfigError):
            ShimConfig(mode="real", fixture_path="f.json")

    def test_bad_mode(self):
        with pytest.raises(ShimConfigError):
            ShimConfig(mode="proxy")

    def test_bad_bind(self):
        with pytest.raises(ShimConfigError):
            ShimConfig(bind="localhost")

    def test_negative_side(self):
        with pytest.raises(ShimConfigError):
            ShimConfig(segment_side=-1)

    def test_fixture_point_out_of_range(self, tmp_path):
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"cup": [[1.2, 0.5]]}), encoding="utf-8")
        with pytest.raises(ShimConfigError):
            load_fixtures(str(path))

    def test_fixture_malformed_pair(self, tmp_path):
        path = tmp_path / "f.json"
        path.write_text(json.dumps({"cup": [[0.5]]}), encoding="utf-8")
        with pytest.raises(ShimConfigError):
            load_fixtures(str(path))

    def test_no_fixture_file_means_no_anchors(self):
        assert load_fixtures(None) == {}
