import base64

import pytest
from fastapi.testclient import TestClient

from reflectloop.config import AppConfig
from reflectloop.service import build_app

from test_loop import stop_turn, tool_turn


def app_config(chat_script, fixtures=None):
    spec = {
        "kind": "scripted",
        "chat_script": chat_script,
        "grounder_fixtures": fixtures or {},
    }
    return AppConfig(backends_spec=spec)


@pytest.fixture
def client(base_png):
    cfg = app_config(
        chat_script=[
            tool_turn("There are 2.", "recheck the back", "green cylinder"),
            stop_turn("There are 3."),
        ],
        fixtures={"green cylinder": [[0.62, 0.55]]},
    )
    return TestClient(build_app(cfg))


def b64(png: bytes) -> str:
    return base64.b64encode(png).decode("ascii")


def test_healthz(client):
    resp = client.get("/healthz")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert "version" in body


def test_reflect_happy_path(client, base_png):
    resp = client.post(
        "/v1/reflect", json={"image": b64(base_png), "question": "How many?"}
    )
    assert resp.status_code == 200
    doc = resp.json()
    assert doc["termination"] == "validated"
    assert doc["final_answer"] == "There are 3."
    assert len(doc["rounds"]) == 2
    # contexts come back inline as decodable base64 PNG
    png = base64.b64decode(doc["rounds"][1]["image"])
    assert png[:4] == b"\x89PNG"


def test_reflect_empty_question(client, base_png):
    resp = client.post("/v1/reflect", json={"image": b64(base_png), "question": "  "})
    assert resp.status_code == 400


def test_reflect_bad_base64(client):
    resp = client.post("/v1/reflect", json={"image": "not-base64!!!", "question": "q"})
    assert resp.status_code == 400


def test_reflect_non_png(client):
    resp = client.post(
        "/v1/reflect",
        json={"image": b64(b"just some bytes"), "question": "q"},
    )
    assert resp.status_code == 400


def test_reflect_config_override(base_png):
    cfg = app_config(chat_script=[tool_turn("2", "check", "mug")] * 3)
    client = TestClient(build_app(cfg))
    resp = client.post(
        "/v1/reflect",
        json={
            "image": b64(base_png),
            "question": "q",
            "config": {"max_rounds": 1},
        },
    )
    assert resp.status_code == 200
    assert resp.json()["termination"] == "round_cap"


def test_reflect_unknown_override(client, base_png):
    resp = client.post(
        "/v1/reflect",
        json={"image": b64(base_png), "question": "q", "config": {"rounds_max": 3}},
    )
    assert resp.status_code == 400
    assert "rounds_max" in resp.json()["detail"]


def test_reflect_backend_exhaustion_is_not_a_crash(base_png):
    cfg = app_config(chat_script=[])  # script empty: first request fails
    client = TestClient(build_app(cfg))
    resp = client.post("/v1/reflect", json={"image": b64(base_png), "question": "q"})
    assert resp.status_code == 200
    assert resp.json()["termination"] == "backend_error"
