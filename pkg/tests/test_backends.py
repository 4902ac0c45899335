import base64
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from reflectloop.backends import (
    BackendEndpoints,
    ChatMessage,
    ContractViolation,
    ImagePart,
    InvalidCoordinates,
    TextPart,
    TransportError,
    http_backends,
)
from reflectloop.contract import check_grounder, check_segmenter
from reflectloop.mocks import FixtureGrounder, StubSegmenter
from reflectloop.render import Point

ENDPOINTS = BackendEndpoints(
    chat_url="http://chat.test/v1/chat",
    grounder_url="http://grounder.test",
    segmenter_url="http://segmenter.test",
    judge_url="http://judge.test",
    model="test-model",
    timeout_s=1.0,
    max_retries=2,
)


class FakeResponse:
    def __init__(self, status_code=200, body=None, raw_text=""):
        self.status_code = status_code
        self._body = body
        self._raw_text = raw_text

    def json(self):
        if self._body is None:
            raise ValueError(f"not json: {self._raw_text!r}")
        return self._body


class FakeSession:
    """Replays a scripted list of responses/exceptions; records every post."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append({"url": url, "json": json, "timeout": timeout})
        step = self.script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


def backends_with(script):
    session = FakeSession(script)
    return http_backends(ENDPOINTS, session=session), session


class TestChatWire:
    def test_request_shape_and_reply(self):
        reply = FakeResponse(body={"choices": [{"message": {"content": "hi there"}}]})
        bundle, session = backends_with([reply])
        messages = [
            ChatMessage.text("system", "be brief"),
            ChatMessage(role="user", parts=(TextPart("what is this"), ImagePart(b"PNGBYTES"))),
        ]
        out = bundle.chat.complete(messages)
        assert out == "hi there"

        sent = session.calls[0]["json"]
        assert sent["model"] == "test-model"
        assert [m["role"] for m in sent["messages"]] == ["system", "user"]
        user_content = sent["messages"][1]["content"]
        assert user_content[0] == {"type": "text", "text": "what is this"}
        assert user_content[1]["type"] == "image"
        assert base64.b64decode(user_content[1]["data"]) == b"PNGBYTES"

    def test_missing_choices_is_contract_violation(self):
        bundle, _ = backends_with([FakeResponse(body={"result": "nope"})])
        with pytest.raises(ContractViolation):
            bundle.chat.complete([ChatMessage.text("user", "q")])

    def test_empty_choices_is_contract_violation(self):
        bundle, _ = backends_with([FakeResponse(body={"choices": []})])
        with pytest.raises(ContractViolation):
            bundle.chat.complete([ChatMessage.text("user", "q")])


class TestGrounderWire:
    def test_request_and_parse(self):
        reply = FakeResponse(body={"points": [{"x": 0.25, "y": 0.75}]})
        bundle, session = backends_with([reply])
        points = bundle.grounder.ground(b"IMG", "green cylinder")
        assert points == [Point(0.25, 0.75)]
        call = session.calls[0]
        assert call["url"] == "http://grounder.test/ground"
        assert call["json"]["query"] == "green cylinder"
        assert base64.b64decode(call["json"]["image"]) == b"IMG"

    def test_empty_points_ok(self):
        bundle, _ = backends_with([FakeResponse(body={"points": []})])
        assert bundle.grounder.ground(b"IMG", "nothing") == []

    def test_out_of_range_point_rejected(self):
        bundle, _ = backends_with([FakeResponse(body={"points": [{"x": 1.2, "y": 0.5}]})])
        with pytest.raises(InvalidCoordinates):
            bundle.grounder.ground(b"IMG", "q")

    def test_negative_point_rejected(self):
        bundle, _ = backends_with([FakeResponse(body={"points": [{"x": 0.2, "y": -0.1}]})])
        with pytest.raises(InvalidCoordinates):
            bundle.grounder.ground(b"IMG", "q")

    def test_points_not_a_list(self):
        bundle, _ = backends_with([FakeResponse(body={"points": "oops"})])
        with pytest.raises(ContractViolation):
            bundle.grounder.ground(b"IMG", "q")


class TestSegmenterWire:
    def test_request_and_parse(self):
        body = {
            "width": 4,
            "height": 2,
            "runs": [2, 3, 3],
            "box": {"x0": 1, "y0": 0, "x1": 3, "y1": 1},
        }
        bundle, session = backends_with([FakeResponse(body=body)])
        result = bundle.segmenter.segment(b"IMG", [Point(0.5, 0.5)])
        assert result.mask.runs == (2, 3, 3)
        assert result.box == (1, 0, 3, 1)
        call = session.calls[0]
        assert call["url"] == "http://segmenter.test/segment"
        assert call["json"]["points"] == [{"x": 0.5, "y": 0.5}]

    def test_run_sum_mismatch_rejected(self):
        body = {"width": 4, "height": 2, "runs": [2, 3], "box": {"x0": 0, "y0": 0, "x1": 1, "y1": 1}}
        bundle, _ = backends_with([FakeResponse(body=body)])
        with pytest.raises(ContractViolation):
            bundle.segmenter.segment(b"IMG", [Point(0.5, 0.5)])

    def test_non_integer_runs_rejected(self):
        body = {"width": 2, "height": 2, "runs": [1.0, 3.0], "box": {"x0": 0, "y0": 0, "x1": 1, "y1": 1}}
        bundle, _ = backends_with([FakeResponse(body=body)])
        with pytest.raises(ContractViolation):
            bundle.segmenter.segment(b"IMG", [Point(0.5, 0.5)])


class TestJudgeWire:
    def test_score(self):
        bundle, session = backends_with(
            [FakeResponse(body={"score": 7, "rationale": "close"})]
        )
        verdict = bundle.judge.score("q", "a", "gt")
        assert verdict.score == 7 and verdict.rationale == "close"
        call = session.calls[0]
        assert call["url"] == "http://judge.test/score"
        assert call["json"] == {"question": "q", "candidate_answer": "a", "ground_truth": "gt"}

    def test_score_out_of_range(self):
        bundle, _ = backends_with([FakeResponse(body={"score": 11, "rationale": ""})])
        with pytest.raises(ContractViolation):
            bundle.judge.score("q", "a", "gt")

    def test_score_boolean_rejected(self):
        bundle, _ = backends_with([FakeResponse(body={"score": True, "rationale": ""})])
        with pytest.raises(ContractViolation):
            bundle.judge.score("q", "a", "gt")

    def test_consistency(self):
        bundle, session = backends_with(
            [FakeResponse(body={"consistent": True, "rationale": "marker matches"})]
        )
        verdict = bundle.judge.consistency(b"IMG", "I see the marked region")
        assert verdict.consistent is True
        assert session.calls[0]["url"] == "http://judge.test/consistency"


class TestRetryPolicy:
    def test_retries_5xx_then_succeeds(self):
        script = [
            FakeResponse(status_code=503),
            FakeResponse(status_code=500),
            FakeResponse(body={"points": []}),
        ]
        bundle, session = backends_with(script)
        assert bundle.grounder.ground(b"IMG", "q") == []
        assert len(session.calls) == 3

    def test_retries_timeouts(self):
        script = [requests.Timeout("slow"), FakeResponse(body={"points": []})]
        bundle, session = backends_with(script)
        assert bundle.grounder.ground(b"IMG", "q") == []
        assert len(session.calls) == 2

    def test_transport_error_carries_attempt_count(self):
        script = [requests.ConnectionError("down")] * 3
        bundle, session = backends_with(script)
        with pytest.raises(TransportError) as exc:
            bundle.grounder.ground(b"IMG", "q")
        assert exc.value.attempts == 3  # max_retries=2 means 3 attempts total
        assert len(session.calls) == 3

    def test_4xx_never_retried(self):
        bundle, session = backends_with([FakeResponse(status_code=400)])
        with pytest.raises(ContractViolation):
            bundle.grounder.ground(b"IMG", "q")
        assert len(session.calls) == 1

    def test_malformed_json_never_retried(self):
        bundle, session = backends_with([FakeResponse(body=None, raw_text="<html>")])
        with pytest.raises(ContractViolation):
            bundle.grounder.ground(b"IMG", "q")
        assert len(session.calls) == 1

    def test_non_object_reply_never_retried(self):
        bundle, session = backends_with([FakeResponse(body=[1, 2, 3])])
        with pytest.raises(ContractViolation):
            bundle.grounder.ground(b"IMG", "q")
        assert len(session.calls) == 1


class TestInFlightCap:
    def test_concurrent_requests_capped(self):
        lock = threading.Lock()
        live = {"now": 0, "peak": 0}

        class SlowSession:
            def post(self, url, json=None, timeout=None):
                with lock:
                    live["now"] += 1
                    live["peak"] = max(live["peak"], live["now"])
                time.sleep(0.02)
                with lock:
                    live["now"] -= 1
                return FakeResponse(body={"points": []})

        endpoints = BackendEndpoints(
            chat_url="http://c", grounder_url="http://g", segmenter_url="http://s",
            judge_url="http://j", max_in_flight=2,
        )
        bundle = http_backends(endpoints, session=SlowSession())
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: bundle.grounder.ground(b"I", "q"), range(16)))
        assert live["peak"] <= 2


class TestMockConformance:
    """The deterministic stand-ins obey the same behavioral contract."""

    def test_fixture_grounder(self, base_png):
        grounder = FixtureGrounder({"red cup": [Point(0.42, 0.61)]})
        check_grounder(
            grounder, base_png, "red cup", expected_points=[(0.42, 0.61)]
        )

    def test_stub_segmenter(self, base_png):
        segmenter = StubSegmenter(side=6, width=100, height=100)
        check_segmenter(segmenter, base_png, [Point(0.5, 0.5)])
