"""Backend contract: mock determinism, transcript replay, remote retry
behavior against a scripted local endpoint, and request serialization."""
from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import chat_reply
from geomapqa.backend import (
    BackendError,
    CompletionRequest,
    ImageAttachment,
    NullBackend,
    OracleBackend,
    PayloadError,
    RemoteBackend,
    ScriptedBackend,
)
from geomapqa.core import AnswerValue, BBox, BenchItem, LonLatRange, MapMetadata


def small_request(**kwargs) -> CompletionRequest:
    return CompletionRequest(system="sys", instruction="hello", **kwargs)


class TestRequests:
    def test_validation(self):
        with pytest.raises(ValueError):
            CompletionRequest(system="s", instruction="i", max_tokens=0)
        with pytest.raises(ValueError):
            CompletionRequest(system="s", instruction="i", temperature=-0.5)

    def test_defaults_match_evaluation_settings(self):
        req = small_request()
        assert (req.temperature, req.seed, req.max_tokens) == (0.0, 42, 2048)

    def test_serialization_round_trip(self):
        image = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
        req = CompletionRequest(
            system="s",
            instruction="i",
            images=(ImageAttachment.from_array("m0:title", image),),
            temperature=0.5,
            seed=7,
            max_tokens=128,
            json_mode=True,
        )
        assert CompletionRequest.from_dict(req.to_dict()) == req

    def test_attachment_pixels_survive(self):
        image = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
        att = ImageAttachment.from_array("x", image)
        assert np.array_equal(att.to_array(), image)


class TestScripted:
    def test_replays_verbatim(self):
        backend = ScriptedBackend(["first", "second"])
        assert backend.complete(small_request()) == "first"
        assert backend.complete(small_request()) == "second"

    def test_exhaustion(self):
        backend = ScriptedBackend(["only"])
        backend.complete(small_request())
        with pytest.raises(BackendError, match="exhausted"):
            backend.complete(small_request())

    def test_cycle(self):
        backend = ScriptedBackend(["a", "b"], cycle=True)
        assert [backend.complete(small_request()) for _ in range(4)] == ["a", "b", "a", "b"]

    def test_exception_entries_raise(self):
        backend = ScriptedBackend([BackendError("boom"), "ok"])
        with pytest.raises(BackendError, match="boom"):
            backend.complete(small_request())
        assert backend.complete(small_request()) == "ok"

    def test_determinism_across_instances(self):
        reqs = [small_request() for _ in range(3)]
        a = ScriptedBackend(["x", "y", "z"])
        b = ScriptedBackend(["x", "y", "z"])
        assert [a.complete(r) for r in reqs] == [b.complete(r) for r in reqs]


class TestNull:
    def test_always_fails(self):
        with pytest.raises(BackendError):
            NullBackend().complete(small_request())


class TestRemote:
    def test_requires_base_url(self, monkeypatch):
        monkeypatch.delenv("MODEL_BASE_URL", raising=False)
        with pytest.raises(ValueError, match="MODEL_BASE_URL"):
            RemoteBackend()

    def test_success_and_body_shape(self, fake_endpoint):
        fake_endpoint.script(chat_reply("pong"))
        backend = RemoteBackend(base_url=fake_endpoint.base_url, api_key="k", sleep=lambda s: None)
        image = np.zeros((2, 2, 3), dtype=np.uint8)
        req = CompletionRequest(
            system="sys", instruction="ping",
            images=(ImageAttachment.from_array("m:full", image),), json_mode=True,
        )
        assert backend.complete(req) == "pong"
        path, body = fake_endpoint.requests[-1]
        assert path == "/chat/completions"
        assert body["messages"][0] == {"role": "system", "content": "sys"}
        parts = body["messages"][1]["content"]
        assert parts[0] == {"type": "text", "text": "ping"}
        assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")
        assert body["response_format"] == {"type": "json_object"}
        assert (body["temperature"], body["seed"], body["max_tokens"]) == (0.0, 42, 2048)

    def test_json_mode_fallback_suffix(self, fake_endpoint):
        fake_endpoint.script(chat_reply("ok"))
        backend = RemoteBackend(
            base_url=fake_endpoint.base_url, json_mode_supported=False, sleep=lambda s: None
        )
        backend.complete(CompletionRequest(system="s", instruction="do it", json_mode=True))
        _, body = fake_endpoint.requests[-1]
        assert body["messages"][1]["content"][0]["text"].endswith("Respond with JSON only.")
        assert "response_format" not in body

    def test_transient_failures_then_success(self, fake_endpoint):
        fake_endpoint.script(
            (500, {"error": "flaky"}), (500, {"error": "flaky"}), chat_reply("recovered")
        )
        backend = RemoteBackend(base_url=fake_endpoint.base_url, sleep=lambda s: None)
        assert backend.complete(small_request()) == "recovered"
        assert backend.telemetry[-1] == {"kind": "remote", "attempts": 3, "ok": True}

    def test_retry_budget_exhausted(self, fake_endpoint):
        fake_endpoint.script((500, {"error": "down"}))
        backend = RemoteBackend(base_url=fake_endpoint.base_url, sleep=lambda s: None)
        with pytest.raises(BackendError, match="after 3 attempts"):
            backend.complete(small_request())

    def test_non_transient_http_error_fails_fast(self, fake_endpoint):
        fake_endpoint.script((403, {"error": "denied"}))
        backend = RemoteBackend(base_url=fake_endpoint.base_url, sleep=lambda s: None)
        with pytest.raises(BackendError, match="403"):
            backend.complete(small_request())
        assert len(fake_endpoint.requests) == 1

    def test_payload_limit_precedes_network(self, fake_endpoint):
        backend = RemoteBackend(
            base_url=fake_endpoint.base_url, max_payload_bytes=100, sleep=lambda s: None
        )
        big = ImageAttachment(name="big", png=b"x" * 1000)
        with pytest.raises(PayloadError):
            backend.complete(CompletionRequest(system="s", instruction="i", images=(big,)))
        assert fake_endpoint.requests == []


def oracle_fixture() -> tuple[OracleBackend, BenchItem, MapMetadata]:
    from geomapqa.core import Component, LegendUnit

    meta = MapMetadata(
        sheet_name="Oracle Quadrangle",
        scale="1:24000",
        lonlat=LonLatRange(-105.0, -104.0, 37.0, 38.0),
        neighbors=("East Sheet",),
        components=(Component("title", BBox(0, 0, 10, 10)),),
        legend_units=(
            LegendUnit(BBox(20, 5, 60, 15), BBox(2, 5, 18, 15), "Gray limestone", (93, 28, 28)),
        ),
        language="English",
    )
    item = BenchItem(
        id="m0:sheet_name:000", map_id="m0", ability="extracting", task="sheet_name",
        qtype="FITB", question_text="What is the name of this map?",
        ground_truth=AnswerValue.text("Oracle Quadrangle"),
    )
    return OracleBackend({"m0": meta}, [item]), item, meta


class TestOracle:
    def test_qa_answers_ground_truth(self):
        oracle, item, _ = oracle_fixture()
        image = np.zeros((4, 4, 3), dtype=np.uint8)
        req = CompletionRequest(
            system="s",
            instruction=f"Question:\n{item.question_text}\nAnswer: ",
            images=(ImageAttachment.from_array("m0:full", image),),
        )
        doc = json.loads(oracle.complete(req))
        assert doc["answer"] == "Oracle Quadrangle"

    def test_ocr_by_attachment_coordinates(self):
        oracle, _, meta = oracle_fixture()
        crop = np.zeros((4, 4, 3), dtype=np.uint8)
        req = CompletionRequest(
            system="s",
            instruction="Only output the OCR result of the given image.",
            images=(ImageAttachment.from_array("m0:legend_text:20:5", crop),),
        )
        assert oracle.complete(req) == "Gray limestone"

    def test_judge_prompt_constant_choice(self):
        oracle, _, _ = oracle_fixture()
        req = CompletionRequest(
            system="s",
            instruction="Please evaluate which of the two answers below is better ...",
        )
        assert json.loads(oracle.complete(req)) == {"answer": "C"}

    def test_identical_questions_with_different_shuffles(self):
        # same question text, independently shuffled choices: the oracle must
        # answer each item with its own correct label
        from geomapqa.core import Choice
        from geomapqa.peqa import render_question

        _, _, meta = oracle_fixture()
        question = "Is there a fault in the grid located in the Center direction?"
        first = BenchItem(
            id="m0:fault_existence:000", map_id="m0", ability="reasoning",
            task="fault_existence", qtype="MCQ", question_text=question,
            choices=(Choice("A", "Yes"), Choice("B", "No"), Choice("C", "c"), Choice("D", "d")),
            ground_truth=AnswerValue.choice("B"),
        )
        second = BenchItem(
            id="m0:fault_existence:001", map_id="m0", ability="reasoning",
            task="fault_existence", qtype="MCQ", question_text=question,
            choices=(Choice("A", "c"), Choice("B", "d"), Choice("C", "No"), Choice("D", "Yes")),
            ground_truth=AnswerValue.choice("C"),
        )
        oracle = OracleBackend({"m0": meta}, [first, second])
        image = np.zeros((4, 4, 3), dtype=np.uint8)
        for item, expected in ((first, "B"), (second, "C")):
            req = CompletionRequest(
                system="s",
                instruction=f"Question:\n{render_question(item)}\nAnswer: ",
                images=(ImageAttachment.from_array("m0:full", image),),
            )
            assert json.loads(oracle.complete(req))["answer"] == expected

    def test_determinism(self):
        oracle, item, _ = oracle_fixture()
        image = np.zeros((4, 4, 3), dtype=np.uint8)
        req = CompletionRequest(
            system="s",
            instruction=f"Question:\n{item.question_text}\nAnswer: ",
            images=(ImageAttachment.from_array("m0:full", image),),
        )
        assert oracle.complete(req) == oracle.complete(req)
