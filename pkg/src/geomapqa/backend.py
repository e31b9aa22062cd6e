"""Multimodal chat-completion backends.

One remote HTTP client speaking the prevailing chat-completions wire format
(messages with text and image parts), plus three deterministic mocks used by
the offline test harness:

* ``OracleBackend`` answers every prompt from fixture ground truth,
* ``ScriptedBackend`` replays a fixed transcript,
* ``NullBackend`` always fails.

Remote request body (POST ``{MODEL_BASE_URL}/chat/completions``)::

    {"model": ..., "temperature": ..., "seed": ..., "max_tokens": ...,
     "response_format": {"type": "json_object"},       # only in json mode
     "messages": [
       {"role": "system", "content": "..."},
       {"role": "user", "content": [
         {"type": "text", "text": "..."},
         {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."}}]}]}

Response: ``{"choices": [{"message": {"content": "..."}}]}``. Credentials come
from the environment (``MODEL_API_KEY``, ``MODEL_BASE_URL``), never from
config files.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import requests
from PIL import Image

from .core import BenchItem, MapMetadata, answer_to_text

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """The backend could not produce a completion."""


class PayloadError(BackendError):
    """The request was rejected locally before any network call."""


@dataclass(frozen=True)
class ImageAttachment:
    """Named PNG attachment. The name doubles as a stable descriptor in audit
    logs and lets the oracle mock identify what a crop shows."""

    name: str
    png: bytes

    @classmethod
    def from_array(cls, name: str, image: np.ndarray) -> "ImageAttachment":
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG", optimize=False)
        return cls(name, buf.getvalue())

    def to_array(self) -> np.ndarray:
        with Image.open(io.BytesIO(self.png)) as im:
            return np.asarray(im.convert("RGB"))

    def to_dict(self) -> dict[str, str]:
        return {"name": self.name, "png_b64": base64.b64encode(self.png).decode("ascii")}

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "ImageAttachment":
        return cls(d["name"], base64.b64decode(d["png_b64"]))


@dataclass(frozen=True)
class CompletionRequest:
    system: str
    instruction: str
    images: tuple[ImageAttachment, ...] = ()
    temperature: float = 0.0
    seed: int = 42
    max_tokens: int = 2048
    json_mode: bool = False

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be > 0, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        object.__setattr__(self, "images", tuple(self.images))

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system,
            "instruction": self.instruction,
            "images": [img.to_dict() for img in self.images],
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
            "json_mode": self.json_mode,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CompletionRequest":
        return cls(
            system=d["system"],
            instruction=d["instruction"],
            images=tuple(ImageAttachment.from_dict(i) for i in d.get("images", ())),
            temperature=float(d.get("temperature", 0.0)),
            seed=int(d.get("seed", 42)),
            max_tokens=int(d.get("max_tokens", 2048)),
            json_mode=bool(d.get("json_mode", False)),
        )


class Backend:
    """Base class: subclasses implement :meth:`complete` and append one
    telemetry record per call."""

    records_latency = False

    def __init__(self) -> None:
        self.telemetry: list[dict[str, Any]] = []

    def complete(self, req: CompletionRequest) -> str:
        raise NotImplementedError


class NullBackend(Backend):
    """Always fails; exercises degradation paths."""

    def complete(self, req: CompletionRequest) -> str:
        self.telemetry.append({"kind": "null", "ok": False})
        raise BackendError("null backend refuses all requests")


class ScriptedBackend(Backend):
    """Replays a transcript. Entries are reply strings or exceptions to raise.
    With ``cycle=True`` the transcript repeats forever, which keeps replies
    deterministic even under concurrent callers with a constant script."""

    def __init__(self, replies: Sequence[Union[str, Exception]], cycle: bool = False) -> None:
        super().__init__()
        if not replies:
            raise ValueError("scripted backend needs at least one reply")
        self._replies = list(replies)
        self._cycle = cycle
        self._index = 0
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest) -> str:
        with self._lock:
            if self._index >= len(self._replies):
                if not self._cycle:
                    raise BackendError("scripted backend transcript exhausted")
                self._index = 0
            entry = self._replies[self._index]
            self._index += 1
        self.telemetry.append({"kind": "scripted", "reply_index": self._index - 1})
        if isinstance(entry, Exception):
            raise entry
        return entry


class RemoteBackend(Backend):
    """Client for any chat-completions style multimodal endpoint.

    Transient transport failures (connection errors, timeouts, 5xx) are
    retried up to ``max_attempts`` with exponential backoff; other HTTP errors
    fail immediately. Oversized payloads are rejected before any network call.
    """

    records_latency = True

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "gpt-4o",
        *,
        json_mode_supported: bool = True,
        max_payload_bytes: int = 20_000_000,
        max_attempts: int = 3,
        max_concurrency: int = 4,
        timeout: float = 120.0,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__()
        self.base_url = (base_url or os.environ.get("MODEL_BASE_URL", "")).rstrip("/")
        if not self.base_url:
            raise ValueError("remote backend needs a base URL (flag or MODEL_BASE_URL)")
        self.api_key = api_key if api_key is not None else os.environ.get("MODEL_API_KEY", "")
        self.model = model
        self.json_mode_supported = json_mode_supported
        self.max_payload_bytes = max_payload_bytes
        self.max_attempts = max_attempts
        self.timeout = timeout
        self._session = session or requests.Session()
        self._sleep = sleep
        self._inflight = threading.Semaphore(max_concurrency)

    def _body(self, req: CompletionRequest) -> dict[str, Any]:
        instruction = req.instruction
        if req.json_mode and not self.json_mode_supported:
            instruction = instruction + "\nRespond with JSON only."
        content: list[dict[str, Any]] = [{"type": "text", "text": instruction}]
        for img in req.images:
            data = base64.b64encode(img.png).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}}
            )
        body: dict[str, Any] = {
            "model": self.model,
            "temperature": req.temperature,
            "seed": req.seed,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": content},
            ],
        }
        if req.json_mode and self.json_mode_supported:
            body["response_format"] = {"type": "json_object"}
        return body

    def complete(self, req: CompletionRequest) -> str:
        payload = sum(len(img.png) for img in req.images)
        # base64 inflates the wire size by 4/3
        if payload * 4 // 3 > self.max_payload_bytes:
            raise PayloadError(
                f"attachments total {payload} bytes, exceeding the "
                f"{self.max_payload_bytes}-byte payload limit"
            )
        body = self._body(req)
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Optional[Exception] = None
        with self._inflight:
            for attempt in range(1, self.max_attempts + 1):
                try:
                    resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout)
                    if resp.status_code >= 500:
                        raise requests.ConnectionError(f"server error {resp.status_code}")
                    if resp.status_code != 200:
                        raise BackendError(
                            f"endpoint returned HTTP {resp.status_code}: {resp.text}"
                        )
                    text = resp.json()["choices"][0]["message"]["content"]
                    self.telemetry.append({"kind": "remote", "attempts": attempt, "ok": True})
                    return text
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last_error = exc
                    if attempt < self.max_attempts:
                        self._sleep(0.5 * 2 ** (attempt - 1))
        self.telemetry.append({"kind": "remote", "attempts": self.max_attempts, "ok": False})
        raise BackendError(f"remote backend failed after {self.max_attempts} attempts: {last_error}")


class OracleBackend(Backend):
    """Deterministic mock that answers from fixture ground truth.

    It recognizes the prompt family by its fixed leading text and identifies
    the map (and component or legend unit) from attachment names of the form
    ``<map_id>:<what>``. Knows how to serve OCR, component extraction,
    knowledge gating, answer judging (constant choice), and QA prompts.
    """

    def __init__(
        self,
        metadata_by_map: Mapping[str, MapMetadata],
        items: Iterable[BenchItem] = (),
        *,
        judge_choice: str = "C",
        gate_affirm_tasks: Sequence[str] = ("earthquake_risk",),
    ) -> None:
        super().__init__()
        self.metadata_by_map = dict(metadata_by_map)
        self.items_by_map: dict[str, list[BenchItem]] = {}
        for item in items:
            self.items_by_map.setdefault(item.map_id, []).append(item)
        self.judge_choice = judge_choice
        self.gate_affirm_tasks = set(gate_affirm_tasks)

    def _map_id(self, req: CompletionRequest) -> Optional[str]:
        for img in req.images:
            return img.name.split(":", 1)[0]
        return None

    def complete(self, req: CompletionRequest) -> str:
        self.telemetry.append({"kind": "oracle"})
        instr = req.instruction
        if instr.startswith("Only output the OCR result"):
            return self._ocr(req)
        if instr.startswith("Please evaluate which of the two answers"):
            return json.dumps({"answer": self.judge_choice})
        if instr.startswith("You are deciding what domain knowledge"):
            return self._gate(req)
        if "Extract the following fields" in instr:
            return self._extract(req)
        return self._qa(req)

    def _ocr(self, req: CompletionRequest) -> str:
        map_id = self._map_id(req)
        meta = self.metadata_by_map.get(map_id or "")
        if meta is None or not req.images:
            raise BackendError(f"oracle has no metadata for map {map_id!r}")
        # attachment name: "<map_id>:legend_text:<x_min>:<y_min>"
        parts = req.images[0].name.split(":")
        if len(parts) >= 4:
            x0, y0 = int(parts[2]), int(parts[3])
            for unit in meta.legend_units:
                if int(round(unit.text_bbox.x_min)) == x0 and int(round(unit.text_bbox.y_min)) == y0:
                    return unit.rock_name or ""
        raise BackendError(f"oracle cannot place legend text crop {req.images[0].name!r}")

    def _extract(self, req: CompletionRequest) -> str:
        map_id = self._map_id(req)
        meta = self.metadata_by_map.get(map_id or "")
        if meta is None or not req.images:
            raise BackendError(f"oracle has no metadata for map {map_id!r}")
        kind = req.images[0].name.split(":", 1)[1]
        doc: dict[str, Any] = {}
        if kind == "title":
            doc = {
                "sheet_name": meta.sheet_name,
                "authors": "Synthetic Survey Staff",
                "language": meta.language,
            }
        elif kind == "scale":
            doc = {"scale": meta.scale}
        elif kind == "main_map" and meta.lonlat is not None:
            doc = {
                "lon_west": meta.lonlat.west,
                "lon_east": meta.lonlat.east,
                "lat_south": meta.lonlat.south,
                "lat_north": meta.lonlat.north,
            }
        elif kind == "index_map":
            doc = {"neighbors": sorted(meta.neighbors)}
        elif kind == "cross_section":
            doc = {"section_labels": ["A", "A'"]}
        elif kind == "stratigraphic_column":
            doc = {"column_labels": [u.stratigraphic_age or "" for u in meta.legend_units]}
        return json.dumps(doc, ensure_ascii=False)

    def _find_item(self, map_id: Optional[str], text: str) -> Optional[BenchItem]:
        # Two items may share identical question text with independently
        # shuffled choices, so disambiguate on the full rendered question
        # (options included) before falling back to the bare question.
        from .peqa import render_question

        pools = []
        if map_id and map_id in self.items_by_map:
            pools.append(self.items_by_map[map_id])
        else:
            pools.extend(self.items_by_map.values())
        best: Optional[BenchItem] = None
        best_key = (-1, -1)
        for pool in pools:
            for item in pool:
                rendered = render_question(item)
                if rendered in text:
                    key = (1, len(rendered))
                elif item.question_text in text:
                    key = (0, len(item.question_text))
                else:
                    continue
                if key > best_key:
                    best, best_key = item, key
        return best

    def _gate(self, req: CompletionRequest) -> str:
        instr = req.instruction
        kinds: list[str] = []
        m = re.search(r"knowledge kinds: (.+)", instr)
        if m:
            kinds = [k.strip() for k in m.group(1).rstrip(".").split(",")]
        item = self._find_item(self._map_id(req), instr)
        affirm = item is not None and item.task in self.gate_affirm_tasks
        return json.dumps({k: ("yes" if affirm else "no") for k in kinds})

    def _qa(self, req: CompletionRequest) -> str:
        instr = req.instruction
        if "Question:\n" in instr:
            block = instr.split("Question:\n", 1)[1]
            block = block.rsplit("\nAnswer:", 1)[0]
        else:
            block = instr
        item = self._find_item(self._map_id(req), block)
        if item is None or item.ground_truth is None:
            logger.warning("oracle could not match a bench question; replying with prose")
            return "I cannot match this question to any known item."
        return json.dumps(
            {
                "reason": "Synthesized from the reference metadata for this map.",
                "answer": answer_to_text(item.ground_truth),
            },
            ensure_ascii=False,
        )
