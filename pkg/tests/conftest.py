"""Shared fixtures: a session-scoped synthetic corpus and a scriptable local
HTTP endpoint for exercising the remote clients offline."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from geomapqa.benchgen import GenConfig, generate, load_templates, write_fixture_corpus
from geomapqa.core import BenchItem, MapMetadata, load_image
from geomapqa.dki import KnowledgeSources

CORPUS_SIZE = 10
CORPUS_SEED = 42
MAP_EDGE = 768


@dataclass
class Corpus:
    root: Path
    map_ids: list[str]

    @property
    def maps_dir(self) -> Path:
        return self.root / "maps"

    @property
    def metadata_dir(self) -> Path:
        return self.root / "metadata"

    @property
    def annotations_dir(self) -> Path:
        return self.root / "annotations"

    @property
    def snapshots_dir(self) -> Path:
        return self.root / "snapshots"

    def metadata(self, map_id: str) -> MapMetadata:
        raw = (self.metadata_dir / f"{map_id}.json").read_text(encoding="utf-8")
        return MapMetadata.from_dict(json.loads(raw))

    def all_metadata(self) -> dict[str, MapMetadata]:
        return {m: self.metadata(m) for m in self.map_ids}

    def image(self, map_id: str) -> np.ndarray:
        return load_image(str(self.maps_dir / f"{map_id}.png"))

    def sources(self) -> KnowledgeSources:
        return KnowledgeSources(str(self.snapshots_dir))


@pytest.fixture(scope="session")
def corpus(tmp_path_factory: pytest.TempPathFactory) -> Corpus:
    root = tmp_path_factory.mktemp("corpus")
    ids = write_fixture_corpus(str(root), CORPUS_SIZE, seed=CORPUS_SEED, size=MAP_EDGE)
    return Corpus(root=root, map_ids=ids)


@pytest.fixture(scope="session")
def templates():
    return load_templates()


@pytest.fixture(scope="session")
def bench_items(corpus: Corpus, templates) -> list[BenchItem]:
    """One item per task per map (250 items)."""
    metas = corpus.all_metadata()
    ordered = [metas[k] for k in sorted(metas)]
    items: list[BenchItem] = []
    for map_id in sorted(metas):
        items.extend(
            generate(
                metas[map_id],
                templates,
                GenConfig(seed=CORPUS_SEED, per_task=1),
                map_id=map_id,
                corpus=ordered,
                sources=corpus.sources(),
            )
        )
    return items


# ---------------------------------------------------------------------------
# scripted local HTTP endpoint


class FakeEndpoint:
    """Tiny HTTP server whose POST behavior is driven by a queue of handlers.

    Each queued entry is ``(status, body_dict)`` or a callable
    ``(path, body) -> (status, body_dict)``; once the queue empties the last
    entry repeats."""

    def __init__(self) -> None:
        self.requests: list[tuple[str, dict]] = []
        self._queue: list[Any] = []
        self._lock = threading.Lock()

        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                endpoint.requests.append((self.path, body))
                entry = endpoint._next()
                if callable(entry):
                    status, doc = entry(self.path, body)
                else:
                    status, doc = entry
                payload = json.dumps(doc).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args: Any) -> None:
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def _next(self) -> Any:
        with self._lock:
            if len(self._queue) > 1:
                return self._queue.pop(0)
            if self._queue:
                return self._queue[0]
        return (500, {"error": "no scripted response"})

    def script(self, *entries: Any) -> None:
        with self._lock:
            self._queue = list(entries)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def fake_endpoint():
    endpoint = FakeEndpoint()
    yield endpoint
    endpoint.close()


def chat_reply(content: str) -> tuple[int, dict]:
    return (200, {"choices": [{"message": {"content": content}}]})
