"""Shared fixtures: a configurable local HTTP server and corpus builders."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from riskcascade.core import Dataset, Label, Post


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            body = json.loads(raw)
        except ValueError:
            body = {}
        self.server.requests.append((self.path, body))
        handler = self.server.routes.get(self.path)
        if handler is None:
            self.send_response(404)
            self.end_headers()
            return
        status, payload = handler(body)
        data = payload.encode("utf-8") if isinstance(payload, str) else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):  # keep test output quiet
        pass


class MockServer:
    """A local HTTP server whose POST routes are plain functions.

    Route handlers take the parsed request body and return (status, payload);
    payloads that are strings are sent raw, anything else as JSON. Requests
    are recorded on .requests for call-count assertions.
    """

    def __init__(self):
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._server.routes = {}
        self._server.requests = []
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    @property
    def requests(self) -> list:
        return self._server.requests

    def route(self, path: str, handler) -> None:
        self._server.routes[path] = handler

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def mock_server():
    server = MockServer()
    yield server
    server.close()


def make_posts(n: int, text_fn, label_fn, prefix: str = "p") -> list[Post]:
    return [
        Post(id=f"{prefix}{i}", text=text_fn(i), gold_label=label_fn(i)) for i in range(n)
    ]


@pytest.fixture
def end_token_corpus():
    """200 posts where the token 'end' perfectly marks the positives."""
    rng = np.random.default_rng(7)
    vocab = ["sky", "tree", "walk", "python", "music", "coffee", "rain", "book", "game", "friend"]
    posts = []
    for i in range(200):
        words = list(rng.choice(vocab, size=int(rng.integers(5, 12))))
        label = Label.SUICIDE if i % 2 == 0 else Label.NON_SUICIDE
        if label is Label.SUICIDE:
            words.insert(int(rng.integers(0, len(words))), "end")
        posts.append(Post(id=f"p{i}", text=" ".join(words), gold_label=label))
    return Dataset(tuple(posts), name="end-corpus")
