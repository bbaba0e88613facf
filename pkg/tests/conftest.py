"""Shared fixtures: the bundled synthetic corpus, gateway configs, and a
scriptable chat-completions stub server for exercising the http backend."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from reportguide.gateway import GatewayConfig
from reportguide.synthetic import build_synthetic_corpus, write_synthetic_corpus

# One pass/fail line per acceptance criterion, echoed after the test summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth():
    """The in-memory synthetic corpus (records, features, ground truth)."""
    return build_synthetic_corpus()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """The synthetic corpus materialized as pipeline input files."""
    out = tmp_path_factory.mktemp("synth")
    write_synthetic_corpus(out)
    return out


@pytest.fixture()
def mock_gateway():
    return GatewayConfig(backend="mock")


class StubChatServer:
    """Minimal scriptable OpenAI-style chat-completions endpoint.

    `script` is a list of HTTP status codes consumed one per request; once
    exhausted every request succeeds with status 200 and a fixed reply.
    Records request payloads, and tracks the maximum number of requests that
    were in flight simultaneously.
    """

    def __init__(self, script=None, reply: str = "stub-reply", delay: float = 0.0):
        self.script = list(script or [])
        self.reply = reply
        self.delay = delay
        self.requests: list[dict] = []
        self.max_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_POST(self):
                with stub._lock:
                    stub._in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub._in_flight)
                try:
                    if stub.delay:
                        time.sleep(stub.delay)
                    length = int(self.headers.get("Content-Length", "0"))
                    body = self.rfile.read(length)
                    with stub._lock:
                        stub.requests.append(json.loads(body))
                        status = stub.script.pop(0) if stub.script else 200
                    if status != 200:
                        self.send_response(status)
                        self.send_header("Content-Type", "application/json")
                        self.end_headers()
                        self.wfile.write(b'{"error": "scripted failure"}')
                        return
                    doc = {
                        "choices": [{"message": {"content": stub.reply}}],
                        "usage": {"prompt_tokens": 5, "completion_tokens": 7},
                    }
                    payload = json.dumps(doc).encode("utf-8")
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(payload)))
                    self.end_headers()
                    self.wfile.write(payload)
                finally:
                    with stub._lock:
                        stub._in_flight -= 1

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1/chat/completions"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc_info):
        self._httpd.shutdown()
        self._httpd.server_close()
        return False


@pytest.fixture()
def stub_server_factory():
    """Yields a factory for stub servers that are all torn down afterwards."""
    servers: list[StubChatServer] = []

    def make(**kwargs) -> StubChatServer:
        server = StubChatServer(**kwargs)
        server.__enter__()
        servers.append(server)
        return server

    yield make
    for server in servers:
        server.__exit__(None, None, None)
