import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from hcs.core_model import ServiceDescriptor, build_dependency_graph
from hcs.health_checker import ProbeResult


def svc(*ids):
    return [ServiceDescriptor(id=i) for i in ids]


def chain_graph(*ids):
    """chain_graph("C", "B", "A") builds C requires B requires A."""
    edges = list(zip(ids, ids[1:]))
    return build_dependency_graph(svc(*ids), edges)


class StubServer:
    """Records JSON POSTs and answers with a scripted status sequence."""

    def __init__(self, statuses=(200,), body=b"{}"):
        self.statuses = list(statuses)
        self.body = body
        self.requests = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                with stub.lock:
                    stub.requests.append((self.command, self.path, dict(self.headers), raw))
                    idx = min(len(stub.requests) - 1, len(stub.statuses) - 1)
                    code = stub.statuses[idx]
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(stub.body)))
                self.end_headers()
                self.wfile.write(stub.body)

            do_POST = _reply
            do_GET = _reply

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def json_bodies(self):
        with self.lock:
            return [json.loads(r[3]) for r in self.requests if r[3]]

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(statuses=(200,), body=b"{}"):
        s = StubServer(statuses, body)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


class FixedProber:
    """Every probe answers ok in ``rtt_ms`` unless the service is listed in ``down``."""

    def __init__(self, rtt_ms=5.0, down=(), delay_s=0.0):
        self.rtt_ms = rtt_ms
        self.down = set(down)
        self.delay_s = delay_s

    def probe(self, target, timeout_ms, now_ms):
        if self.delay_s:
            time.sleep(self.delay_s)
        if target.id in self.down:
            return ProbeResult(target.id, now_ms, "refused")
        return ProbeResult(target.id, now_ms, "ok", rtt_ms=self.rtt_ms)

    def latencies(self, target, timeout_ms):
        return []


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
