"""hcsd: the central process. Receives agent batches, runs check cycles, serves diagnoses.

Endpoints::

    POST /v1/samples              wire batch -> {"accepted": n, "rejected": m}
    GET  /v1/series?source=&name=&t0=&t1=   -> {"points": [[ts, value], ...]}
    GET  /v1/health               -> {"status": "ok", "series": n}
    GET  /v1/diagnosis/latest     -> last Diagnosis as JSON
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from hcs.core_model import DependencyGraph, MetricSample, TopologyError, load_topology, parse_topology
from hcs.health_checker import SYSTEM_GAUGES, HealthChecker, HttpProber, Prober, Thresholds, check_system
from hcs.issue_presenter import Presenter
from hcs.receiver_store import (
    MAX_BODY_BYTES,
    BodyTooLarge,
    InvalidRange,
    Journal,
    MalformedBody,
    Receiver,
    SeriesStore,
    replay_journal,
)

log = logging.getLogger(__name__)


class _Handler(BaseHTTPRequestHandler):
    server_version = "hcsd/0.1"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, code: int, doc) -> None:
        body = json.dumps(doc, separators=(",", ":")).encode("utf-8") if not isinstance(doc, bytes) else doc
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        hcsd: Hcsd = self.server.hcsd
        if urlparse(self.path).path != "/v1/samples":
            return self._send(404, {"error": "not found"})
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            return self._send(400, {"error": "bad Content-Length"})
        if length > MAX_BODY_BYTES:
            self.close_connection = True
            return self._send(413, {"error": f"body exceeds {MAX_BODY_BYTES} bytes"})
        raw = self.rfile.read(length)
        try:
            accepted, rejected = hcsd.receiver.ingest_batch(raw)
        except (MalformedBody, BodyTooLarge) as exc:
            return self._send(exc.status, {"error": str(exc)})
        self._send(200, {"accepted": accepted, "rejected": rejected})

    def do_GET(self):
        hcsd: Hcsd = self.server.hcsd
        url = urlparse(self.path)
        q = {k: v[-1] for k, v in parse_qs(url.query).items()}
        if url.path == "/v1/health":
            return self._send(200, {"status": "ok", "series": hcsd.store.series_count()})
        if url.path == "/v1/series":
            try:
                t0 = int(q.get("t0", 0))
                t1 = int(q.get("t1", 2**62))
                pts = hcsd.store.query_range(q["source"], q["name"], t0, t1)
            except KeyError as exc:
                return self._send(400, {"error": f"missing parameter {exc.args[0]}"})
            except (ValueError, InvalidRange) as exc:
                return self._send(400, {"error": str(exc)})
            return self._send(200, {"points": [[t, v] for t, v in pts]})
        if url.path == "/v1/diagnosis/latest":
            d = hcsd.checker.latest
            if d is None:
                return self._send(503, {"error": "no diagnosis yet"})
            return self._send(200, d.to_json().encode("utf-8"))
        self._send(404, {"error": "not found"})


class Hcsd:
    """Receiver, checker and presenter wired together, plus the HTTP front end and check loop."""

    def __init__(self, graph: DependencyGraph, *, listen: str = "127.0.0.1:0", interval_ms: int = 5000,
                 thresholds: Thresholds = Thresholds(), expected_ms=None, prober: Optional[Prober] = None,
                 capacity: int = 4096, event_capacity: int = 4096, journal_dir: Optional[str] = None,
                 webhook_url: Optional[str] = None, reporter_url: Optional[str] = None,
                 report_dir: Optional[str] = None, suppress_ms: int = 600_000, backoff_s: float = 1.0):
        self.graph = graph
        self.listen = listen
        self.interval_ms = interval_ms
        self.store = SeriesStore(capacity, event_capacity)
        self.checker = HealthChecker(graph, self.store, prober or HttpProber(), thresholds, expected_ms)
        journal = None
        if journal_dir:
            journal = Journal(journal_dir, on_failure=lambda msg: self.checker.raise_internal(
                "journal_unwritable", f"journal disabled, samples kept in memory only: {msg}"))
        self.receiver = Receiver(self.store, journal)
        self.presenter = Presenter(graph, self.store, webhook_url, reporter_url, report_dir, suppress_ms, backoff_s)
        self.checker.listeners.append(self.presenter)
        self.skipped_cycles = 0
        self._server: Optional[ThreadingHTTPServer] = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @classmethod
    def from_config(cls, cfg: dict, base_dir: str = ".", **overrides) -> "Hcsd":
        topo = cfg.get("topology")
        if isinstance(topo, dict):
            graph = parse_topology(json.dumps(topo, indent=2), "<config topology>")
        elif isinstance(topo, str):
            graph = load_topology(os.path.join(base_dir, topo))
        else:
            raise TopologyError("config needs a 'topology' path or object")
        store = cfg.get("store", {})
        checker = cfg.get("checker", {})
        presenter = cfg.get("presenter", {})
        kwargs = dict(
            listen=cfg.get("listen", "127.0.0.1:8700"),
            interval_ms=int(checker.get("interval_ms", 5000)),
            thresholds=Thresholds.from_dict(checker.get("thresholds")),
            expected_ms=checker.get("expected_ms"),
            prober=HttpProber(int(checker.get("db_samples", 5))),
            capacity=int(store.get("capacity", 4096)),
            event_capacity=int(store.get("event_capacity", 4096)),
            journal_dir=store.get("journal_dir"),
            webhook_url=presenter.get("webhook_url"),
            reporter_url=presenter.get("reporter_url"),
            report_dir=presenter.get("report_dir"),
            suppress_ms=int(presenter.get("suppress_ms", 600_000)),
        )
        kwargs.update(overrides)
        return cls(graph, **kwargs)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def serve(self) -> "Hcsd":
        host, _, port = self.listen.rpartition(":")
        self._server = ThreadingHTTPServer((host or "127.0.0.1", int(port)), _Handler)
        self._server.daemon_threads = True
        self._server.hcsd = self
        t = threading.Thread(target=self._server.serve_forever, name="hcsd-http", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def start_loop(self) -> "Hcsd":
        t = threading.Thread(target=self._loop, name="hcsd-checker", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _loop(self) -> None:
        period = self.interval_ms / 1000.0
        next_at = time.monotonic() + period
        while not self._stop.wait(max(0.0, next_at - time.monotonic())):
            try:
                self.checker.run_cycle()
            except Exception:
                log.exception("check cycle failed")
            next_at += period
            now = time.monotonic()
            if now > next_at:
                missed = int((now - next_at) // period) + 1
                self.skipped_cycles += missed
                log.warning("check cycle overran; skipping %d tick(s)", missed)
                next_at += missed * period

    def run_cycle(self, now_ms: Optional[int] = None):
        return self.checker.run_cycle(now_ms)

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        self.presenter.close()
        self.checker.close()


def replay(path: str, graph: Optional[DependencyGraph] = None) -> dict:
    """Summarise a journal offline: series, event counts and the system rules at the newest data."""
    receiver = replay_journal(path)
    store = receiver.store
    events = [se.event for se in store.events_since(0)]
    services = sorted({src for src, _ in store.series_keys()} | {e.source for e in events})
    if graph is not None:
        services = sorted(set(services) | set(graph.services))
    snapshots = {}
    for sid in services:
        newest = store.newest_ts(sid)
        if newest is None:
            continue
        g = {}
        for name in SYSTEM_GAUGES:
            pt = store.latest(sid, name, 2**62, now_ms=newest)
            if pt:
                g[name] = MetricSample(sid, pt[0], "gauge", name, pt[1], store.unit_of(sid, name))
        snapshots[sid] = g
    issues = check_system(snapshots, events, Thresholds(), max([1] + [e.ts_ms for e in events]))
    return {
        "series": store.series_count(),
        "points": store.total_points(),
        "events": len(events),
        "issues": [i.to_dict() for i in issues],
    }


def _interrupt(signum, frame):
    raise KeyboardInterrupt


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hcsd", description="Health Check System daemon")
    parser.add_argument("--config", help="daemon config JSON")
    parser.add_argument("--replay", metavar="JOURNAL", help="replay a samples-*.jsonl journal offline and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not args.config and not args.replay:
        parser.error("one of --config or --replay is required")

    cfg, base = {}, "."
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
            cfg = json.loads(text)
        except OSError as exc:
            print(f"hcsd: {exc}", file=sys.stderr)
            return 2
        except json.JSONDecodeError as exc:
            print(f"hcsd: {args.config}:{exc.lineno}: {exc.msg}", file=sys.stderr)
            return 2
        base = os.path.dirname(os.path.abspath(args.config))

    if args.replay:
        graph = None
        if cfg.get("topology"):
            try:
                graph = Hcsd.from_config(cfg, base, prober=Prober()).graph
            except TopologyError as exc:
                print(f"hcsd: {exc}", file=sys.stderr)
                return 2
        print(json.dumps(replay(args.replay, graph), indent=2, sort_keys=True))
        return 0

    try:
        hcsd = Hcsd.from_config(cfg, base)
    except TopologyError as exc:
        print(f"hcsd: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"hcsd: bad config {args.config}: {exc}", file=sys.stderr)
        return 2
    signal.signal(signal.SIGTERM, _interrupt)
    hcsd.serve().start_loop()
    log.info("hcsd listening on %s, checking every %d ms", hcsd.url, hcsd.interval_ms)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        hcsd.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
