"""A desk-scale mesh of mock services for fault-injection runs.

Each mock service listens on its own port and offers::

    GET  /health        200 {"status": "ok"}, or 503 when a dependency's /health fails
    GET  /work          calls /work on every dependency, then one synthetic DB query
    GET  /db/probe?stmt=<name>   one synthetic DB query, reports {"query_ms": ...}
    POST /fault         {"kind": "kill"|"slow_db"|"mem_exhaust"|"drop_net"|"clear", ...}

DB latency is exponential with mean ``db_latency_ms``, drawn from a per-service
RNG seeded from the mesh seed. Every service also owns a SyntheticProvider that
an attached agent reads, so ``mem_exhaust`` shows up in the metric stream.

``run_scenario`` walks a fault timeline in fixed steps. At each step it injects
due faults, ticks every agent, runs one check cycle and reads the latest
diagnosis back over HTTP. By default time is virtual and the run finishes as
fast as the probes allow; ``realtime=True`` paces steps on the wall clock.
"""

from __future__ import annotations

import argparse
import errno
import json
import logging
import random
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

import requests

from hcs.agent import Agent, SyntheticProvider
from hcs.core_model import DependencyGraph, ServiceDescriptor, build_dependency_graph, impacted_by

log = logging.getLogger(__name__)

FAULT_KINDS = ("kill", "slow_db", "mem_exhaust", "drop_net", "clear")
HEALTH_DEP_TIMEOUT_S = 0.5
WORK_DEP_TIMEOUT_S = 10.0
SPAWN_TIMEOUT_S = 5.0
HANG_S = 60.0
DEFAULT_T0_MS = 1_700_000_000_000


class SimError(Exception):
    pass


class PortInUse(SimError):
    pass


class SpawnTimeout(SimError):
    pass


class UnknownTarget(SimError):
    pass


class AlreadyDead(SimError):
    pass


class ScenarioTimeout(SimError):
    pass


@dataclass(frozen=True)
class ServiceSpec:
    id: str
    port: int = 0
    db_latency_ms: float = 20.0
    work_path: Optional[str] = "/work"
    db_statements: tuple[str, ...] = ("select_1",)
    process: Optional[str] = None

    @property
    def process_name(self) -> str:
        return self.process or f"{self.id.lower()}-server"


@dataclass
class MeshSpec:
    services: list[ServiceSpec]
    requires: list[tuple[str, str]] = field(default_factory=list)
    agents: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "MeshSpec":
        services = []
        for s in doc["services"]:
            s = dict(s)
            if "db_statements" in s:
                s["db_statements"] = tuple(s["db_statements"])
            services.append(ServiceSpec(**s))
        return cls(services, [tuple(p) for p in doc.get("requires", [])], dict(doc.get("agents", {})))

    @classmethod
    def from_file(cls, path: str) -> "MeshSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def chain(cls, *ids: str, db_latency_ms: float = 20.0) -> "MeshSpec":
        """``chain("D", "C", "B", "A")``: D requires C requires B requires A."""
        return cls([ServiceSpec(i, db_latency_ms=db_latency_ms) for i in ids], list(zip(ids, ids[1:])))

    def validate(self) -> DependencyGraph:
        ports = [s.port for s in self.services if s.port]
        dup = sorted({p for p in ports if ports.count(p) > 1})
        if dup:
            raise PortInUse(f"port {dup[0]} assigned to more than one service")
        return build_dependency_graph([ServiceDescriptor(s.id, probe_address="") for s in self.services],
                                      self.requires)


@dataclass(frozen=True)
class FaultSpec:
    target: str
    kind: str
    at_ms: int = 0
    factor: float = 10.0
    ramp_s: float = 10.0
    victim_pid: Optional[int] = None
    victim_name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}; expected one of {', '.join(FAULT_KINDS)}")
        if self.kind == "slow_db" and not self.factor > 0:
            raise ValueError("slow_db factor must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "FaultSpec":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Scenario:
    faults: list[FaultSpec] = field(default_factory=list)
    duration_ms: int = 60_000
    step_ms: int = 5_000
    expect_no_issues: bool = False
    warmup_ms: int = 0

    @classmethod
    def from_dict(cls, doc) -> "Scenario":
        if isinstance(doc, list):
            doc = {"faults": doc}
        faults = [FaultSpec.from_dict(f) for f in doc.get("faults", [])]
        rest = {k: v for k, v in doc.items() if k != "faults"}
        return cls(faults, **rest)

    @classmethod
    def from_file(cls, path: str) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ScenarioLog:
    """What happened. ``wall_*`` fields are the only ones that vary between identical runs."""

    seed: int
    step_ms: int
    duration_ms: int
    injected: list[dict] = field(default_factory=list)
    detected: list[dict] = field(default_factory=list)
    detection_latency_ms: list[Optional[int]] = field(default_factory=list)
    attribution_correct: list[bool] = field(default_factory=list)
    at_detection: list[Optional[dict]] = field(default_factory=list)
    false_positives: list[dict] = field(default_factory=list)
    missed: list[str] = field(default_factory=list)
    expect_no_issues: bool = False
    wall_started_s: float = 0.0
    wall_elapsed_s: float = 0.0

    @property
    def ok(self) -> bool:
        if self.missed or not all(self.attribution_correct):
            return False
        return not (self.expect_no_issues and self.false_positives)

    def to_dict(self, wall: bool = True) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        if not wall:
            d = {k: v for k, v in d.items() if not k.startswith("wall_")}
        return d


class _MockHandler(BaseHTTPRequestHandler):
    # HTTP/1.0: one request per connection, so a kill leaves no live keep-alive socket behind
    protocol_version = "HTTP/1.0"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.server.mock.spec.id, *args)

    def _send(self, code: int, doc: dict) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        try:
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            log.debug("%s: client left before the reply", self.server.mock.spec.id)

    def _hang_if_dropped(self) -> bool:
        mock: MockService = self.server.mock
        if mock.mode != "drop_net":
            return False
        mock.release.wait(HANG_S)
        self.close_connection = True
        return True

    def do_GET(self):
        mock: MockService = self.server.mock
        url = urlparse(self.path)
        if self._hang_if_dropped():
            return
        if url.path == "/health":
            failed = mock.failed_dependencies()
            if failed:
                return self._send(503, {"status": "dependency_failed", "failed": failed})
            return self._send(200, {"status": "ok"})
        if url.path == "/db/probe":
            stmt = parse_qs(url.query).get("stmt", [""])[-1]
            if not stmt:
                return self._send(400, {"error": "missing stmt"})
            ms = mock.query()
            return self._send(200, {"stmt": stmt, "query_ms": ms})
        if mock.spec.work_path and url.path == mock.spec.work_path:
            try:
                segments = mock.work()
            except requests.RequestException as exc:
                return self._send(502, {"error": f"dependency call failed: {exc}"})
            return self._send(200, {"service": mock.spec.id, "segments": segments,
                                    "db_total_ms": sum(s["db_ms"] for s in segments)})
        self._send(404, {"error": "not found"})

    def do_POST(self):
        mock: MockService = self.server.mock
        if urlparse(self.path).path != "/fault":
            return self._send(404, {"error": "not found"})
        try:
            doc = json.loads(self.rfile.read(int(self.headers.get("Content-Length") or 0)) or b"{}")
            now_ms = doc.pop("now_ms", None)
            fault = FaultSpec.from_dict({"target": mock.spec.id, **doc})
        except (ValueError, TypeError) as exc:
            return self._send(400, {"error": str(exc)})
        self._send(200, {"ack": fault.kind})
        if fault.kind == "kill":
            # shutting down from a handler thread must not wait on ourselves
            threading.Thread(target=mock.apply, args=(fault, now_ms), daemon=True).start()
        else:
            mock.apply(fault, now_ms)


class MockService:
    def __init__(self, spec: ServiceSpec, mesh: "Mesh", seed: int):
        self.spec = spec
        self.mesh = mesh
        self.provider = SyntheticProvider(mesh.spec.agents.get(spec.id))
        self.mode = "up"
        self.factor = 1.0
        self.release = threading.Event()
        self._rng = random.Random(f"{seed}:{spec.id}")
        self._rng_lock = threading.Lock()
        self._server: Optional[ThreadingHTTPServer] = None

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def address(self) -> str:
        return f"127.0.0.1:{self.port}"

    @property
    def alive(self) -> bool:
        return self.mode != "dead"

    def start(self) -> None:
        try:
            self._server = ThreadingHTTPServer(("127.0.0.1", self.spec.port), _MockHandler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(f"{self.spec.id}: port {self.spec.port} is in use") from None
            raise
        self._server.daemon_threads = True
        self._server.mock = self
        threading.Thread(target=self._server.serve_forever, name=f"mock-{self.spec.id}", daemon=True).start()

    def sample_db_ms(self) -> float:
        with self._rng_lock:
            mean = self.spec.db_latency_ms * self.factor
            return self._rng.expovariate(1.0 / mean) if mean > 0 else 0.0

    def query(self) -> float:
        ms = self.sample_db_ms()
        time.sleep(ms / 1000.0)
        return ms

    def failed_dependencies(self) -> list[str]:
        failed = []
        for dep in self.mesh.dependencies(self.spec.id):
            try:
                r = requests.get(f"http://{self.mesh.address(dep)}/health", timeout=HEALTH_DEP_TIMEOUT_S)
                if r.status_code != 200:
                    failed.append(dep)
            except requests.RequestException:
                failed.append(dep)
        return failed

    def work(self) -> list[dict]:
        segments = []
        for dep in self.mesh.dependencies(self.spec.id):
            svc = self.mesh.services[dep]
            r = requests.get(f"http://{svc.address}{svc.spec.work_path or '/work'}", timeout=WORK_DEP_TIMEOUT_S)
            r.raise_for_status()
            segments.extend(r.json()["segments"])
        segments.append({"service": self.spec.id, "db_ms": self.query()})
        return segments

    def apply(self, fault: FaultSpec, now_ms: Optional[int] = None) -> None:
        now_ms = now_ms if now_ms is not None else int(time.time() * 1000)
        if fault.kind == "kill":
            self.stop()
        elif fault.kind == "slow_db":
            self.factor = fault.factor
        elif fault.kind == "mem_exhaust":
            pid = fault.victim_pid if fault.victim_pid is not None else self.mesh.default_pid(self.spec.id)
            name = fault.victim_name or self.spec.process_name
            self.provider.mem_exhaust(now_ms, int(fault.ramp_s * 1000), pid, name)
        elif fault.kind == "drop_net":
            self.release.clear()
            self.mode = "drop_net"
        elif fault.kind == "clear":
            self.factor = 1.0
            self.mode = "up"
            self.release.set()

    def stop(self) -> None:
        if self.mode == "dead":
            return
        self.mode = "dead"
        self.release.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()


class Mesh:
    """Handle returned by ``spawn_mesh``; also usable as a context manager."""

    def __init__(self, spec: MeshSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.graph = spec.validate()
        self.services = {s.id: MockService(s, self, seed) for s in spec.services}
        self.agents: dict[str, Agent] = {}

    def dependencies(self, sid: str) -> list[str]:
        return sorted(self.graph.dependencies(sid))

    def address(self, sid: str) -> str:
        return self.services[sid].address

    def default_pid(self, sid: str) -> int:
        return 4000 + sorted(self.services).index(sid)

    def topology(self) -> dict:
        """The mesh as an hcsd topology document."""
        services = []
        for sid in sorted(self.services):
            m = self.services[sid]
            entry = {"id": sid, "probe_address": m.address, "probe_path": "/health",
                     "db_statements": list(m.spec.db_statements)}
            if m.spec.work_path:
                entry["work_path"] = m.spec.work_path
            services.append(entry)
        return {"services": services, "requires": [list(e) for e in sorted(self.graph.edges)]}

    def dependency_graph(self) -> DependencyGraph:
        doc = self.topology()
        return build_dependency_graph(
            [ServiceDescriptor(s["id"], probe_address=s["probe_address"], db_statements=tuple(s["db_statements"]),
                               work_path=s.get("work_path")) for s in doc["services"]],
            [tuple(e) for e in doc["requires"]])

    def attach_agents(self, receiver_url: str) -> dict[str, Agent]:  # base URL of hcsd
        """One agent per service, reading that service's synthetic provider."""
        self.agents = {sid: Agent(sid, m.provider, receiver_url) for sid, m in sorted(self.services.items())}
        return self.agents

    def stop(self) -> None:
        for m in self.services.values():
            m.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def spawn_mesh(spec: MeshSpec, seed: int = 0, timeout_s: float = SPAWN_TIMEOUT_S) -> Mesh:
    mesh = Mesh(spec, seed)
    started = []
    try:
        for sid in sorted(mesh.services):
            mesh.services[sid].start()
            started.append(sid)
        deadline = time.monotonic() + timeout_s
        for sid in sorted(mesh.services):
            while True:
                try:
                    if requests.get(f"http://{mesh.address(sid)}/health", timeout=1.0).status_code == 200:
                        break
                except requests.RequestException:
                    pass
                if time.monotonic() > deadline:
                    raise SpawnTimeout(f"{sid} did not answer /health within {timeout_s:.0f} s")
                time.sleep(0.05)
    except Exception:
        for sid in started:
            mesh.services[sid].stop()
        raise
    return mesh


def inject_fault(mesh: Mesh, fault: FaultSpec, now_ms: Optional[int] = None) -> str:
    if fault.target not in mesh.services:
        raise UnknownTarget(f"no service {fault.target!r} in the mesh")
    svc = mesh.services[fault.target]
    if not svc.alive:
        raise AlreadyDead(f"{fault.target} was already killed")
    svc.apply(fault, now_ms)
    return fault.kind


# ---- scenario scoring ----

def _expected_rules(kind: str) -> tuple[str, ...]:
    return {
        "kill": ("service_down",),
        "drop_net": ("service_down",),
        "mem_exhaust": ("swap_exhausted", "oomk_victim"),
        "slow_db": ("latency_delay",),
    }.get(kind, ())


def _attribution_ok(mesh: Mesh, fault: FaultSpec, diagnosis: dict) -> bool:
    target = fault.target
    issues = diagnosis["issues"]
    if fault.kind in ("kill", "drop_net"):
        if diagnosis["report"]["roots"] != [target]:
            return False
        dependents = impacted_by(mesh.graph, target) | {target}
        conn = [i for i in issues if i["category"] == "connectivity" and i["subject"] in dependents]
        return bool(conn) and all(i["root_cause"] == target for i in conn)
    if fault.kind == "mem_exhaust":
        name = fault.victim_name or mesh.services[target].spec.process_name
        oomk = [i for i in issues if i["rule_id"] == "oomk_victim" and i["subject"] == target]
        return bool(oomk) and all(i["root_cause"] == target and name in i["message"] for i in oomk)
    if fault.kind == "slow_db":
        stmts = set(mesh.services[target].spec.db_statements)
        delays = [i for i in issues if i["rule_id"] == "latency_delay" and i["subject"] == target]
        has_stmt = any(ev.get("sample", {}).get("labels", {}).get("statement") in stmts
                       for i in delays for ev in i["evidence"])
        return has_stmt and diagnosis.get("delay_areas", {}).get(target) == "db_query"
    return True


def run_scenario(mesh: Mesh, hcsd, scenario: Scenario, *, realtime: bool = False,
                 t0_ms: Optional[int] = None, out: Optional[str] = None) -> ScenarioLog:
    """Play ``scenario`` against a running mesh and an ``Hcsd`` serving HTTP.

    ``hcsd`` needs ``run_cycle(now_ms)`` and ``url``; the agents must already be
    attached to its receiver. Raises nothing on a missed detection: misses are
    recorded in the log and make ``log.ok`` false.
    """
    log_ = ScenarioLog(mesh.seed, scenario.step_ms, scenario.duration_ms, expect_no_issues=scenario.expect_no_issues)
    log_.wall_started_s = time.time()
    t0_ms = t0_ms if t0_ms is not None else (int(time.time() * 1000) if realtime else DEFAULT_T0_MS)
    wall0 = time.monotonic()
    faults = sorted(enumerate(scenario.faults), key=lambda p: (p[1].at_ms, p[0]))
    pending = list(faults)
    watch: dict[int, dict] = {}  # fault index -> {"t": injected, "rules": remaining, "first": first hit}
    n = len(scenario.faults)
    log_.detection_latency_ms = [None] * n
    log_.attribution_correct = [False] * n
    log_.at_detection = [None] * n
    session = requests.Session()

    t = 0
    while t <= scenario.duration_ms:
        if realtime:
            delay = wall0 + t / 1000.0 - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        now = t0_ms + t
        while pending and pending[0][1].at_ms <= t:
            idx, fault = pending.pop(0)
            inject_fault(mesh, fault, now)
            log_.injected.append({"fault": fault.to_dict(), "t_ms": t})
            watch[idx] = {"t": t, "rules": list(_expected_rules(fault.kind))}
            log.info("t=%6.1fs injected %s on %s", t / 1000, fault.kind, fault.target)
        for agent in mesh.agents.values():
            agent.tick(now)
        hcsd.run_cycle(now)
        resp = session.get(f"{hcsd.url}/v1/diagnosis/latest", timeout=5)
        resp.raise_for_status()
        diagnosis = resp.json()

        for idx, w in sorted(watch.items()):
            fault = scenario.faults[idx]
            for issue in diagnosis["issues"]:
                if issue["subject"] == fault.target and issue["rule_id"] in w["rules"]:
                    w["rules"].remove(issue["rule_id"])
                    log_.detected.append({"fault": idx, "issue_id": issue["id"], "rule": issue["rule_id"],
                                          "t_ms": t, "root_cause": issue["root_cause"]})
                    log.info("t=%6.1fs detected %s on %s (root cause %s)", t / 1000, issue["rule_id"],
                             fault.target, issue["root_cause"])
            if not w["rules"] and log_.detection_latency_ms[idx] is None and _expected_rules(fault.kind):
                log_.detection_latency_ms[idx] = t - w["t"]
                log_.attribution_correct[idx] = _attribution_ok(mesh, fault, diagnosis)
                log_.at_detection[idx] = diagnosis
        if scenario.expect_no_issues and t >= scenario.warmup_ms and diagnosis["issues"]:
            log_.false_positives.extend({"t_ms": t, "rule": i["rule_id"], "subject": i["subject"],
                                         "message": i["message"]} for i in diagnosis["issues"])
        t += scenario.step_ms

    for idx, fault in enumerate(scenario.faults):
        if not _expected_rules(fault.kind):
            log_.attribution_correct[idx] = True
        elif log_.detection_latency_ms[idx] is None:
            missing = watch.get(idx, {}).get("rules", list(_expected_rules(fault.kind)))
            log_.missed.append(f"{fault.kind} on {fault.target}: never saw {', '.join(missing)}")
    log_.wall_elapsed_s = round(time.monotonic() - wall0, 3)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(log_.to_dict(), fh, indent=2, sort_keys=True)
    return log_


def main(argv=None) -> int:
    from hcs.daemon import Hcsd  # late import keeps the mesh usable without the daemon

    parser = argparse.ArgumentParser(prog="hcs-sim", description="Run fault-injection scenarios against a mock mesh.")
    parser.add_argument("--mesh", required=True, help="mesh spec JSON")
    parser.add_argument("--scenario", help="scenario JSON (faults, duration_ms, step_ms)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="write the ScenarioLog JSON here")
    parser.add_argument("--realtime", action="store_true", help="pace steps on the wall clock")
    parser.add_argument("--webhook-url")
    parser.add_argument("--report-dir")
    parser.add_argument("--serve", action="store_true", help="only run the mesh and print its topology")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not args.scenario and not args.serve:
        parser.error("one of --scenario or --serve is required")

    try:
        spec = MeshSpec.from_file(args.mesh)
        scenario = Scenario.from_file(args.scenario) if args.scenario else None
        mesh = spawn_mesh(spec, args.seed)
    except (OSError, ValueError, TypeError, KeyError, SimError) as exc:
        print(f"hcs-sim: {exc}", file=sys.stderr)
        return 2

    with mesh:
        if args.serve:
            print(json.dumps(mesh.topology(), indent=2))
            try:
                while True:
                    time.sleep(3600)
            except KeyboardInterrupt:
                return 0
        hcsd = Hcsd(mesh.dependency_graph(), interval_ms=scenario.step_ms,
                    webhook_url=args.webhook_url, report_dir=args.report_dir)
        hcsd.serve()
        try:
            mesh.attach_agents(hcsd.url)
            result = run_scenario(mesh, hcsd, scenario, realtime=args.realtime, out=args.out)
            if args.webhook_url:
                hcsd.presenter.outbox.flush(10)
        finally:
            hcsd.stop()
    for idx, fault in enumerate(scenario.faults):
        lat = result.detection_latency_ms[idx]
        status = "ok" if result.attribution_correct[idx] and (lat is not None or not _expected_rules(fault.kind)) else "FAIL"
        print(f"{status:4} {fault.kind:<12} {fault.target:<8} latency={'-' if lat is None else f'{lat / 1000:.1f}s'}")
    for miss in result.missed:
        print(f"missed: {miss}")
    if scenario.expect_no_issues:
        print(f"false positives: {len(result.false_positives)}")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
