"""Domain types and the dependency-graph algebra.

Everything in here is immutable and side-effect free. The graph stores
"requires" edges as ``(dependent, dependency)`` pairs, so an edge ``("B", "A")``
reads "B requires A" and a failure of A explains a failure of B.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

SERVICE_ID_RE = re.compile(r"^[a-zA-Z0-9._-]+$")


class HcsError(Exception):
    """Base class for errors raised by this package."""


class UnknownService(HcsError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "unknown service"


class SelfDependency(HcsError, ValueError):
    pass


class DuplicateServiceId(HcsError, ValueError):
    pass


class EmptyInput(HcsError, ValueError):
    pass


class TopologyError(HcsError, ValueError):
    """Malformed topology file. ``line`` is 1-based, or None when unknown."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = "<topology>"):
        self.message = message
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


class HealthStatus(enum.Enum):
    HEALTHY = "Healthy"
    DEGRADED = "Degraded"
    DOWN = "Down"
    UNKNOWN = "Unknown"

    @property
    def severity(self) -> int:
        return _SEVERITY[self]

    @property
    def failing(self) -> bool:
        return self in (HealthStatus.DEGRADED, HealthStatus.DOWN)


# Healthy < Unknown < Degraded < Down. Missing data is not evidence of health.
_SEVERITY = {
    HealthStatus.HEALTHY: 0,
    HealthStatus.UNKNOWN: 1,
    HealthStatus.DEGRADED: 2,
    HealthStatus.DOWN: 3,
}


def worst_status(statuses: Iterable[HealthStatus]) -> HealthStatus:
    """Join of the severity semilattice; raises EmptyInput on an empty iterable."""
    statuses = list(statuses)
    if not statuses:
        raise EmptyInput("worst_status needs at least one status")
    return max(statuses, key=_SEVERITY.__getitem__)


@dataclass(frozen=True)
class ServiceDescriptor:
    id: str
    display_name: str = ""
    probe_address: str = ""
    probe_path: str = "/health"
    # Optional service-level probe targets exercised by the service checker.
    db_statements: tuple[str, ...] = ()
    work_path: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not SERVICE_ID_RE.match(self.id):
            raise ValueError(f"invalid service id {self.id!r}")
        if not self.display_name:
            object.__setattr__(self, "display_name", self.id)
        if self.probe_path and not self.probe_path.startswith("/"):
            raise ValueError(f"probe_path must start with '/': {self.probe_path!r}")
        object.__setattr__(self, "db_statements", tuple(self.db_statements))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "display_name": self.display_name,
            "probe_address": self.probe_address,
            "probe_path": self.probe_path,
        }
        if self.db_statements:
            d["db_statements"] = list(self.db_statements)
        if self.work_path:
            d["work_path"] = self.work_path
        return d


SAMPLE_KINDS = ("gauge", "counter")
EVENT_TYPES = ("oomk", "service_exit", "probe_error")


@dataclass(frozen=True)
class MetricSample:
    source: str
    ts_ms: int
    kind: str
    name: str
    value: float
    unit: str = ""
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.ts_ms, int) or isinstance(self.ts_ms, bool) or self.ts_ms <= 0:
            raise ValueError(f"ts_ms must be a positive integer, got {self.ts_ms!r}")
        if self.kind not in SAMPLE_KINDS:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if not self.name:
            raise ValueError("empty metric name")
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise ValueError(f"value must be a number, got {self.value!r}")
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite value for {self.name}")
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "labels", dict(self.labels))

    def __hash__(self):
        return hash((self.source, self.ts_ms, self.kind, self.name, self.value))

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "ts_ms": self.ts_ms,
            "kind": self.kind,
            "name": self.name,
            "value": self.value,
            "unit": self.unit,
            "labels": dict(self.labels),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricSample":
        return cls(
            source=d["source"],
            ts_ms=d["ts_ms"],
            kind=d["kind"],
            name=d["name"],
            value=d["value"],
            unit=d.get("unit", ""),
            labels=d.get("labels") or {},
        )


@dataclass(frozen=True)
class Event:
    source: str
    ts_ms: int
    type: str
    payload: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.ts_ms, int) or isinstance(self.ts_ms, bool) or self.ts_ms <= 0:
            raise ValueError(f"ts_ms must be a positive integer, got {self.ts_ms!r}")
        if self.type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {self.type!r}")
        object.__setattr__(self, "payload", {str(k): str(v) for k, v in dict(self.payload).items()})

    def __hash__(self):
        return hash((self.source, self.ts_ms, self.type, tuple(sorted(self.payload.items()))))

    def key(self) -> tuple:
        return (self.source, self.ts_ms, self.type, tuple(sorted(self.payload.items())))

    def to_dict(self) -> dict:
        return {"source": self.source, "ts_ms": self.ts_ms, "type": self.type, "payload": dict(self.payload)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Event":
        return cls(source=d["source"], ts_ms=d["ts_ms"], type=d["type"], payload=d.get("payload") or {})


def evidence_to_dict(item) -> dict:
    if isinstance(item, MetricSample):
        return {"sample": item.to_dict()}
    if isinstance(item, Event):
        return {"event": item.to_dict()}
    raise TypeError(f"not evidence: {item!r}")


ISSUE_CATEGORIES = ("connectivity", "system", "service")
SEVERITIES = ("warning", "critical")


def issue_id(category: str, subject: str, rule_id: str, first_seen_ms: int, bucket_ms: int = 60_000) -> str:
    raw = f"{category}|{subject}|{rule_id}|{first_seen_ms // bucket_ms}"
    return hashlib.sha1(raw.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Issue:
    id: str
    category: str
    severity: str
    subject: str
    rule_id: str
    message: str
    evidence: tuple = ()
    root_cause: Optional[str] = None
    first_seen_ms: int = 0
    last_seen_ms: int = 0
    # All attributed roots in lexicographic order; root_cause is the first.
    root_causes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.category not in ISSUE_CATEGORIES:
            raise ValueError(f"unknown issue category {self.category!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if not self.evidence:
            raise ValueError("issue evidence must be non-empty")
        object.__setattr__(self, "evidence", tuple(self.evidence))
        object.__setattr__(self, "root_causes", tuple(self.root_causes))

    @property
    def dedup_key(self) -> tuple[str, str, str]:
        return (self.category, self.subject, self.rule_id)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "severity": self.severity,
            "subject": self.subject,
            "rule_id": self.rule_id,
            "message": self.message,
            "evidence": [evidence_to_dict(e) for e in self.evidence],
            "root_cause": self.root_cause,
            "root_causes": list(self.root_causes),
            "first_seen_ms": self.first_seen_ms,
            "last_seen_ms": self.last_seen_ms,
        }


@dataclass(frozen=True)
class RootCauseReport:
    roots: frozenset
    propagated: frozenset
    healthy: frozenset
    unknown: frozenset

    def to_dict(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("roots", "propagated", "healthy", "unknown")}


@dataclass(frozen=True)
class DependencyGraph:
    """Validated service graph plus its cached SCC condensation.

    ``components`` lists the strongly connected components in reverse
    topological order of the requires relation: every component appears
    after all components it requires.
    """

    services: Mapping[str, ServiceDescriptor]
    edges: frozenset
    components: tuple
    component_of: Mapping[str, int]
    component_edges: Mapping[int, frozenset]

    @property
    def nodes(self) -> frozenset:
        return frozenset(self.services)

    def dependencies(self, node: str) -> list[str]:
        return sorted(d for (s, d) in self.edges if s == node)

    def dependents(self, node: str) -> list[str]:
        return sorted(s for (s, d) in self.edges if d == node)

    def to_dict(self) -> dict:
        return {
            "services": [self.services[k].to_dict() for k in sorted(self.services)],
            "requires": [list(e) for e in sorted(self.edges)],
        }


def strongly_connected_components(nodes: Sequence[str], succ: Mapping[str, Sequence[str]]) -> list[list[str]]:
    """Iterative Tarjan. Components come out sinks-first."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    out: list[list[str]] = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ.get(root, ())))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(sorted(comp))
    return out


def build_dependency_graph(services: Sequence[ServiceDescriptor], edges: Iterable[tuple[str, str]]) -> DependencyGraph:
    by_id: dict[str, ServiceDescriptor] = {}
    for svc in services:
        if svc.id in by_id:
            raise DuplicateServiceId(f"duplicate service id {svc.id!r}")
        by_id[svc.id] = svc
    edge_set = set()
    for dependent, dependency in edges:
        for end in (dependent, dependency):
            if end not in by_id:
                raise UnknownService(f"edge ({dependent!r}, {dependency!r}) names undeclared service {end!r}")
        if dependent == dependency:
            raise SelfDependency(f"service {dependent!r} cannot require itself")
        edge_set.add((dependent, dependency))

    node_order = sorted(by_id)
    succ: dict[str, list[str]] = {n: [] for n in node_order}
    for s, d in sorted(edge_set):
        succ[s].append(d)
    comps = strongly_connected_components(node_order, succ)
    component_of = {n: i for i, comp in enumerate(comps) for n in comp}
    cedges: dict[int, set] = {i: set() for i in range(len(comps))}
    for s, d in edge_set:
        cs, cd = component_of[s], component_of[d]
        if cs != cd:
            cedges[cs].add(cd)
    return DependencyGraph(
        services=dict(by_id),
        edges=frozenset(edge_set),
        components=tuple(tuple(c) for c in comps),
        component_of=component_of,
        component_edges={k: frozenset(v) for k, v in cedges.items()},
    )


def classify_failures(graph: DependencyGraph, statuses: Mapping[str, HealthStatus]) -> RootCauseReport:
    """Split failing services into roots and propagated failures.

    A failing service is a root when no component it transitively requires
    holds a failing service. All failing members of such a component are
    roots. Services missing from ``statuses`` count as Unknown.
    """
    status = {n: statuses.get(n, HealthStatus.UNKNOWN) for n in graph.services}
    comp_failing = [any(status[n].failing for n in comp) for comp in graph.components]
    failing_below = [False] * len(graph.components)
    # components are sinks-first, so every dependency is already resolved
    for i in range(len(graph.components)):
        failing_below[i] = any(comp_failing[j] or failing_below[j] for j in graph.component_edges[i])

    roots, propagated, healthy, unknown = set(), set(), set(), set()
    for n, st in status.items():
        if st.failing:
            (propagated if failing_below[graph.component_of[n]] else roots).add(n)
        elif st is HealthStatus.UNKNOWN:
            unknown.add(n)
        else:
            healthy.add(n)
    return RootCauseReport(frozenset(roots), frozenset(propagated), frozenset(healthy), frozenset(unknown))


def reachable(graph: DependencyGraph, start: str) -> set[str]:
    """Services transitively required by ``start`` (excluding start unless on a cycle)."""
    if start not in graph.services:
        raise UnknownService(f"unknown service {start!r}")
    succ: dict[str, list[str]] = {}
    for s, d in graph.edges:
        succ.setdefault(s, []).append(d)
    seen: set[str] = set()
    todo = list(succ.get(start, ()))
    while todo:
        n = todo.pop()
        if n in seen:
            continue
        seen.add(n)
        todo.extend(succ.get(n, ()))
    return seen


def impacted_by(graph: DependencyGraph, root: str) -> set[str]:
    """Every service that transitively requires ``root``."""
    if root not in graph.services:
        raise UnknownService(f"unknown service {root!r}")
    pred: dict[str, list[str]] = {}
    for s, d in graph.edges:
        pred.setdefault(d, []).append(s)
    seen: set[str] = set()
    todo = list(pred.get(root, ()))
    while todo:
        n = todo.pop()
        if n in seen:
            continue
        seen.add(n)
        todo.extend(pred.get(n, ()))
    seen.discard(root)
    return seen


def attributed_roots(graph: DependencyGraph, report: RootCauseReport, service: str) -> list[str]:
    """Roots that explain ``service``: itself if it is a root, else reachable roots."""
    if service in report.roots:
        return [service]
    if service in report.propagated:
        return sorted(reachable(graph, service) & report.roots)
    return []


def _line_of(text: str, needle: str) -> Optional[int]:
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def parse_topology(text: str, source: str = "<topology>") -> DependencyGraph:
    """Parse the JSON topology format into a validated graph.

    Errors carry the offending line number where it can be located.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(exc.msg, exc.lineno, source) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("services"), list):
        raise TopologyError("top level must be an object with a 'services' list", 1, source)
    services = []
    for entry in doc["services"]:
        if not isinstance(entry, dict) or "id" not in entry:
            raise TopologyError("service entry must be an object with an 'id'", _line_of(text, "{"), source)
        sid = entry["id"]
        try:
            services.append(
                ServiceDescriptor(
                    id=sid,
                    display_name=entry.get("display_name", ""),
                    probe_address=entry.get("probe_address", ""),
                    probe_path=entry.get("probe_path", "/health"),
                    db_statements=tuple(entry.get("db_statements", ())),
                    work_path=entry.get("work_path"),
                )
            )
        except (ValueError, TypeError) as exc:
            raise TopologyError(str(exc), _line_of(text, json.dumps(sid)), source) from None
    requires = doc.get("requires", [])
    if not isinstance(requires, list):
        raise TopologyError("'requires' must be a list of [dependent, dependency] pairs", _line_of(text, '"requires"'), source)
    edges = []
    for pair in requires:
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(p, str) for p in pair)):
            raise TopologyError(f"bad requires entry {pair!r}", _line_of(text, '"requires"'), source)
        edges.append((pair[0], pair[1]))
    try:
        return build_dependency_graph(services, edges)
    except DuplicateServiceId as exc:
        ids = [s.id for s in services]
        dup = next(i for i in ids if ids.count(i) > 1)
        needle = f'"id": {json.dumps(dup)}'
        lines = [i for i, ln in enumerate(text.splitlines(), 1) if needle in ln.replace('":"', '": "')]
        raise TopologyError(str(exc), lines[1] if len(lines) > 1 else _line_of(text, json.dumps(dup)), source) from None
    except (UnknownService, SelfDependency) as exc:
        bad = next(p for p in requires if p[0] not in {s.id for s in services} or p[1] not in {s.id for s in services} or p[0] == p[1])
        compact = json.dumps(bad)
        line = _line_of(text, compact) or _line_of(text, json.dumps(bad, separators=(",", ":")))
        raise TopologyError(str(exc), line, source) from None


def load_topology(path) -> DependencyGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(fh.read(), str(path))
