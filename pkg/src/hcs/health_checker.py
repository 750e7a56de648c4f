"""Connectivity, system and service checkers and the per-cycle diagnosis.

The checker is the client: it probes each service's health endpoint, reads
the agents' gauges and events from the store, times service-level probes
(DB statements, REST hops) against an EWMA baseline, then folds everything
into per-service statuses and hands the root-cause report to the presenter.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import requests

from hcs.core_model import (
    DependencyGraph,
    Event,
    HcsError,
    HealthStatus,
    Issue,
    MetricSample,
    RootCauseReport,
    ServiceDescriptor,
    attributed_roots,
    classify_failures,
    issue_id,
    worst_status,
)
from hcs.receiver_store import SeriesStore

log = logging.getLogger(__name__)

SYSTEM_GAUGES = ("cpu_pct", "mem_used_pct", "swap_used_pct", "disk_used_pct", "net_rx_bytes_per_s", "net_tx_bytes_per_s")
COMPONENT_PRIORITY = ("db_query", "rest_rtt", "network_rtt")  # tie-break order, highest first
DISTRESS_RULES = ("swap_exhausted", "oomk_victim")
WINDOW = 5


class NonFiniteObservation(HcsError, ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    cpu_warn_pct: float = 95.0
    mem_warn_pct: float = 90.0
    swap_warn_pct: float = 80.0
    swap_crit_pct: float = 100.0
    disk_warn_pct: float = 90.0
    latency_factor: float = 2.0
    latency_margin_ms: float = 50.0
    probe_timeout_ms: int = 2000
    down_after: int = 3
    degraded_after: int = 1
    staleness_ms: int = 30000
    cpu_sustain_cycles: int = 3
    latency_warmup: int = 5
    ewma_alpha: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v <= 0:
                raise ValueError(f"threshold {f.name} must be a positive number, got {v!r}")
        if self.swap_warn_pct >= self.swap_crit_pct:
            raise ValueError("swap_warn_pct must be below swap_crit_pct")
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must lie in (0, 1]")
        if self.down_after > WINDOW or self.degraded_after > WINDOW:
            raise ValueError(f"down_after/degraded_after cannot exceed the window of {WINDOW}")

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "Thresholds":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ProbeResult:
    target: str
    sent_ms: int
    outcome: str  # ok | timeout | refused | bad_status
    rtt_ms: Optional[float] = None
    code: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"

    def as_evidence(self):
        if self.ok:
            return MetricSample(self.target, self.sent_ms, "gauge", "connectivity_rtt_ms", self.rtt_ms, "ms")
        payload = {"outcome": self.outcome, "target": self.target}
        if self.code is not None:
            payload["code"] = str(self.code)
        return Event(self.target, self.sent_ms, "probe_error", payload)


def probe(target: ServiceDescriptor, timeout_ms: int, session=None, now_ms: Optional[int] = None) -> ProbeResult:
    """GET the target's health endpoint and classify what happened."""
    session = session or requests
    sent_ms = now_ms if now_ms is not None else int(time.time() * 1000)
    url = f"http://{target.probe_address}{target.probe_path}"
    t0 = time.perf_counter()
    try:
        resp = session.get(url, timeout=timeout_ms / 1000.0)
    except requests.Timeout:
        return ProbeResult(target.id, sent_ms, "timeout")
    except requests.ConnectionError as exc:
        if _is_timeout(exc):
            return ProbeResult(target.id, sent_ms, "timeout")
        return ProbeResult(target.id, sent_ms, "refused")
    rtt = (time.perf_counter() - t0) * 1000.0
    if rtt > timeout_ms:
        return ProbeResult(target.id, sent_ms, "timeout")
    if 200 <= resp.status_code < 300:
        return ProbeResult(target.id, sent_ms, "ok", rtt_ms=max(rtt, 1e-3))
    return ProbeResult(target.id, sent_ms, "bad_status", code=resp.status_code)


def _is_timeout(exc: BaseException) -> bool:
    # urllib3 sometimes surfaces a connect deadline as a plain ConnectionError
    return "timed out" in str(exc).lower()


class LivenessWindow:
    """Last ``WINDOW`` probe results for one service, oldest first."""

    def __init__(self, results: Iterable[ProbeResult] = ()):
        self._q: deque[ProbeResult] = deque(results, maxlen=WINDOW)

    def push(self, result: ProbeResult) -> None:
        self._q.append(result)

    @property
    def results(self) -> list[ProbeResult]:
        return list(self._q)

    def __len__(self):
        return len(self._q)


def liveness_status(window: LivenessWindow, thresholds: Thresholds = Thresholds()) -> HealthStatus:
    results = window.results
    if not results:
        return HealthStatus.UNKNOWN
    failed = [not r.ok for r in results]
    if len(failed) >= thresholds.down_after and all(failed[-thresholds.down_after:]):
        return HealthStatus.DOWN
    newest_bad = len(failed) >= thresholds.degraded_after and all(failed[-thresholds.degraded_after:])
    if newest_bad or sum(failed) >= 2:
        return HealthStatus.DEGRADED
    return HealthStatus.HEALTHY


@dataclass(frozen=True)
class LatencyBaseline:
    ewma_ms: float = 0.0
    warmup_count: int = 0
    static: bool = False

    @classmethod
    def fixed(cls, expected_ms: float) -> "LatencyBaseline":
        """A configured expectation that replaces the learned average."""
        return cls(float(expected_ms), 10**9, True)

    def warmed(self, warmup: int = 5) -> bool:
        return self.static or self.warmup_count >= warmup


def ewma_update(baseline: LatencyBaseline, observation_ms: float, alpha: float = 0.2) -> LatencyBaseline:
    if not isinstance(observation_ms, (int, float)) or not math.isfinite(observation_ms):
        raise NonFiniteObservation(f"latency observation {observation_ms!r} is not finite")
    if observation_ms < 0:
        raise ValueError("latency observation must be non-negative")
    if baseline.static:
        return baseline
    if baseline.warmup_count == 0:
        return LatencyBaseline(float(observation_ms), 1)
    return LatencyBaseline(alpha * observation_ms + (1 - alpha) * baseline.ewma_ms, baseline.warmup_count + 1)


def is_delayed(observation_ms: float, ewma_ms: float, thresholds: Thresholds) -> bool:
    return observation_ms > max(thresholds.latency_factor * ewma_ms, ewma_ms + thresholds.latency_margin_ms)


def _make_issue(category, severity, subject, rule_id, message, evidence, now_ms) -> Issue:
    return Issue(
        id=issue_id(category, subject, rule_id, now_ms),
        category=category,
        severity=severity,
        subject=subject,
        rule_id=rule_id,
        message=message,
        evidence=tuple(evidence),
        first_seen_ms=now_ms,
        last_seen_ms=now_ms,
    )


def latency_metric(probe_name: str) -> str:
    return f"latency_ms.{probe_name}"


def check_latency(service: str, probe_name: str, observation_ms: float, baseline: LatencyBaseline,
                  thresholds: Thresholds = Thresholds(), now_ms: int = 1,
                  statement: Optional[str] = None) -> tuple[Optional[Issue], LatencyBaseline]:
    """Compare one observation against its baseline, then update the baseline.

    Delayed observations never feed the average, so a spike cannot drag the
    expectation up. Nothing fires until the baseline is warmed up.
    """
    if not baseline.warmed(thresholds.latency_warmup):
        return None, ewma_update(baseline, observation_ms, thresholds.ewma_alpha)
    if not math.isfinite(observation_ms):
        raise NonFiniteObservation(f"latency observation {observation_ms!r} is not finite")
    if not is_delayed(observation_ms, baseline.ewma_ms, thresholds):
        return None, ewma_update(baseline, observation_ms, thresholds.ewma_alpha)
    labels = {"probe": probe_name}
    if statement:
        labels["statement"] = statement
    evidence = MetricSample(service, now_ms, "gauge", latency_metric(probe_name), observation_ms, "ms", labels)
    what = f"statement '{statement}'" if statement else f"probe '{probe_name}'"
    msg = (f"{service}: {what} took {observation_ms:.1f} ms, expected about {baseline.ewma_ms:.1f} ms "
           f"({observation_ms / baseline.ewma_ms if baseline.ewma_ms else math.inf:.1f}x)")
    return _make_issue("service", "warning", service, "latency_delay", msg, [evidence], now_ms), baseline


def classify_delay_area(service: str, components: Mapping[str, tuple[float, LatencyBaseline]],
                        thresholds: Thresholds = Thresholds()) -> Optional[str]:
    """Name the delayed component with the largest slowdown ratio, if any."""
    best, best_key = None, None
    for name, (obs, base) in components.items():
        if not base.warmed(thresholds.latency_warmup) or not is_delayed(obs, base.ewma_ms, thresholds):
            continue
        ratio = obs / base.ewma_ms if base.ewma_ms > 0 else math.inf
        prio = -COMPONENT_PRIORITY.index(name) if name in COMPONENT_PRIORITY else -len(COMPONENT_PRIORITY)
        key = (ratio, prio)
        if best_key is None or key > best_key:
            best, best_key = name, key
    return best


def check_system(snapshots: Mapping[str, Mapping[str, MetricSample]], events: Sequence[Event],
                 thresholds: Thresholds = Thresholds(), now_ms: int = 1,
                 cpu_history: Optional[Mapping[str, Sequence[MetricSample]]] = None) -> list[Issue]:
    """System-level rules over the newest gauges and this cycle's events.

    ``cpu_history`` holds each service's recent per-cycle cpu samples, newest
    last; the saturation rule needs ``cpu_sustain_cycles`` of them in a row.
    """
    issues = []
    for svc in sorted(snapshots):
        g = snapshots[svc]
        swap = g.get("swap_used_pct")
        if swap is not None and swap.value >= thresholds.swap_crit_pct:
            issues.append(_make_issue("system", "critical", svc, "swap_exhausted",
                                      f"{svc}: swap usage at {swap.value:.1f}%", [swap], now_ms))
        elif swap is not None and swap.value >= thresholds.swap_warn_pct:
            issues.append(_make_issue("system", "warning", svc, "swap_high",
                                      f"{svc}: swap usage at {swap.value:.1f}%", [swap], now_ms))
        for metric, limit, rule, label in (
            ("mem_used_pct", thresholds.mem_warn_pct, "mem_high", "memory"),
            ("disk_used_pct", thresholds.disk_warn_pct, "disk_high", "disk"),
        ):
            s = g.get(metric)
            if s is not None and s.value >= limit:
                issues.append(_make_issue("system", "warning", svc, rule, f"{svc}: {label} usage at {s.value:.1f}%", [s], now_ms))
        hist = list((cpu_history or {}).get(svc, ()))[-thresholds.cpu_sustain_cycles:]
        if len(hist) >= thresholds.cpu_sustain_cycles and all(s.value >= thresholds.cpu_warn_pct for s in hist):
            issues.append(_make_issue("system", "warning", svc, "cpu_saturated",
                                      f"{svc}: cpu at or above {thresholds.cpu_warn_pct:g}% for {len(hist)} cycles",
                                      hist, now_ms))

    by_source: dict[tuple[str, str], list[Event]] = {}
    for ev in events:
        by_source.setdefault((ev.source, ev.type), []).append(ev)
    for (src, etype), evs in sorted(by_source.items()):
        if etype == "oomk":
            victims = ", ".join(f"pid {e.payload.get('victim_pid', '?')} ({e.payload.get('victim_name', '?')})" for e in evs)
            issues.append(_make_issue("system", "critical", src, "oomk_victim",
                                      f"{src}: OOM killer terminated {victims}", evs, now_ms))
        elif etype == "probe_error":
            reasons = "; ".join(sorted({e.payload.get("error", "collector failure") for e in evs}))
            issues.append(_make_issue("system", "warning", src, "collector_error",
                                      f"{src}: metric collection failed: {reasons}", evs, now_ms))
    return issues


@dataclass(frozen=True)
class LatencyObservation:
    probe_name: str
    component: str
    observation_ms: float
    statement: Optional[str] = None


@dataclass(frozen=True)
class Diagnosis:
    cycle_ts_ms: int
    statuses: Mapping[str, HealthStatus]
    report: RootCauseReport
    issues: tuple
    delay_areas: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cycle_ts_ms": self.cycle_ts_ms,
            "statuses": {k: self.statuses[k].value for k in sorted(self.statuses)},
            "report": self.report.to_dict(),
            "issues": [i.to_dict() for i in self.issues],
            "delay_areas": {k: self.delay_areas[k] for k in sorted(self.delay_areas)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class Prober:
    """Checker-side probes. Subclass or stub for tests."""

    def probe(self, target: ServiceDescriptor, timeout_ms: int, now_ms: int) -> ProbeResult:
        raise NotImplementedError

    def latencies(self, target: ServiceDescriptor, timeout_ms: int) -> list[LatencyObservation]:
        return []


class HttpProber(Prober):
    """Real HTTP probes; DB statements are sampled ``db_samples`` times and averaged."""

    def __init__(self, db_samples: int = 5):
        self.db_samples = db_samples
        self._local = threading.local()

    @property
    def session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def probe(self, target, timeout_ms, now_ms):
        return probe(target, timeout_ms, self.session, now_ms)

    def latencies(self, target, timeout_ms):
        base = f"http://{target.probe_address}"
        out = []
        for stmt in target.db_statements:
            times = []
            for _ in range(self.db_samples):
                try:
                    t0 = time.perf_counter()
                    resp = self.session.get(f"{base}/db/probe", params={"stmt": stmt}, timeout=timeout_ms / 1000.0)
                    wall = (time.perf_counter() - t0) * 1000.0
                    if resp.status_code != 200:
                        break
                    times.append(float(resp.json().get("query_ms", wall)))
                except (requests.RequestException, ValueError):
                    break
            if times:
                out.append(LatencyObservation(f"db:{stmt}", "db_query", sum(times) / len(times), stmt))
        if target.work_path:
            try:
                t0 = time.perf_counter()
                resp = self.session.get(base + target.work_path, timeout=timeout_ms / 1000.0)
                wall = (time.perf_counter() - t0) * 1000.0
                if resp.status_code == 200:
                    db_total = sum(seg.get("db_ms", 0.0) for seg in resp.json().get("segments", []))
                    out.append(LatencyObservation("rest", "rest_rtt", max(0.0, wall - db_total), target.work_path))
            except (requests.RequestException, ValueError):
                pass
        return out


class HealthChecker:
    """Owns liveness windows, latency baselines and issue history across cycles."""

    def __init__(self, graph: DependencyGraph, store: SeriesStore, prober: Prober,
                 thresholds: Thresholds = Thresholds(), expected_ms: Optional[Mapping[str, Mapping[str, float]]] = None,
                 max_workers: int = 8):
        self.graph = graph
        self.store = store
        self.prober = prober
        self.thresholds = thresholds
        self.windows = {sid: LivenessWindow() for sid in graph.services}
        self.baselines: dict[tuple[str, str], LatencyBaseline] = {}
        for sid, probes in (expected_ms or {}).items():
            for name, ms in probes.items():
                self.baselines[(sid, name)] = LatencyBaseline.fixed(ms)
        self.cpu_history: dict[str, deque] = {sid: deque(maxlen=thresholds.cpu_sustain_cycles) for sid in graph.services}
        self.listeners: list[Callable[[Diagnosis], None]] = []
        self.latest: Optional[Diagnosis] = None
        self._active: dict[tuple, int] = {}
        self._event_seq = 0
        self._started_ms: Optional[int] = None
        self._seen_data: set[str] = set()
        self._pending: list[Issue] = []
        self._pending_lock = threading.Lock()
        self._cycle_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="probe")

    def close(self) -> None:
        self._pool.shutdown(wait=False)

    def raise_internal(self, rule_id: str, message: str, subject: str = "hcsd") -> None:
        """Queue a one-shot system warning (journal failures and the like) for the next cycle."""
        ev = Event(subject, int(time.time() * 1000), "probe_error", {"error": message})
        with self._pending_lock:
            self._pending.append(_make_issue("system", "warning", subject, rule_id, message, [ev], ev.ts_ms))

    def _delay_rank(self, obs: float, base: LatencyBaseline) -> tuple:
        eligible = base.warmed(self.thresholds.latency_warmup) and is_delayed(obs, base.ewma_ms, self.thresholds)
        return (eligible, obs / base.ewma_ms if base.ewma_ms > 0 else math.inf)

    def _probe_all(self, now_ms: int) -> dict[str, ProbeResult]:
        ids = sorted(self.graph.services)
        futures = {sid: self._pool.submit(self.prober.probe, self.graph.services[sid],
                                          self.thresholds.probe_timeout_ms, now_ms) for sid in ids}
        return {sid: futures[sid].result() for sid in ids}

    def _gauges(self, sid: str, now_ms: int) -> dict[str, MetricSample]:
        out = {}
        for name in SYSTEM_GAUGES:
            pt = self.store.latest(sid, name, self.thresholds.staleness_ms, now_ms)
            if pt is not None:
                out[name] = MetricSample(sid, pt[0], "gauge", name, pt[1], self.store.unit_of(sid, name))
        return out

    def run_cycle(self, now_ms: Optional[int] = None) -> Diagnosis:
        with self._cycle_lock:
            return self._run_cycle(now_ms if now_ms is not None else int(time.time() * 1000))

    def _run_cycle(self, now_ms: int) -> Diagnosis:
        th = self.thresholds
        if self._started_ms is None:
            self._started_ms = now_ms
        services = sorted(self.graph.services)

        # 1. connectivity
        results = self._probe_all(now_ms)
        found: list[Issue] = []
        liveness = {}
        for sid in services:
            r = results[sid]
            self.windows[sid].push(r)
            if r.ok:
                self.store.add_sample(r.as_evidence())
            liveness[sid] = liveness_status(self.windows[sid], th)
            if liveness[sid] in (HealthStatus.DOWN, HealthStatus.DEGRADED):
                down = liveness[sid] is HealthStatus.DOWN
                bad = [x for x in self.windows[sid].results if not x.ok]
                outcomes = ", ".join(x.outcome if x.code is None else f"{x.outcome}({x.code})" for x in bad[-th.down_after:])
                found.append(_make_issue(
                    "connectivity", "critical" if down else "warning", sid,
                    "service_down" if down else "service_degraded",
                    f"{sid} is {'unreachable' if down else 'unstable'}: recent probes {outcomes}",
                    [x.as_evidence() for x in bad], now_ms))

        # 2./3. system
        snapshots, stale = {}, []
        for sid in services:
            g = self._gauges(sid, now_ms)
            if g:
                snapshots[sid] = g
                self._seen_data.add(sid)
                cpu = g.get("cpu_pct")
                if cpu is not None and (not self.cpu_history[sid] or self.cpu_history[sid][-1].ts_ms != cpu.ts_ms):
                    self.cpu_history[sid].append(cpu)
            else:
                stale.append(sid)
                self.cpu_history[sid].clear()
        fresh = self.store.events_since(self._event_seq)
        if fresh:
            self._event_seq = fresh[-1].seq
        events = [e.event for e in fresh]
        found += check_system(snapshots, events, th, now_ms, {k: list(v) for k, v in self.cpu_history.items()})

        grace_over = now_ms - self._started_ms >= th.staleness_ms
        for sid in stale:
            if sid in self._seen_data or grace_over:
                newest = self.store.newest_ts(sid)
                evidence = Event(sid, now_ms, "probe_error",
                                 {"error": "no agent data", "newest_ts_ms": str(newest) if newest else "none"})
                age = f"{(now_ms - newest) / 1000:.0f} s" if newest else "ever"
                found.append(_make_issue("system", "warning", sid, "data_stale",
                                         f"{sid}: no agent samples for {age} (limit {th.staleness_ms / 1000:.0f} s)",
                                         [evidence], now_ms))

        # 3. service latency, only for services that answered this cycle
        delay_areas = {}
        for sid in services:
            if not results[sid].ok:
                continue
            comps: dict[str, tuple[float, LatencyBaseline]] = {}
            candidates: dict[str, list] = {}
            net = LatencyObservation("network", "network_rtt", results[sid].rtt_ms)
            for obs in [net] + list(self.prober.latencies(self.graph.services[sid], th.probe_timeout_ms)):
                key = (sid, obs.probe_name)
                before = self.baselines.get(key, LatencyBaseline())
                labels = {"probe": obs.probe_name}
                if obs.statement:
                    labels["statement"] = obs.statement
                self.store.add_sample(MetricSample(sid, now_ms, "gauge", latency_metric(obs.probe_name),
                                                   obs.observation_ms, "ms", labels))
                issue, after = check_latency(sid, obs.probe_name, obs.observation_ms, before, th, now_ms, obs.statement)
                self.baselines[key] = after
                if issue:
                    found.append(issue)
                candidates.setdefault(obs.component, []).append((obs.observation_ms, before))
            for comp, obs_list in candidates.items():
                comps[comp] = max(obs_list, key=lambda ob: self._delay_rank(*ob))
            area = classify_delay_area(sid, comps, th)
            if area:
                delay_areas[sid] = area

        # 2. statuses
        rules = {}
        for i in found:
            rules.setdefault(i.subject, set()).add(i.rule_id)
        statuses = {}
        for sid in services:
            contrib = [liveness[sid]]
            if rules.get(sid, set()) & set(DISTRESS_RULES):
                contrib.append(HealthStatus.DEGRADED)
            if sid in stale:
                contrib.append(HealthStatus.UNKNOWN)
            statuses[sid] = worst_status(contrib)

        # 4./5. root cause
        report = classify_failures(self.graph, statuses)
        with self._pending_lock:
            found += self._pending
            self._pending = []
        issues = []
        active = {}
        for i in found:
            first = self._active.get(i.dedup_key, i.first_seen_ms)
            active[i.dedup_key] = first
            roots = attributed_roots(self.graph, report, i.subject) if i.subject in self.graph.services else []
            issues.append(replace(i, id=issue_id(i.category, i.subject, i.rule_id, first), first_seen_ms=first,
                                  last_seen_ms=now_ms, root_cause=roots[0] if roots else None,
                                  root_causes=tuple(roots)))
        self._active = active
        issues.sort(key=lambda i: (i.category, i.subject, i.rule_id))

        diagnosis = Diagnosis(now_ms, statuses, report, tuple(issues), delay_areas)
        self.latest = diagnosis
        for listener in self.listeners:
            try:
                listener(diagnosis)
            except Exception:  # a presenter fault must not break checking
                log.exception("diagnosis listener failed")
        return diagnosis


def run_cycle(checker: HealthChecker, now_ms: Optional[int] = None) -> Diagnosis:
    return checker.run_cycle(now_ms)
