"""Reporter and Visualizer: DOT/SVG/HTML renderings and webhook notifications.

Rendering is pure. Delivery goes through a small bounded outbox drained by a
background thread so a dead webhook never stalls the check cycle.
"""

from __future__ import annotations

import datetime as dt
import html
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import requests

from hcs.core_model import DependencyGraph, HcsError, HealthStatus, Issue, classify_failures
from hcs.health_checker import Diagnosis, latency_metric

log = logging.getLogger(__name__)

STATUS_COLORS = {
    HealthStatus.HEALTHY: "green",
    HealthStatus.DEGRADED: "orange",
    HealthStatus.DOWN: "red",
    HealthStatus.UNKNOWN: "gray",
}
SVG_W, SVG_H = 800, 240
PLOT_LEFT, PLOT_RIGHT, PLOT_TOP, PLOT_BOTTOM = 70, 780, 30, 200
OUTBOX_CAPACITY = 64


class DeliveryFailed(HcsError, RuntimeError):
    pass


class ReportDirUnwritable(HcsError, OSError):
    pass


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_dot(graph: DependencyGraph, statuses: Mapping[str, HealthStatus], roots=None) -> str:
    """DOT digraph with status fill colours; root-cause nodes drawn bold."""
    if roots is None:
        roots = classify_failures(graph, statuses).roots
    lines = [
        "digraph hcs {",
        "  rankdir=LR;",
        '  node [shape=ellipse, style=filled, fontname="Helvetica", fontcolor="white"];',
    ]
    for sid in sorted(graph.services):
        st = statuses.get(sid, HealthStatus.UNKNOWN)
        label = _dot_quote(graph.services[sid].display_name)[:-1] + "\\n" + st.value + '"'
        attrs = [f"label={label}",
                 f"fillcolor={STATUS_COLORS[st]}"]
        if sid in roots:
            attrs.append("penwidth=3")
        lines.append(f"  {_dot_quote(sid)} [{', '.join(attrs)}];")
    for s, d in sorted(graph.edges):
        lines.append(f'  {_dot_quote(s)} -> {_dot_quote(d)} [label="requires"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _fmt_ts(ts_ms: int) -> str:
    return dt.datetime.fromtimestamp(ts_ms / 1000, tz=dt.timezone.utc).strftime("%H:%M:%S")


def _fmt_val(v: float) -> str:
    return f"{v:.6g}"


def render_timeseries_svg(series: Sequence[tuple[int, float]], annotations: Sequence[tuple[int, str]] = (),
                          title: str = "", unit: str = "") -> str:
    esc = html.escape
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}" '
            f'width="{SVG_W}" height="{SVG_H}" font-family="Helvetica" font-size="11">')
    parts = [head, f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
             f'<text x="{SVG_W // 2}" y="18" text-anchor="middle" font-size="13">{esc(title)}</text>']
    if not series:
        parts.append(f'<text x="{SVG_W // 2}" y="{SVG_H // 2}" text-anchor="middle" fill="gray">no data</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    ts = [p[0] for p in series]
    vs = [p[1] for p in series]
    t0, t1 = min(ts), max(ts)
    for a_ts, _ in annotations:
        t0, t1 = min(t0, a_ts), max(t1, a_ts)
    v0, v1 = min(vs), max(vs)
    w, h = PLOT_RIGHT - PLOT_LEFT, PLOT_BOTTOM - PLOT_TOP

    def x(t):
        return PLOT_LEFT + (w / 2 if t1 == t0 else (t - t0) / (t1 - t0) * w)

    def y(v):
        return PLOT_TOP + (h / 2 if v1 == v0 else (1 - (v - v0) / (v1 - v0)) * h)

    parts += [
        f'<line x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{PLOT_RIGHT}" y2="{PLOT_BOTTOM}" stroke="black"/>',
        f'<line x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}" stroke="black"/>',
        f'<text x="{PLOT_LEFT - 4}" y="{PLOT_TOP + 4}" text-anchor="end">{esc(_fmt_val(v1))}</text>',
        f'<text x="{PLOT_LEFT - 4}" y="{PLOT_BOTTOM}" text-anchor="end">{esc(_fmt_val(v0))}</text>',
        f'<text x="14" y="{(PLOT_TOP + PLOT_BOTTOM) // 2}" transform="rotate(-90 14 {(PLOT_TOP + PLOT_BOTTOM) // 2})" '
        f'text-anchor="middle">{esc(unit)}</text>',
        f'<text x="{PLOT_LEFT}" y="{PLOT_BOTTOM + 16}">{_fmt_ts(t0)}</text>',
        f'<text x="{PLOT_RIGHT}" y="{PLOT_BOTTOM + 16}" text-anchor="end">{_fmt_ts(t1)}</text>',
        f'<text x="{(PLOT_LEFT + PLOT_RIGHT) // 2}" y="{PLOT_BOTTOM + 32}" text-anchor="middle">time (UTC)</text>',
    ]
    pts = " ".join(f"{x(t):.2f},{y(v):.2f}" for t, v in series)
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>')
    for a_ts, label in annotations:
        ax = f"{x(a_ts):.2f}"
        parts.append(f'<g class="annotation"><line x1="{ax}" y1="{PLOT_TOP}" x2="{ax}" y2="{PLOT_BOTTOM}" '
                     f'stroke="crimson" stroke-dasharray="4 3"/>'
                     f'<text x="{ax}" y="{PLOT_TOP - 2}" fill="crimson" text-anchor="middle">{esc(label)}</text></g>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _issue_summary(issue: Issue) -> str:
    cause = f" (root cause: {', '.join(issue.root_causes)})" if issue.root_causes and issue.root_causes != (issue.subject,) else ""
    return f"[{issue.severity.upper()}] {issue.rule_id} on {issue.subject}: {issue.message}{cause}"


def _diagnosis_summary(d: Diagnosis) -> str:
    n_crit = sum(1 for i in d.issues if i.severity == "critical")
    roots = ", ".join(sorted(d.report.roots)) or "none"
    statuses = " ".join(f"{k}={d.statuses[k].value}" for k in sorted(d.statuses))
    return f"HCS cycle {d.cycle_ts_ms}: {len(d.issues)} issues ({n_crit} critical); roots: {roots}; {statuses}"


def _evidence_text(item) -> str:
    if "sample" in item:
        s = item["sample"]
        labels = "".join(f" {k}={v}" for k, v in sorted(s["labels"].items()))
        return f'{s["name"]}={_fmt_val(s["value"])}{s["unit"] and " " + s["unit"]} @ {s["ts_ms"]}{labels}'
    e = item["event"]
    payload = " ".join(f"{k}={v}" for k, v in sorted(e["payload"].items()))
    return f'{e["type"]} @ {e["ts_ms"]} {payload}'


def render_report_html(diagnosis: Diagnosis, dot_text: str = "", svgs: Optional[Mapping[str, str]] = None) -> str:
    esc = html.escape
    svgs = svgs or {}
    d = diagnosis.to_dict()
    rows = []
    for sid in sorted(diagnosis.statuses):
        st = diagnosis.statuses[sid]
        badge = ""
        if sid in diagnosis.report.roots:
            badge = '<span class="badge root">root cause</span>'
        elif sid in diagnosis.report.propagated:
            culprits = sorted({c for i in diagnosis.issues if i.subject == sid for c in i.root_causes})
            badge = f'<span class="badge">caused by {esc(", ".join(culprits) or "dependency")}</span>'
        area = diagnosis.delay_areas.get(sid, "")
        rows.append(f'<tr><td>{esc(sid)}</td><td class="st {st.value.lower()}">{st.value}</td>'
                    f"<td>{badge}</td><td>{esc(area)}</td></tr>")
    items = []
    for issue in d["issues"]:
        ev = "".join(f"<li><code>{esc(_evidence_text(e))}</code></li>" for e in issue["evidence"])
        rc = f' root cause: <b>{esc(", ".join(issue["root_causes"]))}</b>' if issue["root_causes"] else ""
        items.append(f'<li class="{issue["severity"]}"><b>{issue["severity"]}</b> '
                     f'<code>{esc(issue["rule_id"])}</code> [{issue["category"]}] {esc(issue["message"])}{rc}'
                     f"<ul>{ev}</ul></li>")
    charts = "".join(f"<figure><figcaption>{esc(name)}</figcaption>{svg}</figure>" for name, svg in sorted(svgs.items()))
    n = len(d["issues"])
    return f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>HCS diagnosis {diagnosis.cycle_ts_ms}</title>
<style>
body{{font-family:Helvetica,Arial,sans-serif;margin:2em}}
td,th{{padding:2px 10px;text-align:left}}
.st.healthy{{color:green}}.st.degraded{{color:darkorange}}.st.down{{color:red}}.st.unknown{{color:gray}}
.badge{{background:#eee;border-radius:3px;padding:0 4px}}.badge.root{{background:#c00;color:#fff}}
li.critical>b{{color:#c00}}li.warning>b{{color:darkorange}}
</style></head><body>
<h1>Diagnosis at {dt.datetime.fromtimestamp(diagnosis.cycle_ts_ms / 1000, tz=dt.timezone.utc).isoformat()}</h1>
<h2>Services</h2>
<table><tr><th>service</th><th>status</th><th>root cause</th><th>delay area</th></tr>
{chr(10).join(rows)}
</table>
<h2>{n} issue{"" if n == 1 else "s"}</h2>
<ul>{"".join(items)}</ul>
<h2>Charts</h2>
{charts}
<details><summary>Dependency graph (DOT)</summary><pre>{esc(dot_text)}</pre></details>
</body></html>
"""


def write_report(diagnosis: Diagnosis, html_text: str, dot_text: str, report_dir: str) -> str:
    """Write the cycle page, refresh latest.html and the DOT file; returns the cycle page path."""
    ts = diagnosis.cycle_ts_ms
    data = html_text.encode("utf-8")
    try:
        os.makedirs(report_dir, exist_ok=True)
        path = os.path.join(report_dir, f"diagnosis-{ts}.html")
        for p, payload in ((path, data), (os.path.join(report_dir, f"graph-{ts}.dot"), dot_text.encode("utf-8"))):
            with open(p, "wb") as fh:
                fh.write(payload)
        tmp = os.path.join(report_dir, ".latest.html.tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, os.path.join(report_dir, "latest.html"))
    except OSError as exc:
        raise ReportDirUnwritable(f"cannot write reports to {report_dir}: {exc}") from exc
    return path


@dataclass
class NotificationLedger:
    suppress_ms: int = 600_000
    last_notified: dict = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def should_notify(issue: Issue, ledger: NotificationLedger, now_ms: int) -> bool:
    with ledger.lock:
        last = ledger.last_notified.get(issue.dedup_key)
        if last is not None and now_ms - last <= ledger.suppress_ms:
            return False
        ledger.last_notified[issue.dedup_key] = now_ms
        return True


def webhook_body(item) -> dict:
    if isinstance(item, Diagnosis):
        return {"text": _diagnosis_summary(item), "hcs": item.to_dict()}
    if isinstance(item, Issue):
        return {"text": _issue_summary(item), "hcs": item.to_dict()}
    if isinstance(item, (list, tuple)):
        lines = [_issue_summary(i) for i in item]
        text = f"{len(lines)} warning{'s' if len(lines) != 1 else ''}: " + " | ".join(lines)
        return {"text": text, "hcs": {"issues": [i.to_dict() for i in item]}}
    raise TypeError(f"cannot post {type(item).__name__}")


def post_report(item, webhook_url: str, session=None, retries: int = 2, backoff_s: float = 1.0,
                timeout_s: float = 2.0) -> int:
    """POST ``{"text", "hcs"}``; returns the attempt count or raises DeliveryFailed."""
    session = session or requests
    body = json.dumps(webhook_body(item), sort_keys=True).encode("utf-8")
    last = None
    for attempt in range(1 + retries):
        if attempt:
            time.sleep(backoff_s)
        try:
            resp = session.post(webhook_url, data=body, headers={"Content-Type": "application/json"}, timeout=timeout_s)
            if 200 <= resp.status_code < 300:
                return attempt + 1
            last = f"HTTP {resp.status_code}"
        except requests.RequestException as exc:
            last = str(exc)
    raise DeliveryFailed(f"{webhook_url}: {last} after {1 + retries} attempts")


class Outbox:
    """Bounded queue of pending webhook posts drained by one daemon thread."""

    def __init__(self, capacity: int = OUTBOX_CAPACITY, retries: int = 2, backoff_s: float = 1.0):
        self.capacity = capacity
        self.retries = retries
        self.backoff_s = backoff_s
        self.dropped = 0
        self.delivered = 0
        self.failed = 0
        self._q: deque = deque()
        self._cv = threading.Condition()
        self._busy = False
        self._stop = False
        self._session = requests.Session()
        self._thread = threading.Thread(target=self._drain, name="hcs-outbox", daemon=True)
        self._thread.start()

    def put(self, item, url: str) -> None:
        with self._cv:
            self._q.append((item, url))
            while len(self._q) > self.capacity:
                self._q.popleft()
                self.dropped += 1
            self._cv.notify_all()

    def _drain(self) -> None:
        while True:
            with self._cv:
                while not self._q and not self._stop:
                    self._cv.wait()
                if self._stop and not self._q:
                    return
                item, url = self._q.popleft()
                self._busy = True
            try:
                post_report(item, url, self._session, self.retries, self.backoff_s)
                self.delivered += 1
            except DeliveryFailed as exc:
                self.failed += 1
                log.error("notification dropped: %s", exc)
            except Exception:
                self.failed += 1
                log.exception("notification dropped")
            finally:
                with self._cv:
                    self._busy = False
                    self._cv.notify_all()

    def flush(self, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        with self._cv:
            while self._q or self._busy:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cv.wait(left)
        return True

    def close(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        self._thread.join(timeout=5)


class Presenter:
    """Turns each Diagnosis into report files and channel notifications.

    Critical issues go to ``webhook_url`` one by one as soon as they appear;
    warnings ride in one batched message per cycle. The full diagnosis goes to
    ``reporter_url`` every cycle. Both URLs are optional.
    """

    def __init__(self, graph: DependencyGraph, store=None, webhook_url: Optional[str] = None,
                 reporter_url: Optional[str] = None, report_dir: Optional[str] = None,
                 suppress_ms: int = 600_000, backoff_s: float = 1.0, chart_window_ms: int = 30 * 60_000):
        self.graph = graph
        self.store = store
        self.webhook_url = webhook_url
        self.reporter_url = reporter_url
        self.report_dir = report_dir
        self.chart_window_ms = chart_window_ms
        self.ledger = NotificationLedger(suppress_ms)
        self.outbox = Outbox(backoff_s=backoff_s) if (webhook_url or reporter_url) else None
        self.detections: dict[tuple[str, str], list[tuple[int, str]]] = {}
        self.last_html: Optional[str] = None
        self.last_svgs: dict[str, str] = {}

    def close(self) -> None:
        if self.outbox:
            self.outbox.close()

    def _record_detections(self, d: Diagnosis) -> None:
        for i in d.issues:
            if i.rule_id != "latency_delay" or i.first_seen_ms != d.cycle_ts_ms:
                continue
            for ev in i.evidence:
                metric = getattr(ev, "name", None)
                if metric:
                    marks = self.detections.setdefault((i.subject, metric), [])
                    if (i.first_seen_ms, "delay") not in marks:
                        marks.append((i.first_seen_ms, "delay"))

    def charts(self, d: Diagnosis) -> dict[str, str]:
        if self.store is None:
            return {}
        t0, t1 = d.cycle_ts_ms - self.chart_window_ms, d.cycle_ts_ms + 1
        oomk: dict[str, list[tuple[int, str]]] = {}
        for se in self.store.events_since(0):
            ev = se.event
            if ev.type == "oomk" and t0 <= ev.ts_ms < t1:
                oomk.setdefault(ev.source, []).append((ev.ts_ms, f"oomk {ev.payload.get('victim_name', '')}".strip()))
        out = {}
        for source, metric in self.store.series_keys():
            if source not in self.graph.services:
                continue
            if metric == "swap_used_pct":
                marks = oomk.get(source, [])
                title = f"{source}: swap usage"
            elif metric.startswith(latency_metric("")):
                marks = [m for m in self.detections.get((source, metric), []) if t0 <= m[0] < t1]
                title = f"{source}: {metric[len(latency_metric('')):]} latency"
            else:
                continue
            pts = self.store.query_range(source, metric, t0, t1)
            out[f"{source}/{metric}"] = render_timeseries_svg(pts, marks, title, self.store.unit_of(source, metric))
        return out

    def handle(self, d: Diagnosis) -> None:
        self._record_detections(d)
        dot = render_dot(self.graph, d.statuses, d.report.roots)
        self.last_svgs = self.charts(d)
        self.last_html = render_report_html(d, dot, self.last_svgs)
        if self.report_dir:
            try:
                write_report(d, self.last_html, dot, self.report_dir)
            except ReportDirUnwritable as exc:
                log.error("%s", exc)
        if self.outbox is None:
            return
        if self.reporter_url:
            self.outbox.put(d, self.reporter_url)
        if self.webhook_url:
            warnings = []
            for i in d.issues:
                if not should_notify(i, self.ledger, d.cycle_ts_ms):
                    continue
                if i.severity == "critical":
                    self.outbox.put(i, self.webhook_url)
                else:
                    warnings.append(i)
            if warnings:
                self.outbox.put(warnings, self.webhook_url)

    __call__ = handle
