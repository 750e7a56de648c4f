"""Data Receiver: validates wire batches into a bounded in-memory store and a JSONL journal."""

from __future__ import annotations

import bisect
import datetime as dt
import json
import logging
import math
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from hcs.core_model import EVENT_TYPES, SAMPLE_KINDS, Event, HcsError, MetricSample

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 1024 * 1024


class MalformedBody(HcsError, ValueError):
    status = 400


class BodyTooLarge(HcsError, ValueError):
    status = 413


class InvalidRange(HcsError, ValueError):
    pass


class _Series:
    __slots__ = ("ts", "values", "capacity", "lock")

    def __init__(self, capacity: int):
        self.ts: list[int] = []
        self.values: list[float] = []
        self.capacity = capacity
        self.lock = threading.Lock()

    def insert(self, ts_ms: int, value: float) -> bool:
        """Insert keeping ts order; False when the exact point is already held."""
        with self.lock:
            lo = bisect.bisect_left(self.ts, ts_ms)
            hi = bisect.bisect_right(self.ts, ts_ms, lo)
            for i in range(lo, hi):
                if self.values[i] == value:
                    return False
            self.ts.insert(hi, ts_ms)
            self.values.insert(hi, value)
            if len(self.ts) > self.capacity:
                del self.ts[0]
                del self.values[0]
            return True


@dataclass(frozen=True)
class StoredEvent:
    seq: int
    event: Event


class SeriesStore:
    """Per-(source, metric) ring buffers plus a bounded event log.

    One writer per series at a time (per-series lock); readers copy under the
    same lock so a query never sees a half-applied insert.
    """

    def __init__(self, capacity: int = 4096, event_capacity: int = 4096):
        self.capacity = capacity
        self.event_capacity = event_capacity
        self._series: dict[tuple[str, str], _Series] = {}
        self._units: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()
        self._events: deque[StoredEvent] = deque()
        self._event_keys: set = set()
        self._event_lock = threading.Lock()
        self._seq = 0

    def _get(self, source: str, name: str, create: bool) -> Optional[_Series]:
        key = (source, name)
        s = self._series.get(key)
        if s is None and create:
            with self._lock:
                s = self._series.setdefault(key, _Series(self.capacity))
        return s

    def add_sample(self, sample: MetricSample) -> bool:
        self._units.setdefault((sample.source, sample.name), sample.unit)
        return self._get(sample.source, sample.name, True).insert(sample.ts_ms, sample.value)

    def add_event(self, event: Event) -> bool:
        key = event.key()
        with self._event_lock:
            if key in self._event_keys:
                return False
            self._seq += 1
            self._events.append(StoredEvent(self._seq, event))
            self._event_keys.add(key)
            while len(self._events) > self.event_capacity:
                self._event_keys.discard(self._events.popleft().event.key())
            return True

    def query_range(self, source: str, metric: str, t0_ms: int, t1_ms: int) -> list[tuple[int, float]]:
        """Points with ``t0_ms <= ts < t1_ms``, oldest first."""
        if t0_ms > t1_ms:
            raise InvalidRange(f"t0 {t0_ms} > t1 {t1_ms}")
        s = self._get(source, metric, False)
        if s is None:
            return []
        with s.lock:
            lo = bisect.bisect_left(s.ts, t0_ms)
            hi = bisect.bisect_left(s.ts, t1_ms)
            return list(zip(s.ts[lo:hi], s.values[lo:hi]))

    def latest(self, source: str, metric: str, staleness_ms: int, now_ms: Optional[int] = None) -> Optional[tuple[int, float]]:
        """Newest point if no older than ``staleness_ms``; None otherwise."""
        if staleness_ms <= 0:
            raise ValueError("staleness_ms must be positive")
        now_ms = now_ms if now_ms is not None else int(time.time() * 1000)
        s = self._get(source, metric, False)
        if s is None:
            return None
        with s.lock:
            if not s.ts:
                return None
            point = (s.ts[-1], s.values[-1])
        return point if now_ms - point[0] <= staleness_ms else None

    def newest_ts(self, source: str) -> Optional[int]:
        newest = None
        for (src, _), s in list(self._series.items()):
            if src != source:
                continue
            with s.lock:
                if s.ts and (newest is None or s.ts[-1] > newest):
                    newest = s.ts[-1]
        return newest

    def events_since(self, seq: int) -> list[StoredEvent]:
        with self._event_lock:
            return [e for e in self._events if e.seq > seq]

    @property
    def last_event_seq(self) -> int:
        with self._event_lock:
            return self._seq

    def unit_of(self, source: str, metric: str) -> str:
        return self._units.get((source, metric), "")

    def series_keys(self) -> list[tuple[str, str]]:
        return sorted(self._series)

    def series_count(self) -> int:
        return len(self._series)

    def total_points(self) -> int:
        total = 0
        for s in list(self._series.values()):
            with s.lock:
                total += len(s.ts)
        return total


def _valid_sample(d) -> Optional[MetricSample]:
    if not isinstance(d, dict):
        return None
    value = d.get("value")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        return None
    ts = d.get("ts_ms")
    if isinstance(ts, bool) or not isinstance(ts, int) or ts <= 0:
        return None
    if d.get("kind") not in SAMPLE_KINDS or not isinstance(d.get("name"), str) or not d["name"]:
        return None
    if not isinstance(d.get("source"), str) or not d["source"]:
        return None
    labels = d.get("labels") or {}
    if not isinstance(labels, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in labels.items()):
        return None
    if not isinstance(d.get("unit", ""), str):
        return None
    return MetricSample.from_dict(d)


def _valid_event(d) -> Optional[Event]:
    if not isinstance(d, dict):
        return None
    ts = d.get("ts_ms")
    if isinstance(ts, bool) or not isinstance(ts, int) or ts <= 0:
        return None
    if d.get("type") not in EVENT_TYPES or not isinstance(d.get("source"), str) or not d["source"]:
        return None
    payload = d.get("payload") or {}
    if not isinstance(payload, dict):
        return None
    return Event.from_dict(d)


def decode_body(body) -> dict:
    if isinstance(body, (bytes, bytearray)):
        if len(body) > MAX_BODY_BYTES:
            raise BodyTooLarge(f"body of {len(body)} bytes exceeds {MAX_BODY_BYTES}")
        try:
            body = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedBody(f"invalid JSON: {exc}") from None
    elif isinstance(body, str):
        return decode_body(body.encode("utf-8"))
    if not isinstance(body, dict):
        raise MalformedBody("body must be a JSON object")
    if not isinstance(body.get("samples", []), list) or not isinstance(body.get("events", []), list):
        raise MalformedBody("'samples' and 'events' must be lists")
    if "sender_id" in body and not isinstance(body["sender_id"], str):
        raise MalformedBody("'sender_id' must be a string")
    return body


class Journal:
    """Append-only ``samples-YYYYMMDD.jsonl`` files named by UTC arrival date.

    The first write failure switches the journal off for good and fires
    ``on_failure`` once; ingestion carries on in memory.
    """

    def __init__(self, directory: str, clock: Callable[[], float] = time.time,
                 on_failure: Optional[Callable[[str], None]] = None):
        self.directory = directory
        self.clock = clock
        self.on_failure = on_failure
        self.failed: Optional[str] = None
        self._lock = threading.Lock()

    def path_for(self, epoch_s: float) -> str:
        day = dt.datetime.fromtimestamp(epoch_s, tz=dt.timezone.utc).strftime("%Y%m%d")
        return os.path.join(self.directory, f"samples-{day}.jsonl")

    def append(self, sender_id: str, sent_at_ms: int, samples, events) -> bool:
        if self.failed:
            return False
        lines = []
        for s in samples:
            lines.append(json.dumps({"sender_id": sender_id, "sent_at_ms": sent_at_ms,
                                     "samples": [s.to_dict()], "events": []}, separators=(",", ":")))
        for e in events:
            lines.append(json.dumps({"sender_id": sender_id, "sent_at_ms": sent_at_ms,
                                     "samples": [], "events": [e.to_dict()]}, separators=(",", ":")))
        if not lines:
            return True
        data = ("\n".join(lines) + "\n").encode("utf-8")
        with self._lock:
            try:
                os.makedirs(self.directory, exist_ok=True)
                with open(self.path_for(self.clock()), "ab") as fh:
                    fh.write(data)
            except OSError as exc:
                self.failed = str(exc)
                log.warning("journal disabled, keeping samples in memory only: %s", exc)
                if self.on_failure:
                    self.on_failure(self.failed)
                return False
        return True


def append_journal(journal: Journal, body: dict) -> bool:
    """Journal every valid record of a decoded wire batch."""
    samples = [s for s in map(_valid_sample, body.get("samples", [])) if s]
    events = [e for e in map(_valid_event, body.get("events", [])) if e]
    return journal.append(body.get("sender_id", ""), body.get("sent_at_ms", 0), samples, events)


class Receiver:
    """Store plus optional journal behind the ``POST /v1/samples`` contract."""

    def __init__(self, store: Optional[SeriesStore] = None, journal: Optional[Journal] = None):
        self.store = store or SeriesStore()
        self.journal = journal

    def ingest_batch(self, body) -> tuple[int, int]:
        """Returns ``(accepted, rejected)``; raises MalformedBody / BodyTooLarge."""
        doc = decode_body(body)
        accepted = rejected = 0
        fresh_samples, fresh_events = [], []
        for raw in doc.get("samples", []):
            s = _valid_sample(raw)
            if s is None:
                rejected += 1
                continue
            accepted += 1
            if self.store.add_sample(s):
                fresh_samples.append(s)
        for raw in doc.get("events", []):
            e = _valid_event(raw)
            if e is None:
                rejected += 1
                continue
            accepted += 1
            if self.store.add_event(e):
                fresh_events.append(e)
        if self.journal is not None:
            self.journal.append(doc.get("sender_id", ""), doc.get("sent_at_ms", 0), fresh_samples, fresh_events)
        return accepted, rejected


def ingest_batch(receiver: Receiver, body) -> tuple[int, int]:
    return receiver.ingest_batch(body)


def replay_journal(path: str, receiver: Optional[Receiver] = None) -> Receiver:
    """Load a journal file into a fresh (or given) receiver, skipping bad lines."""
    receiver = receiver or Receiver()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                receiver.ingest_batch(line.encode("utf-8"))
            except (MalformedBody, BodyTooLarge) as exc:
                log.warning("%s:%d skipped: %s", path, lineno, exc)
    return receiver
