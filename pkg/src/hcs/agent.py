"""Data Sender: samples OS metrics, spots OOM-killer victims, ships batches.

One agent runs per monitored host. Every tick it reads a ``MetricProvider``
(the real /proc tree or a scripted synthetic one), turns the raw text into
gauges, and POSTs a wire batch to the receiver. Failed batches wait in a
bounded FIFO and are retried oldest-first on later ticks.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import shutil
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

import requests

from hcs.core_model import Event, HcsError, MetricSample

log = logging.getLogger(__name__)

SEND_TIMEOUT_S = 2.0
MAX_RETRIES_PER_TICK = 3
GAUGES = (
    ("cpu_pct", "percent"),
    ("mem_used_pct", "percent"),
    ("swap_used_pct", "percent"),
    ("disk_used_pct", "percent"),
    ("net_rx_bytes_per_s", "bytes_per_s"),
    ("net_tx_bytes_per_s", "bytes_per_s"),
)


class MissingField(HcsError, ValueError):
    pass


class MalformedLine(HcsError, ValueError):
    pass


class CounterReset(HcsError, ValueError):
    pass


class ZeroDelta(HcsError, ValueError):
    pass


class ProviderUnavailable(HcsError, OSError):
    pass


def _clamp_pct(x: float) -> float:
    return min(100.0, max(0.0, x))


def parse_meminfo(text: str) -> tuple[float, float]:
    """Return ``(mem_used_pct, swap_used_pct)`` from /proc/meminfo content."""
    wanted = ("MemTotal", "MemAvailable", "SwapTotal", "SwapFree")
    values: dict[str, int] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise MalformedLine(f"no ':' in meminfo line {line!r}")
        key = key.strip()
        if key not in wanted:
            continue
        parts = rest.split()
        if not parts or (len(parts) > 1 and parts[1] != "kB") or len(parts) > 2:
            raise MalformedLine(f"bad meminfo value in {line!r}")
        try:
            values[key] = int(parts[0])
        except ValueError:
            raise MalformedLine(f"bad meminfo value in {line!r}") from None
        if values[key] < 0:
            raise MalformedLine(f"negative meminfo value in {line!r}")
    missing = [k for k in wanted if k not in values]
    if missing:
        raise MissingField(f"meminfo lacks {', '.join(missing)}")

    total, avail = values["MemTotal"], values["MemAvailable"]
    if total <= 0:
        raise MalformedLine("MemTotal must be positive")
    mem = _clamp_pct(100.0 * (total - avail) / total)
    swap_total, swap_free = values["SwapTotal"], values["SwapFree"]
    swap = 0.0 if swap_total == 0 else _clamp_pct(100.0 * (swap_total - swap_free) / swap_total)
    return mem, swap


@dataclass(frozen=True)
class CpuCounters:
    """Aggregate ``cpu`` line of /proc/stat, in jiffies."""

    user: int = 0
    nice: int = 0
    system: int = 0
    idle: int = 0
    iowait: int = 0
    irq: int = 0
    softirq: int = 0
    steal: int = 0

    @property
    def total(self) -> int:
        # guest time is already folded into user/nice by the kernel
        return self.user + self.nice + self.system + self.idle + self.iowait + self.irq + self.softirq + self.steal

    @property
    def idle_all(self) -> int:
        return self.idle + self.iowait

    def as_tuple(self) -> tuple[int, ...]:
        return (self.user, self.nice, self.system, self.idle, self.iowait, self.irq, self.softirq, self.steal)


def parse_proc_stat(text: str) -> CpuCounters:
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "cpu":
            try:
                nums = [int(x) for x in parts[1:9]]
            except ValueError:
                raise MalformedLine(f"bad cpu line {line!r}") from None
            if len(nums) < 4 or any(n < 0 for n in nums):
                raise MalformedLine(f"bad cpu line {line!r}")
            return CpuCounters(*nums)
    raise MissingField("/proc/stat has no aggregate cpu line")


def compute_cpu_pct(prev: CpuCounters, curr: CpuCounters) -> float:
    if any(c < p for p, c in zip(prev.as_tuple(), curr.as_tuple())):
        raise CounterReset("cpu counters went backwards")
    d_total = curr.total - prev.total
    if d_total <= 0:
        raise ZeroDelta("no cpu time elapsed between snapshots")
    d_idle = curr.idle_all - prev.idle_all
    return _clamp_pct(100.0 * (1.0 - d_idle / d_total))


def parse_net_dev(text: str) -> tuple[int, int]:
    """Sum received and transmitted bytes over non-loopback interfaces."""
    rx = tx = 0
    for line in text.splitlines():
        if ":" not in line:
            continue
        iface, _, rest = line.partition(":")
        iface = iface.strip()
        if iface.startswith(("Inter-", "face")) or not iface:
            continue
        cols = rest.split()
        if len(cols) < 9:
            raise MalformedLine(f"short /proc/net/dev line {line!r}")
        if iface == "lo":
            continue
        try:
            rx += int(cols[0])
            tx += int(cols[8])
        except ValueError:
            raise MalformedLine(f"bad /proc/net/dev line {line!r}") from None
    return rx, tx


# "Out of memory: Killed process 1234 (name) total-vm:..., anon-rss:524288kB, ..."
# The older kernels say "Kill process 1234 (name) score ...". Memory cgroup OOMs use lower-case "out of memory".
OOMK_RE = re.compile(
    r"out of memory: kill(?:ed)? process (?P<pid>\d+) \((?P<name>.*?)\)(?=[\s,]|$)(?P<rest>.*)",
    re.IGNORECASE,
)
ANON_RSS_RE = re.compile(r"anon-rss:(\d+)kB")


def detect_oomk(lines: Iterable[str], source: str = "", ts_ms: int = 1) -> list[Event]:
    events = []
    for line in lines:
        m = OOMK_RE.search(line)
        if not m:
            continue
        payload = {"victim_pid": m.group("pid"), "victim_name": m.group("name")}
        rss = ANON_RSS_RE.search(m.group("rest"))
        if rss:
            payload["rss_kb"] = rss.group(1)
        events.append(Event(source=source, ts_ms=ts_ms, type="oomk", payload=payload))
    return events


@dataclass(frozen=True)
class SystemSnapshot:
    cpu_pct: Optional[float]
    mem_used_pct: float
    swap_used_pct: float
    disk_used_pct: float
    net_rx_bytes_per_s: Optional[float]
    net_tx_bytes_per_s: Optional[float]

    def __post_init__(self):
        for name in ("cpu_pct", "mem_used_pct", "swap_used_pct", "disk_used_pct"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        for name in ("net_rx_bytes_per_s", "net_tx_bytes_per_s"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name}={v} is negative")


@dataclass
class RawReading:
    """What a provider hands back each tick: /proc-format text plus disk usage and new kernel lines."""

    stat_text: str
    meminfo_text: str
    net_dev_text: str
    disk_used_pct: float
    kernel_lines: list[str] = field(default_factory=list)


class MetricProvider:
    def read(self, now_ms: int) -> RawReading:
        raise NotImplementedError


class ProcProvider(MetricProvider):
    def __init__(self, proc_root: str = "/proc", disk_path: str = "/", kmsg_path: Optional[str] = None):
        self.proc_root = proc_root
        self.disk_path = disk_path
        self.kmsg_path = kmsg_path
        self._kmsg_offset: Optional[int] = None
        self._kmsg_fd: Optional[int] = None

    def _read(self, rel: str) -> str:
        with open(os.path.join(self.proc_root, rel), encoding="utf-8", errors="replace") as fh:
            return fh.read()

    def _kernel_lines(self) -> list[str]:
        if not self.kmsg_path:
            return []
        if self.kmsg_path.startswith("/dev/"):
            return self._read_kmsg_device()
        try:
            size = os.path.getsize(self.kmsg_path)
        except OSError:
            return []
        if self._kmsg_offset is None or size < self._kmsg_offset:
            # start at the tail on first read; restart after truncation
            self._kmsg_offset = size if self._kmsg_offset is None else 0
            if self._kmsg_offset == size:
                return []
        with open(self.kmsg_path, "rb") as fh:
            fh.seek(self._kmsg_offset)
            chunk = fh.read()
        complete = chunk.rfind(b"\n") + 1
        self._kmsg_offset += complete
        return chunk[:complete].decode("utf-8", errors="replace").splitlines()

    def _read_kmsg_device(self) -> list[str]:
        if self._kmsg_fd is None:
            self._kmsg_fd = os.open(self.kmsg_path, os.O_RDONLY | os.O_NONBLOCK)
            os.lseek(self._kmsg_fd, 0, os.SEEK_END)
        lines = []
        while True:
            try:
                rec = os.read(self._kmsg_fd, 8192)
            except BlockingIOError:
                break
            except OSError:  # EPIPE when records were overwritten
                continue
            if not rec:
                break
            lines.append(rec.decode("utf-8", errors="replace").rstrip("\n"))
        return lines

    def read(self, now_ms: int) -> RawReading:
        try:
            usage = shutil.disk_usage(self.disk_path)
            return RawReading(
                stat_text=self._read("stat"),
                meminfo_text=self._read("meminfo"),
                net_dev_text=self._read("net/dev"),
                disk_used_pct=100.0 * usage.used / usage.total if usage.total else 0.0,
                kernel_lines=self._kernel_lines(),
            )
        except OSError as exc:
            raise ProviderUnavailable(str(exc)) from exc


SYNTHETIC_METRICS = ("cpu_pct", "mem_used_pct", "swap_used_pct", "disk_used_pct", "net_rx_bytes_per_s", "net_tx_bytes_per_s")
_MEM_TOTAL_KB = 16 * 1024 * 1024
_SWAP_TOTAL_KB = 8 * 1024 * 1024


class SyntheticProvider(MetricProvider):
    """Scripted readings rendered as /proc-format text.

    Script keys: ``base`` (metric -> value), ``steps`` (each ``{"at_ms", "set"}``
    or ``{"at_ms", "ramp": {"metric", "to", "over_ms"}}``) and ``kmsg``
    (each ``{"at_ms", "line"}``). ``fail_from_ms`` makes reads raise.
    Times are absolute epoch milliseconds.
    """

    def __init__(self, script: Optional[dict] = None):
        script = script or {}
        self.base = {"cpu_pct": 10.0, "mem_used_pct": 30.0, "swap_used_pct": 0.0, "disk_used_pct": 40.0,
                     "net_rx_bytes_per_s": 1000.0, "net_tx_bytes_per_s": 1000.0}
        self.base.update(script.get("base", {}))
        self.steps: list[dict] = sorted(script.get("steps", []), key=lambda s: s["at_ms"])
        self.kmsg: list[dict] = sorted(script.get("kmsg", []), key=lambda s: s["at_ms"])
        self.fail_from_ms: Optional[int] = script.get("fail_from_ms")
        self._lock = threading.Lock()
        self._emitted = 0
        self._cpu = [0] * 8
        self._net = [0, 0]
        self._last_ms: Optional[int] = None

    @classmethod
    def from_file(cls, path: str) -> "SyntheticProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def add_step(self, step: dict) -> None:
        with self._lock:
            self.steps = sorted(self.steps + [step], key=lambda s: s["at_ms"])

    def add_kmsg(self, at_ms: int, line: str) -> None:
        with self._lock:
            pending = self.kmsg[self._emitted:] + [{"at_ms": at_ms, "line": line}]
            self.kmsg = self.kmsg[: self._emitted] + sorted(pending, key=lambda s: s["at_ms"])

    def mem_exhaust(self, start_ms: int, ramp_ms: int, victim_pid: int, victim_name: str, rss_kb: int = 524288) -> None:
        """Ramp swap to 100 % over ``ramp_ms`` then log one OOM-killer line."""
        self.add_step({"at_ms": start_ms, "ramp": {"metric": "swap_used_pct", "to": 100.0, "over_ms": ramp_ms}})
        self.add_step({"at_ms": start_ms, "ramp": {"metric": "mem_used_pct", "to": 99.0, "over_ms": ramp_ms}})
        self.add_kmsg(
            start_ms + ramp_ms,
            f"Out of memory: Killed process {victim_pid} ({victim_name}) "
            f"total-vm:{rss_kb * 2}kB, anon-rss:{rss_kb}kB, file-rss:0kB, shmem-rss:0kB",
        )

    def value_at(self, metric: str, now_ms: int) -> float:
        v = float(self.base[metric])
        for step in self.steps:
            if step["at_ms"] > now_ms:
                break
            if "set" in step and metric in step["set"]:
                v = float(step["set"][metric])
            ramp = step.get("ramp")
            if ramp and ramp["metric"] == metric:
                over = max(1, int(ramp["over_ms"]))
                frac = min(1.0, (now_ms - step["at_ms"]) / over)
                v = v + (float(ramp["to"]) - v) * frac
        return v

    def read(self, now_ms: int) -> RawReading:
        with self._lock:
            if self.fail_from_ms is not None and now_ms >= self.fail_from_ms:
                raise ProviderUnavailable("synthetic provider scripted to fail")
            vals = {m: self.value_at(m, now_ms) for m in SYNTHETIC_METRICS}
            dt_s = 0.0 if self._last_ms is None else max(0, now_ms - self._last_ms) / 1000.0
            self._last_ms = now_ms
            # 1000 jiffies per tick split by the scripted busy fraction
            busy = round(10 * _clamp_pct(vals["cpu_pct"]))
            self._cpu[0] += busy
            self._cpu[3] += 1000 - busy
            self._net[0] += round(vals["net_rx_bytes_per_s"] * dt_s)
            self._net[1] += round(vals["net_tx_bytes_per_s"] * dt_s)
            lines = []
            while self._emitted < len(self.kmsg) and self.kmsg[self._emitted]["at_ms"] <= now_ms:
                lines.append(self.kmsg[self._emitted]["line"])
                self._emitted += 1
            mem_avail = round(_MEM_TOTAL_KB * (1 - _clamp_pct(vals["mem_used_pct"]) / 100))
            swap_free = round(_SWAP_TOTAL_KB * (1 - _clamp_pct(vals["swap_used_pct"]) / 100))
            return RawReading(
                stat_text="cpu  " + " ".join(str(c) for c in self._cpu) + "\n",
                meminfo_text=(
                    f"MemTotal:       {_MEM_TOTAL_KB} kB\nMemAvailable:   {mem_avail} kB\n"
                    f"SwapTotal:      {_SWAP_TOTAL_KB} kB\nSwapFree:       {swap_free} kB\n"
                ),
                net_dev_text=(
                    "Inter-|   Receive |  Transmit\n face |bytes packets|bytes packets\n"
                    f"  eth0: {self._net[0]} 0 0 0 0 0 0 0 {self._net[1]} 0 0 0 0 0 0 0\n"
                ),
                disk_used_pct=_clamp_pct(vals["disk_used_pct"]),
                kernel_lines=lines,
            )


class Collector:
    """Turns successive provider readings into samples; owns the previous counters."""

    def __init__(self, source_id: str):
        self.source_id = source_id
        self._prev_cpu: Optional[CpuCounters] = None
        self._prev_net: Optional[tuple[int, int, int]] = None

    def _gauge(self, name: str, unit: str, value: float, now_ms: int) -> MetricSample:
        return MetricSample(source=self.source_id, ts_ms=now_ms, kind="gauge", name=name, value=value, unit=unit)

    def snapshot(self, raw: RawReading, now_ms: int) -> SystemSnapshot:
        mem, swap = parse_meminfo(raw.meminfo_text)
        cpu_now = parse_proc_stat(raw.stat_text)
        rx, tx = parse_net_dev(raw.net_dev_text)

        cpu = None
        if self._prev_cpu is not None:
            try:
                cpu = compute_cpu_pct(self._prev_cpu, cpu_now)
            except (CounterReset, ZeroDelta):
                cpu = None
        self._prev_cpu = cpu_now

        rx_rate = tx_rate = None
        if self._prev_net is not None:
            prx, ptx, pts = self._prev_net
            dt = (now_ms - pts) / 1000.0
            if dt > 0 and rx >= prx and tx >= ptx:
                rx_rate, tx_rate = (rx - prx) / dt, (tx - ptx) / dt
        self._prev_net = (rx, tx, now_ms)
        return SystemSnapshot(cpu, mem, swap, _clamp_pct(raw.disk_used_pct), rx_rate, tx_rate)

    def collect_tick(self, provider: MetricProvider, now_ms: int) -> tuple[list[MetricSample], list[Event]]:
        try:
            raw = provider.read(now_ms)
            snap = self.snapshot(raw, now_ms)
        except Exception as exc:  # a broken provider must never take the agent down
            log.warning("collection failed for %s: %s", self.source_id, exc)
            err = Event(self.source_id, now_ms, "probe_error", {"error": f"{type(exc).__name__}: {exc}"})
            return [], [err]
        samples = []
        for name, unit in GAUGES:
            value = getattr(snap, name)
            if value is not None:
                samples.append(self._gauge(name, unit, value, now_ms))
        return samples, detect_oomk(raw.kernel_lines, self.source_id, now_ms)


def collect_tick(collector: Collector, provider: MetricProvider, now_ms: int):
    return collector.collect_tick(provider, now_ms)


@dataclass
class Batch:
    samples: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples) + len(self.events)


def batch_to_wire(sender_id: str, sent_at_ms: int, batch: Batch) -> dict:
    return {
        "sender_id": sender_id,
        "sent_at_ms": sent_at_ms,
        "samples": [s.to_dict() for s in batch.samples],
        "events": [e.to_dict() for e in batch.events],
    }


class SendBuffer:
    """Bounded FIFO of undelivered batches; overflow evicts the oldest."""

    def __init__(self, capacity: int = 256):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._q: deque[Batch] = deque()
        self.dropped = 0

    def __len__(self):
        return len(self._q)

    def push(self, batch: Batch) -> int:
        self._q.append(batch)
        n = 0
        while len(self._q) > self.capacity:
            self._q.popleft()
            n += 1
        self.dropped += n
        return n

    def peek(self) -> Batch:
        return self._q[0]

    def pop(self) -> Batch:
        return self._q.popleft()

    def items(self) -> list[Batch]:
        return list(self._q)


@dataclass
class DeliveryResult:
    delivered: list = field(default_factory=list)
    buffered: int = 0
    dropped: int = 0

    @property
    def ok(self) -> bool:
        return self.buffered == 0


def _post(session, endpoint: str, body: dict) -> bool:
    try:
        resp = session.post(endpoint.rstrip("/") + "/v1/samples", json=body, timeout=SEND_TIMEOUT_S)
    except requests.RequestException as exc:
        log.debug("send failed: %s", exc)
        return False
    return 200 <= resp.status_code < 300


def send_batch(batch: Batch, endpoint: str, buffer: SendBuffer, sender_id: str = "",
               now_ms: Optional[int] = None, session=None) -> DeliveryResult:
    """Deliver buffered batches (oldest first, at most three) and then ``batch``.

    Anything that cannot be delivered is queued; order is never inverted, so
    ``batch`` also queues while older batches remain.
    """
    session = session or requests
    now_ms = now_ms if now_ms is not None else int(time.time() * 1000)
    result = DeliveryResult()
    for _ in range(min(MAX_RETRIES_PER_TICK, len(buffer))):
        if not _post(session, endpoint, batch_to_wire(sender_id, now_ms, buffer.peek())):
            break
        result.delivered.append(buffer.pop())
    if len(buffer) == 0 and len(batch) and _post(session, endpoint, batch_to_wire(sender_id, now_ms, batch)):
        result.delivered.append(batch)
    elif len(batch):
        result.dropped = buffer.push(batch)
    result.buffered = len(buffer)
    return result


class Agent:
    def __init__(self, source_id: str, provider: MetricProvider, receiver_url: str,
                 capacity: int = 256, session=None):
        self.source_id = source_id
        self.provider = provider
        self.receiver_url = receiver_url
        self.collector = Collector(source_id)
        self.buffer = SendBuffer(capacity)
        self.session = session or requests.Session()
        self._reported_drops = 0

    def tick(self, now_ms: Optional[int] = None) -> DeliveryResult:
        now_ms = now_ms if now_ms is not None else int(time.time() * 1000)
        samples, events = self.collector.collect_tick(self.provider, now_ms)
        if self.buffer.dropped != self._reported_drops:
            samples.append(MetricSample(self.source_id, now_ms, "counter", "agent_dropped_batches",
                                        float(self.buffer.dropped), "count"))
            self._reported_drops = self.buffer.dropped
        return send_batch(Batch(samples, events), self.receiver_url, self.buffer,
                          self.source_id, now_ms, self.session)

    def run(self, interval_ms: int = 5000, stop: Optional[threading.Event] = None) -> None:
        stop = stop or threading.Event()
        next_at = time.monotonic()
        while not stop.is_set():
            self.tick()
            next_at += interval_ms / 1000.0
            stop.wait(max(0.0, next_at - time.monotonic()))


def agent_from_config(cfg: dict) -> tuple[Agent, int]:
    provider_kind = cfg.get("provider", "proc")
    if provider_kind == "proc":
        provider: MetricProvider = ProcProvider(disk_path=cfg.get("disk_path", "/"), kmsg_path=cfg.get("kmsg_path"))
    elif provider_kind == "synthetic":
        path = cfg.get("synthetic_script")
        provider = SyntheticProvider.from_file(path) if path else SyntheticProvider()
    else:
        raise ValueError(f"unknown provider {provider_kind!r}")
    agent = Agent(cfg["source_id"], provider, cfg["receiver_url"])
    return agent, int(cfg.get("interval_ms", 5000))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hcs-agent", description="Ship host metrics to an hcsd receiver.")
    parser.add_argument("--config", required=True, help="agent config JSON")
    parser.add_argument("--once", action="store_true", help="run a single tick and exit")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        agent, interval_ms = agent_from_config(cfg)
    except (OSError, ValueError, KeyError) as exc:
        print(f"hcs-agent: bad config {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.once:
        return 0 if agent.tick().ok else 1
    try:
        agent.run(interval_ms)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
