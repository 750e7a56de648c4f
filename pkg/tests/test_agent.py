from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcs.agent import (
    Agent,
    Batch,
    Collector,
    CounterReset,
    CpuCounters,
    MalformedLine,
    MissingField,
    ProcProvider,
    SendBuffer,
    SyntheticProvider,
    ZeroDelta,
    compute_cpu_pct,
    detect_oomk,
    parse_meminfo,
    parse_net_dev,
    parse_proc_stat,
    send_batch,
)
from hcs.core_model import MetricSample

FIXTURES = Path(__file__).parent / "fixtures"
MEM_LINES = "MemTotal: 16384 kB\nMemAvailable: 4096 kB\n"


def meminfo(swap_total, swap_free, mem=MEM_LINES):
    return mem + f"SwapTotal: {swap_total} kB\nSwapFree: {swap_free} kB\n"


# ---- parse_meminfo ----

def test_full_swap_reads_100():
    assert parse_meminfo(meminfo(8192, 0))[1] == 100.0


def test_no_swap_reads_zero():
    assert parse_meminfo(meminfo(0, 0))[1] == 0.0


def test_mem_used_exact():
    assert parse_meminfo(meminfo(0, 0))[0] == 75.0


def test_missing_field():
    with pytest.raises(MissingField):
        parse_meminfo("MemTotal: 10 kB\nSwapTotal: 0 kB\nSwapFree: 0 kB\n")


@pytest.mark.parametrize("line", ["MemTotal 16384 kB", "MemTotal: lots kB", "MemTotal: 5 MB"])
def test_malformed_line(line):
    with pytest.raises(MalformedLine):
        parse_meminfo(line + "\n" + meminfo(0, 0, mem="MemAvailable: 1 kB\n"))


def test_recorded_meminfo_fixture():
    mem, swap = parse_meminfo((FIXTURES / "proc" / "meminfo").read_text())
    assert 0.0 <= mem <= 100.0 and swap == 0.0


@given(
    st.integers(1, 2**40), st.integers(0, 2**40), st.integers(0, 2**40), st.integers(0, 2**40)
)
def test_percents_in_range_for_any_wellformed_text(total, avail, swap_total, swap_free):
    # MemAvailable may exceed MemTotal on odd kernels; SwapFree may exceed SwapTotal briefly
    mem, swap = parse_meminfo(meminfo(swap_total, swap_free, mem=f"MemTotal: {total} kB\nMemAvailable: {avail} kB\n"))
    assert 0.0 <= mem <= 100.0 and 0.0 <= swap <= 100.0


@given(st.text(max_size=300))
def test_meminfo_never_raises_unexpected(text):
    try:
        mem, swap = parse_meminfo(text)
    except (MissingField, MalformedLine):
        return
    assert 0.0 <= mem <= 100.0 and 0.0 <= swap <= 100.0


# ---- cpu ----

def counters(idle, total):
    return CpuCounters(user=total - idle, idle=idle)


@pytest.mark.parametrize("d_idle, expected", [(0, 100.0), (400, 0.0), (100, 75.0)])
def test_cpu_pct(d_idle, expected):
    assert compute_cpu_pct(counters(1000, 5000), counters(1000 + d_idle, 5400)) == expected


def test_iowait_counts_as_idle():
    prev = CpuCounters(user=100, idle=100, iowait=0)
    curr = CpuCounters(user=200, idle=150, iowait=50)
    assert compute_cpu_pct(prev, curr) == 50.0


def test_counter_reset_and_zero_delta():
    with pytest.raises(CounterReset):
        compute_cpu_pct(counters(1000, 5000), counters(10, 50))
    with pytest.raises(ZeroDelta):
        compute_cpu_pct(counters(1000, 5000), counters(1000, 5000))


def test_recorded_stat_fixture():
    c = parse_proc_stat((FIXTURES / "proc" / "stat").read_text())
    assert c.total > 0 and c.idle > 0


def test_net_dev_skips_loopback():
    rx, tx = parse_net_dev((FIXTURES / "proc" / "net_dev").read_text())
    assert (rx, tx) == (144217, 10794)


# ---- oomk ----

def test_oomk_example_line():
    (ev,) = detect_oomk(
        ["Out of memory: Killed process 1234 (reviewd) total-vm:8388608kB, anon-rss:524288kB"], "A", 10
    )
    assert ev.type == "oomk"
    assert ev.payload == {"victim_pid": "1234", "victim_name": "reviewd", "rss_kb": "524288"}


def test_non_matching_line():
    assert detect_oomk(["usb 1-1: new device"]) == []


def test_two_lines_keep_order():
    lines = [
        "Out of memory: Killed process 1 (first) total-vm:1kB, anon-rss:1kB",
        "Out of memory: Kill process 2 (second) score 651 or sacrifice child",
    ]
    assert [e.payload["victim_name"] for e in detect_oomk(lines)] == ["first", "second"]


def test_dmesg_corpus():
    lines = (FIXTURES / "dmesg_oom.txt").read_text().splitlines()
    got = [(e.payload["victim_pid"], e.payload["victim_name"], e.payload.get("rss_kb")) for e in detect_oomk(lines)]
    assert got == [
        ("1978", "MonsterApp", "3577708"),
        ("6576", "mysqld", None),
        ("473206", "doxygen", "9234320"),
        ("651", "unattended-upgr", "8380"),
        ("3271", "Web Content", "2496540"),
        ("4242", "java", "1048576"),
    ]


# ---- collect_tick ----

def test_synthetic_full_swap_sample():
    provider = SyntheticProvider({"base": {"swap_used_pct": 100.0}})
    samples, _ = Collector("A").collect_tick(provider, 1_000)
    assert {s.name: s.value for s in samples}["swap_used_pct"] == 100.0


def test_first_tick_has_no_cpu():
    col, provider = Collector("A"), SyntheticProvider()
    names = {s.name for s in col.collect_tick(provider, 1_000)[0]}
    assert "cpu_pct" not in names
    assert {"mem_used_pct", "swap_used_pct", "disk_used_pct"} <= names
    second = col.collect_tick(provider, 6_000)[0]
    assert {s.name for s in second} == {
        "cpu_pct", "mem_used_pct", "swap_used_pct", "disk_used_pct", "net_rx_bytes_per_s", "net_tx_bytes_per_s"
    }
    assert all(s.source == "A" and s.ts_ms == 6_000 and s.kind == "gauge" for s in second)
    assert {s.name: s.value for s in second}["cpu_pct"] == pytest.approx(10.0)


def test_provider_failure_yields_probe_error():
    class Broken:
        def read(self, now_ms):
            raise OSError("proc unreadable")

    samples, events = Collector("A").collect_tick(Broken(), 1_000)
    assert samples == [] and [e.type for e in events] == ["probe_error"]


def test_malformed_provider_text_is_probe_error(tmp_path):
    (tmp_path / "net").mkdir()
    (tmp_path / "stat").write_text("cpu 1 2 3 4\n")
    (tmp_path / "meminfo").write_text("garbage\n")
    (tmp_path / "net" / "dev").write_text("")
    samples, events = Collector("A").collect_tick(ProcProvider(str(tmp_path)), 1_000)
    assert samples == [] and events[0].type == "probe_error"


def test_proc_provider_reads_live_proc():
    col, prov = Collector("A"), ProcProvider()
    col.collect_tick(prov, 1_000)
    samples, events = col.collect_tick(prov, 2_000)
    assert not events
    assert all(0 <= s.value <= 100 for s in samples if s.unit == "percent")


def test_proc_provider_tails_kernel_log(tmp_path):
    klog = tmp_path / "kern.log"
    klog.write_text("old line\nOut of memory: Killed process 9 (stale) total-vm:1kB, anon-rss:1kB\n")
    prov = ProcProvider(kmsg_path=str(klog))
    col = Collector("A")
    assert col.collect_tick(prov, 1_000)[1] == []  # starts at the tail
    with klog.open("a") as fh:
        fh.write("Out of memory: Killed process 1234 (reviewd) total-vm:2kB, anon-rss:524288kB\n")
    (ev,) = col.collect_tick(prov, 2_000)[1]
    assert ev.payload["victim_name"] == "reviewd"


def test_synthetic_mem_exhaust_ramps_then_logs_oomk():
    prov = SyntheticProvider()
    prov.mem_exhaust(start_ms=10_000, ramp_ms=10_000, victim_pid=4321, victim_name="svc-A")
    col = Collector("A")
    seen = []
    for t in range(5_000, 30_001, 5_000):
        samples, events = col.collect_tick(prov, t)
        seen.append((t, {s.name: s.value for s in samples}["swap_used_pct"], [e.payload["victim_name"] for e in events]))
    assert seen == [
        (5_000, 0.0, []), (10_000, 0.0, []), (15_000, 50.0, []),
        (20_000, 100.0, ["svc-A"]), (25_000, 100.0, []), (30_000, 100.0, []),
    ]


# ---- sending ----

def sample(i):
    return MetricSample("A", 1_000 + i, "gauge", "cpu_pct", float(i), "percent")


def test_send_happy_path(stub_server):
    stub = stub_server([200])
    buf = SendBuffer()
    res = send_batch(Batch([sample(1)]), stub.url, buf, "A", 5)
    assert res.ok and len(buf) == 0
    (body,) = stub.json_bodies()
    assert body["sender_id"] == "A" and body["sent_at_ms"] == 5
    assert body["samples"][0]["name"] == "cpu_pct" and body["events"] == []
    assert stub.requests[0][1] == "/v1/samples"
    assert stub.requests[0][2]["Content-Type"] == "application/json"


def test_recovery_delivers_oldest_first(stub_server):
    stub = stub_server([503, 503, 503, 200, 200, 200, 200])
    buf = SendBuffer()
    for i in range(3):
        assert not send_batch(Batch([sample(i)]), stub.url, buf, "A", i + 1).ok
    # the first failed tick only tried its own batch; the next two tried the buffer head
    res = send_batch(Batch([sample(3)]), stub.url, buf, "A", 10)
    assert len(res.delivered) == 4 and len(buf) == 0
    arrived = [b["samples"][0]["value"] for b in stub.json_bodies()[-4:]]
    assert arrived == [0.0, 1.0, 2.0, 3.0]


def test_overflow_drops_oldest():
    buf = SendBuffer(capacity=256)
    dead = "http://127.0.0.1:9"  # discard port, nothing listens
    produced = [Batch([sample(i)]) for i in range(300)]
    dropped = 0
    for b in produced:
        dropped += send_batch(b, dead, buf, "A", 1).dropped
    assert dropped == 44 and buf.dropped == 44 and len(buf) == 256
    assert buf.items()[0] is produced[44]


def test_accounting_property(stub_server):
    # receiver flaps; nothing is lost below capacity
    stub = stub_server([500, 500, 200, 500, 200, 200, 500, 500, 500, 200, 200, 200, 200, 200, 200])
    buf = SendBuffer(capacity=4)
    produced, delivered, dropped = [], [], 0
    for i in range(10):
        b = Batch([sample(i)])
        produced.append(b)
        res = send_batch(b, stub.url, buf, "A", i + 1)
        delivered += res.delivered
        dropped += res.dropped
    ids = lambda bs: {id(b) for b in bs}
    assert ids(delivered) | ids(buf.items()) | (ids(produced[:dropped])) == ids(produced)
    assert len(delivered) + len(buf) + dropped == len(produced)


def test_agent_reports_drop_counter(stub_server):
    stub = stub_server([500, 500, 500, 200])
    agent = Agent("A", SyntheticProvider(), stub.url, capacity=1)
    for t in (1_000, 2_000, 3_000):
        agent.tick(t)
    assert agent.buffer.dropped == 2
    agent.tick(4_000)
    last = stub.json_bodies()[-1]
    names = {s["name"]: s["value"] for s in last["samples"]}
    assert names["agent_dropped_batches"] == 2.0
