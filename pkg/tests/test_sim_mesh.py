import json
import socket
import statistics
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from hcs.agent import Collector
from hcs.core_model import ServiceDescriptor
from hcs.daemon import Hcsd
from hcs.health_checker import probe
from hcs.sim_mesh import (
    AlreadyDead,
    FaultSpec,
    MeshSpec,
    PortInUse,
    Scenario,
    ServiceSpec,
    UnknownTarget,
    inject_fault,
    main,
    run_scenario,
    spawn_mesh,
)

T0 = 1_700_000_000_000


@pytest.fixture
def chain4():
    with spawn_mesh(MeshSpec.chain("D", "C", "B", "A"), seed=7) as mesh:
        yield mesh


def get(mesh, sid, path, timeout=5):
    return requests.get(f"http://{mesh.address(sid)}{path}", timeout=timeout)


def target(mesh, sid):
    return ServiceDescriptor(sid, probe_address=mesh.address(sid))


def test_chain_work_aggregates_segments(chain4):
    body = get(chain4, "D", "/work").json()
    assert [s["service"] for s in body["segments"]] == ["A", "B", "C", "D"]
    assert all(s["db_ms"] >= 0 for s in body["segments"])


def test_single_service_work_has_own_segment():
    with spawn_mesh(MeshSpec([ServiceSpec("solo")])) as mesh:
        assert [s["service"] for s in get(mesh, "solo", "/work").json()["segments"]] == ["solo"]
        assert get(mesh, "solo", "/health").json() == {"status": "ok"}


def test_duplicate_port_rejected_before_spawn():
    spec = MeshSpec([ServiceSpec("A", port=45123), ServiceSpec("B", port=45123)])
    with pytest.raises(PortInUse):
        spawn_mesh(spec)


def test_port_already_bound():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        with pytest.raises(PortInUse):
            spawn_mesh(MeshSpec([ServiceSpec("A", port=s.getsockname()[1])]))


def test_kill_refuses_and_propagates(chain4):
    inject_fault(chain4, FaultSpec("A", "kill"))
    assert probe(target(chain4, "A"), 2000).outcome == "refused"
    r = get(chain4, "B", "/health")
    assert r.status_code == 503 and r.json()["failed"] == ["A"]
    assert get(chain4, "D", "/health").status_code == 503
    with pytest.raises(AlreadyDead):
        inject_fault(chain4, FaultSpec("A", "slow_db"))


def test_unknown_target(chain4):
    with pytest.raises(UnknownTarget):
        inject_fault(chain4, FaultSpec("Z", "kill"))


def test_bad_fault_kind():
    with pytest.raises(ValueError):
        FaultSpec("A", "explode")


def test_drop_net_hangs_until_cleared(chain4):
    inject_fault(chain4, FaultSpec("A", "drop_net"))
    assert probe(target(chain4, "A"), 300).outcome == "timeout"
    inject_fault(chain4, FaultSpec("A", "clear"))
    assert probe(target(chain4, "A"), 2000).outcome == "ok"


def test_slow_db_mean_is_scaled():
    # base 20 ms x 10; the mean of 200 seeded exponential draws must land within 20 % of 200 ms
    with spawn_mesh(MeshSpec([ServiceSpec("B", db_latency_ms=20.0)]), seed=3) as mesh:
        inject_fault(mesh, FaultSpec("B", "slow_db", factor=10.0))
        with ThreadPoolExecutor(16) as pool:
            times = list(pool.map(lambda _: get(mesh, "B", "/db/probe?stmt=q").json()["query_ms"], range(200)))
    assert abs(statistics.mean(times) - 200.0) <= 40.0


def test_db_probe_needs_statement(chain4):
    assert get(chain4, "A", "/db/probe").status_code == 400


def test_fault_endpoint(chain4):
    r = requests.post(f"http://{chain4.address('C')}/fault", json={"kind": "slow_db", "factor": 4})
    assert r.json() == {"ack": "slow_db"} and chain4.services["C"].factor == 4
    requests.post(f"http://{chain4.address('C')}/fault", json={"kind": "clear"})
    assert chain4.services["C"].factor == 1.0
    assert requests.post(f"http://{chain4.address('C')}/fault", json={"kind": "nope"}).status_code == 400


def test_mem_exhaust_drives_agent_stream(chain4):
    inject_fault(chain4, FaultSpec("B", "mem_exhaust", ramp_s=10, victim_pid=4242, victim_name="reviewd"), T0)
    collector = Collector("B")
    stream = []
    for t in range(0, 15_001, 1_000):
        samples, events = collector.collect_tick(chain4.services["B"].provider, T0 + t)
        stream += [("swap", s.value) for s in samples if s.name == "swap_used_pct"]
        stream += [("oomk", e.payload["victim_name"]) for e in events if e.type == "oomk"]
    first_full = stream.index(("swap", 100.0))
    assert stream.index(("oomk", "reviewd")) > first_full
    assert stream.count(("oomk", "reviewd")) == 1


def scenario_run(faults, duration_ms, seed=1, **kw):
    mesh = spawn_mesh(MeshSpec.chain("D", "C", "B", "A"), seed=seed)
    hcsd = Hcsd(mesh.dependency_graph()).serve()
    try:
        mesh.attach_agents(hcsd.url)
        return run_scenario(mesh, hcsd, Scenario(faults, duration_ms, **kw))
    finally:
        hcsd.stop()
        mesh.stop()


def test_empty_script():
    log = scenario_run([], 10_000)
    assert log.injected == [] and log.detected == [] and log.ok


@pytest.mark.scenario
def test_kill_scenario_attribution_and_reproducibility():
    runs = [scenario_run([FaultSpec("A", "kill", at_ms=20_000)], 40_000) for _ in range(2)]
    log = runs[0]
    assert log.ok and log.attribution_correct == [True]
    assert [(d["rule"], d["root_cause"]) for d in log.detected] == [("service_down", "A")]
    assert runs[0].to_dict(wall=False) == runs[1].to_dict(wall=False)


@pytest.mark.scenario
def test_slow_db_evidence_names_statement():
    log = scenario_run([FaultSpec("B", "slow_db", at_ms=50_000)], 65_000)
    assert log.ok
    issue = next(i for i in log.at_detection[0]["issues"] if i["rule_id"] == "latency_delay")
    assert issue["evidence"][0]["sample"]["labels"]["statement"] == "select_1"


def test_missed_detection_is_reported():
    log = scenario_run([FaultSpec("A", "kill", at_ms=10_000)], 10_000)
    assert not log.ok and log.missed and log.detection_latency_ms == [None]


def test_cli(tmp_path, capsys):
    mesh = tmp_path / "mesh.json"
    mesh.write_text(json.dumps({"services": [{"id": x} for x in "CBA"], "requires": [["C", "B"], ["B", "A"]]}))
    scen = tmp_path / "scenario.json"
    scen.write_text(json.dumps({"duration_ms": 30_000, "faults": [{"target": "B", "kind": "kill", "at_ms": 10_000}]}))
    out = tmp_path / "log.json"
    assert main(["--mesh", str(mesh), "--scenario", str(scen), "--seed", "4", "--out", str(out)]) == 0
    log = json.loads(out.read_text())
    assert log["ok"] and log["at_detection"][0]["report"]["roots"] == ["B"]
    assert log["at_detection"][0]["report"]["propagated"] == ["C"]
    assert "ok   kill" in capsys.readouterr().out


def test_cli_bad_mesh(tmp_path, capsys):
    bad = tmp_path / "mesh.json"
    bad.write_text(json.dumps({"services": [{"id": "A"}], "requires": [["A", "Z"]]}))
    scen = tmp_path / "s.json"
    scen.write_text("[]")
    assert main(["--mesh", str(bad), "--scenario", str(scen)]) == 2


def test_realtime_mode_paces_on_wall_clock():
    mesh = spawn_mesh(MeshSpec.chain("B", "A"), seed=2)
    hcsd = Hcsd(mesh.dependency_graph()).serve()
    try:
        mesh.attach_agents(hcsd.url)
        log = run_scenario(mesh, hcsd, Scenario([FaultSpec("A", "kill", at_ms=1_000)], 5_000, 1_000), realtime=True)
    finally:
        hcsd.stop()
        mesh.stop()
    assert log.ok and log.detection_latency_ms[0] <= 3_000
    assert log.wall_elapsed_s >= 5.0
