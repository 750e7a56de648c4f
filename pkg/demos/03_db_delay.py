"""Slow down B's database tenfold after the latency baselines have settled.

Each check cycle runs B's named probe statement a few times and compares the
mean against an EWMA baseline. The first slow cycle raises latency_delay with
the statement name as evidence. The delay is attributed to the DB query
rather than the network or the REST hop.
"""

from hcs.sim_mesh import FaultSpec, Scenario, run_scenario

from _mesh import chain_with_hcsd

with chain_with_hcsd() as (mesh, hcsd):
    log = run_scenario(mesh, hcsd, Scenario([FaultSpec("B", "slow_db", at_ms=50_000, factor=10.0)], duration_ms=60_000))
    svg = hcsd.presenter.last_svgs["B/latency_ms.db:select_1"]
    baseline = hcsd.checker.baselines[("B", "db:select_1")]

d = log.at_detection[0]
issue = next(i for i in d["issues"] if i["rule_id"] == "latency_delay")
print(issue["message"])
print("statement in evidence:", issue["evidence"][0]["sample"]["labels"]["statement"])
print("delay area:", d["delay_areas"]["B"])
print(f"baseline kept at {baseline.ewma_ms:.1f} ms (delayed observations do not feed it)")
print("latency chart has a detection marker:", 'class="annotation"' in svg)
