"""Kill the bottom of a dependency chain and watch the blame land on it.

D requires C, C requires B, B requires A. Every service's /health also checks
its dependencies, so when A dies the whole chain reports unhealthy. The
checker has to tell the one real failure apart from the three echoes.
"""

from hcs.issue_presenter import render_dot
from hcs.sim_mesh import FaultSpec, Scenario, run_scenario

from _mesh import chain_with_hcsd

with chain_with_hcsd() as (mesh, hcsd):
    log = run_scenario(mesh, hcsd, Scenario([FaultSpec("A", "kill", at_ms=30_000)], duration_ms=60_000))
    d = log.at_detection[0]

print(f"A was killed at t=30 s and detected {log.detection_latency_ms[0] / 1000:.0f} s later")
print("roots:     ", d["report"]["roots"])
print("propagated:", d["report"]["propagated"])
for issue in d["issues"]:
    print(f"  [{issue['severity']}] {issue['message']}  -> root cause {issue['root_cause']}")

# the same picture as Graphviz; pipe it to `dot -Tsvg` to draw it
statuses = {sid: s for sid, s in hcsd.checker.latest.statuses.items()}
print(render_dot(hcsd.graph, statuses, hcsd.checker.latest.report.roots))
