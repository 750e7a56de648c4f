"""Memory exhaustion on B: swap climbs to 100 % and the kernel kills a process.

The fault drives B's synthetic agent script, not real memory. The agent ships
the swap ramp and then one "Out of memory: Killed process" kernel line. The
HTML report lands in a temporary directory; open latest.html in a browser.
"""

import tempfile

from hcs.sim_mesh import FaultSpec, Scenario, run_scenario

from _mesh import chain_with_hcsd

report_dir = tempfile.mkdtemp(prefix="hcs-report-")
fault = FaultSpec("B", "mem_exhaust", at_ms=15_000, ramp_s=10, victim_pid=31337, victim_name="review-api")

with chain_with_hcsd(report_dir=report_dir) as (mesh, hcsd):
    log = run_scenario(mesh, hcsd, Scenario([fault], duration_ms=45_000))
    swap_chart = hcsd.presenter.last_svgs["B/swap_used_pct"]

for det in log.detected:
    print(f"t={det['t_ms'] / 1000:4.0f} s  {det['rule']:<15} root cause {det['root_cause']}")
oomk = next(i for i in log.at_detection[0]["issues"] if i["rule_id"] == "oomk_victim")
print(oomk["message"])
print("swap chart carries the OOMK marker:", "oomk review-api" in swap_chart)
print("report written to", report_dir + "/latest.html")
