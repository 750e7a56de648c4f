"""Post a few batches to hcsd, read a series back, then replay the journal offline.

The journal is one JSON line per record, so a crash can at worst lose the line
being written. Replaying it rebuilds the same series in a fresh store.
"""

import os
import tempfile

import requests

from hcs.core_model import ServiceDescriptor, build_dependency_graph
from hcs.daemon import Hcsd, replay

journal_dir = tempfile.mkdtemp(prefix="hcs-journal-")
hcsd = Hcsd(build_dependency_graph([ServiceDescriptor("A")], []), journal_dir=journal_dir).serve()
t0 = 1_700_000_000_000
try:
    for k in range(3):
        body = {"sender_id": "A", "sent_at_ms": t0 + k * 5000, "events": [],
                "samples": [{"source": "A", "ts_ms": t0 + k * 5000, "kind": "gauge", "name": "swap_used_pct",
                             "value": 60.0 + 20 * k, "unit": "percent", "labels": {}}]}
        print("POST ->", requests.post(hcsd.url + "/v1/samples", json=body).json())
    r = requests.get(hcsd.url + "/v1/series", params={"source": "A", "name": "swap_used_pct"})
    print("GET  ->", r.json())
finally:
    hcsd.stop()

(journal,) = [os.path.join(journal_dir, f) for f in os.listdir(journal_dir)]
summary = replay(journal)
print(f"replayed {summary['points']} points from {os.path.basename(journal)}")
for issue in summary["issues"]:
    print("  offline finding:", issue["message"])
