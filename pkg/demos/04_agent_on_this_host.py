"""Read this machine's /proc twice and show what an agent would ship.

CPU and network figures are rates, so the first tick only has gauges. The
second tick, a second later, has everything. Nothing is sent anywhere.
"""

import time

from hcs.agent import Collector, ProcProvider, detect_oomk

collector = Collector("this-host")
provider = ProcProvider()
for tick in range(2):
    samples, events = collector.collect_tick(provider, int(time.time() * 1000))
    print(f"tick {tick}: " + ", ".join(f"{s.name}={s.value:.1f}{'%' if s.unit == 'percent' else ''}" for s in samples))
    for e in events:
        print("  event:", e.type, e.payload)
    time.sleep(1)

line = "[71.2] Out of memory: Killed process 812 (postgres) total-vm:2097152kB, anon-rss:1048576kB, file-rss:0kB"
print("OOM-killer line parses to:", detect_oomk([line], "this-host", int(time.time() * 1000))[0].payload)
