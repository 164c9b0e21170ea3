#!/usr/bin/env python3
# Infer a statistical schema from a handful of network-scan style documents
# and render it as a standalone HTML report.
import os

from hmil import render_report, schema_of

corpus = [
    {
        "ip": "192.168.1.7",
        "services": [{"protocol": "udp", "port": 5353},
                     {"protocol": "tcp", "port": 8009}],
        "hostname": "living-room-tv",
    },
    {
        "ip": "192.168.1.12",
        "services": [{"protocol": "tcp", "port": 22}],
        "os": "linux",
    },
    {
        "ip": "192.168.1.30",
        "services": [],
        "hostname": None,  # present-but-null is not the same as absent
    },
]

schema = schema_of(corpus)

# how often each top-level key occurs
print("top-level keys:")
for key, entry in sorted(schema.entries.items()):
    print(f"  {key:<10} present {entry.present}/{schema.count}")

# the services position is a list; its length histogram is tracked per-position
services = schema.entries["services"].child
print("services list lengths:", dict(sorted(services.lengths.items())))

# leaf statistics drive extractor synthesis later: the port leaf records
# exact numeric moments, the protocol leaf a value histogram
port = services.child.entries["port"].child
print(f"port: mean {port.stats.mean:.1f}, stddev {port.stats.stddev:.1f}")
print("protocol histogram:", dict(sorted(services.child.entries['protocol'].child.histogram.items())))

os.makedirs("demos/out", exist_ok=True)
with open("demos/out/schema_report.html", "w", encoding="utf-8") as fh:
    fh.write(render_report(schema))
print("wrote demos/out/schema_report.html")
