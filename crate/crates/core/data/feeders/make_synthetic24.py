"""Builds synthetic24.json: a 24-bus radial test feeder with five DER buses.

A ten-segment trunk carries four laterals; DERs sit at the lateral ends and
the trunk end, where voltage swings are largest. Impedances and loads are in
per unit on a 1 MVA base.
"""

import json
import os

TRUNK = (0.0045, 0.009)
LATERAL = (0.008, 0.008)

lines = []
for b in range(1, 11):
    lines.append((b - 1, b, *TRUNK))
laterals = {3: [11, 12, 13, 14], 6: [15, 16, 17, 18], 8: [19, 20, 21], 10: [22, 23, 24]}
for root, chain in laterals.items():
    prev = root
    for b in chain:
        lines.append((prev, b, *LATERAL))
        prev = b

buses = list(range(1, 25))
der = [10, 14, 18, 21, 24]
loads = {b: 0.05 + 0.01 * (b % 3) for b in buses}

feeder = {
    "name": "synthetic24",
    "reference": 0,
    "buses": buses,
    "lines": [{"from": f, "to": t, "r": r, "x": x} for f, t, r, x in lines],
    "der": [{"bus": b, "q_max": 0.2} for b in der],
    "loads": [{"bus": b, "p_nominal": round(p, 4)} for b, p in loads.items()],
    "v_bounds": {"lower": -0.05, "upper": 0.05},
}

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "synthetic24.json")
with open(out, "w") as f:
    json.dump(feeder, f, indent=1)
    f.write("\n")
