"""Builds ieee123_single_phase.json from the IEEE 123-node segment table.

Positive-sequence per-mile impedances are used for every line configuration
(single-phase equivalent). Voltage regulators and closed switches become short
low-impedance segments; the normally-open ties 250-251, 450-451, 54-94 and
300-350 are dropped, and the 151-300 tie is kept closed so that bus 151 hosts
a DER. Bus 150 is the substation reference.
"""

import json
import os

BASE_KV = 4.16
BASE_MVA = 1.0
Z_BASE = BASE_KV**2 / BASE_MVA

# ohm per mile (r, x) by configuration
CONFIG = {
    **{c: (0.306, 0.627) for c in range(1, 9)},
    **{c: (1.329, 1.347) for c in range(9, 12)},
    12: (1.521, 0.752),
    "sw": (0.0005, 0.001),
}

SEGMENTS = """
150 1 400 1
1 2 175 10
1 3 250 11
1 7 300 1
3 4 200 11
3 5 325 11
5 6 250 11
7 8 200 1
8 12 225 10
8 9 225 9
8 13 300 1
9 14 425 9
13 34 150 11
13 18 825 2
14 11 250 9
14 10 250 9
15 16 375 11
15 17 350 11
18 19 250 7
18 21 300 2
19 20 325 7
21 22 525 10
21 23 250 2
23 24 550 11
23 25 275 2
25 26 350 7
25 28 200 2
26 27 275 7
26 31 225 11
27 33 500 9
28 29 300 2
29 30 350 2
30 250 200 2
31 32 300 11
34 15 100 11
35 36 650 8
35 40 250 1
36 37 300 9
36 38 250 10
38 39 325 10
40 41 325 11
40 42 250 1
42 43 500 10
42 44 200 1
44 45 200 9
44 47 250 1
45 46 300 9
47 48 150 4
47 49 250 4
49 50 250 4
50 51 250 4
52 53 200 1
53 54 125 1
54 55 275 1
54 57 350 3
55 56 275 1
57 58 250 10
57 60 750 3
58 59 250 10
60 61 550 5
60 62 250 12
62 63 175 12
63 64 350 12
64 65 425 12
65 66 325 12
67 68 200 9
67 72 275 3
67 97 250 3
68 69 275 9
69 70 325 9
70 71 275 9
72 73 275 11
72 76 200 3
73 74 350 11
74 75 400 11
76 77 400 6
76 86 700 3
77 78 100 6
78 79 225 6
78 80 475 6
80 81 475 6
81 82 250 6
81 84 675 11
82 83 250 6
84 85 475 11
86 87 450 6
87 88 175 9
87 89 275 6
89 90 225 10
89 91 225 6
91 92 300 11
91 93 225 6
93 94 275 9
93 95 300 6
95 96 200 10
97 98 275 3
98 99 550 3
99 100 300 3
100 450 800 3
101 102 225 11
101 105 275 3
102 103 325 11
103 104 700 11
105 106 225 10
105 108 325 3
106 107 575 10
108 109 450 9
108 300 1000 3
109 110 300 9
110 111 575 9
110 112 125 9
112 113 525 9
113 114 325 9
135 35 375 4
152 52 400 1
160 67 350 6
197 101 250 3
13 152 0 sw
18 135 0 sw
60 160 0 sw
97 197 0 sw
300 151 0 sw
"""

# kW per bus (phase loads summed)
LOADS = {
    1: 40, 2: 20, 4: 40, 5: 20, 6: 40, 7: 20, 9: 40, 10: 20, 11: 40, 12: 20,
    16: 40, 17: 20, 19: 40, 20: 40, 22: 40, 24: 40, 28: 40, 29: 40, 30: 40,
    31: 20, 32: 20, 33: 40, 34: 40, 35: 40, 37: 40, 38: 20, 39: 20, 41: 20,
    42: 20, 43: 40, 45: 20, 46: 20, 47: 105, 48: 210, 49: 140, 50: 40, 51: 20,
    52: 40, 53: 40, 55: 20, 56: 20, 58: 20, 59: 20, 60: 20, 62: 40, 63: 40,
    64: 75, 65: 140, 66: 75, 68: 20, 69: 40, 70: 20, 71: 40, 73: 40, 74: 40,
    75: 40, 76: 245, 77: 40, 79: 40, 80: 40, 82: 40, 83: 20, 84: 20, 85: 40,
    86: 20, 87: 40, 88: 40, 90: 40, 92: 40, 94: 40, 95: 20, 96: 20, 98: 40,
    99: 40, 100: 40, 102: 20, 103: 40, 104: 40, 106: 40, 107: 40, 109: 40,
    111: 20, 112: 20, 113: 40, 114: 20,
    # five aggregated lateral loads completing the 90 load points
    3: 20, 8: 20, 14: 20, 26: 20, 57: 20,
}

DER = [66, 85, 96, 114, 151, 250]
Q_MAX = 0.2


def main():
    lines = []
    buses = set()
    for row in SEGMENTS.strip().splitlines():
        a, b, ft, cfg = row.split()
        cfg = cfg if cfg == "sw" else int(cfg)
        r_mi, x_mi = CONFIG[cfg]
        miles = 0.0 if cfg == "sw" else int(ft) / 5280.0
        if cfg == "sw":
            r, x = r_mi / Z_BASE, x_mi / Z_BASE
        else:
            r, x = r_mi * miles / Z_BASE, x_mi * miles / Z_BASE
        lines.append({"from": int(a), "to": int(b), "r": round(r, 8), "x": round(x, 8)})
        buses.update((int(a), int(b)))
    buses.discard(150)
    assert len(LOADS) == 90, len(LOADS)
    feeder = {
        "name": "ieee123-single-phase-equivalent",
        "reference": 150,
        "buses": sorted(buses),
        "lines": lines,
        "der": [{"bus": b, "q_max": Q_MAX} for b in DER],
        "loads": [{"bus": b, "p_nominal": round(kw / 1000.0 / BASE_MVA, 6)} for b, kw in sorted(LOADS.items())],
        "v_bounds": {"lower": -0.05, "upper": 0.05},
    }
    out = os.path.join(os.path.dirname(__file__), "ieee123_single_phase.json")
    with open(out, "w") as f:
        json.dump(feeder, f, indent=1)
        f.write("\n")
    print(len(buses), "buses", len(lines), "lines", sum(LOADS.values()), "kW")


if __name__ == "__main__":
    main()
