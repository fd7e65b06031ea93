"""Regenerate the shipped feeder, fleet and scenario files under src/storagegame/data.

Topologies follow the IEEE 13- and 34-bus test feeders (single-phase,
substation bus = 0). Line impedances are synthetic: drawn with a fixed seed
and rescaled so that the deepest bus sits at 0.992 pu under nominal load.
"""

import json
from pathlib import Path

import numpy as np

from storagegame.grid import Branch, Feeder, build_sensitivities, format_feeder, ldf_voltages

DATA = Path(__file__).resolve().parents[1] / "src" / "storagegame" / "data"
PF_TAN = float(np.tan(np.arccos(0.9)))  # 0.9 lagging power factor

IEEE13_EDGES = [("650", "632"), ("632", "633"), ("633", "634"), ("632", "645"), ("645", "646"),
                ("632", "671"), ("671", "680"), ("671", "684"), ("684", "611"), ("684", "652"),
                ("671", "692"), ("692", "675")]

IEEE34_EDGES = [("800", "802"), ("802", "806"), ("806", "808"), ("808", "810"), ("808", "812"),
                ("812", "814"), ("814", "850"), ("850", "816"), ("816", "818"), ("818", "820"),
                ("820", "822"), ("816", "824"), ("824", "826"), ("824", "828"), ("828", "830"),
                ("830", "854"), ("854", "856"), ("854", "852"), ("852", "832"), ("832", "888"),
                ("888", "890"), ("832", "858"), ("858", "864"), ("858", "834"), ("834", "842"),
                ("842", "844"), ("844", "846"), ("846", "848"), ("834", "860"), ("860", "836"),
                ("836", "840"), ("836", "862"), ("862", "838")]

# battery capacity in 1e-2 units per IEEE-34 bus label
TABLE_S_MAX = {
    "802": 15, "806": 7.7, "808": 7.9, "810": 7.5, "812": 11, "814": 0.5, "816": 8.3, "818": 6.1,
    "820": 15, "822": 7.9, "824": 6.3, "826": 6, "828": 11, "830": 7.7, "832": 8, "834": 11,
    "836": 7.9, "838": 8.3, "840": 5, "842": 7.7, "844": 7.5, "846": 8, "848": 6.3, "850": 8,
    "852": 5, "854": 7.5, "856": 11, "858": 6.3, "860": 15, "862": 11, "864": 6, "888": 8.3,
    "890": 6.1,
}


def build(edges, seed, loads, target_vmin=0.992):
    labels = [edges[0][0]] + [c for _, c in edges]
    index = {lab: i for i, lab in enumerate(labels)}
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, len(edges))
    x = r * rng.uniform(1.0, 2.0, len(edges))

    def feeder(scale):
        br = tuple(Branch(index[p], index[c], float(scale * ri), float(scale * xi))
                   for (p, c), ri, xi in zip(edges, r, x))
        return Feeder(len(edges), br, 1.0, -0.0199, 0.020)

    f1 = feeder(1.0)
    S = build_sensitivities(f1)
    drop = np.max(S.R @ loads + S.X @ (PF_TAN * loads))
    scale = (1.0 - target_vmin**2) / drop
    # round to 6 significant digits so the text file is the source of truth
    br = tuple(Branch(b.parent, b.child, float(f"{b.r * scale:.6g}"), float(f"{b.x * scale:.6g}"))
               for b in f1.branches)
    return Feeder(len(edges), br, 1.0, -0.0199, 0.020), labels


def write_feeder(path, feeder, labels, title):
    body = format_feeder(feeder).splitlines()
    head = [f"# {title}",
            "# Single-phase radial feeder, per unit. Synthetic impedances (seeded draw,",
            "# rescaled so the deepest bus is at 0.992 pu under the nominal loads of the",
            "# matching scenario file). Bus labels: " + " ".join(f"{i}={lab}" for i, lab in enumerate(labels))]
    path.write_text("\n".join(head + body) + "\n", encoding="utf-8")


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(13)

    # 12 load buses, IEEE-13 topology
    l12 = np.round(rng.uniform(0.01, 0.04, 12), 4)
    f12, lab12 = build(IEEE13_EDGES, 1301, l12)
    write_feeder(DATA / "feeder12.txt", f12, lab12, "12-bus feeder with IEEE 13-bus topology")

    # heterogeneous fleet: capacity in 0.1 units, rate in 0.01 units
    s12 = [0.15, 0.30, 0.10, 0.25, 0.12, 0.20, 0.35, 0.08, 0.18, 0.40, 0.22, 0.14]
    b12 = [0.02, 0.03, 0.04, 0.02, 0.05, 0.01, 0.03, 0.02, 0.05, 0.04, 0.02, 0.03]
    lines = ["# Heterogeneous fleet for the 12-bus feeder (s_min = 0, b_min = -b_max).",
             "bus,s_min,s_max,b_min,b_max"]
    for i, (s, b) in enumerate(zip(s12, b12), start=1):
        lines.append(f"{i},0.0,{s!r},{-b!r},{b!r}  # {lab12[i]}")
    (DATA / "fleet12.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    scen1 = {"kind": "synthetic", "low": 5.0, "high": 20.0, "low_dwell": 10, "high_dwell": 5,
             "r_half_period": 15, "l": l12.tolist(),
             "q": np.round(PF_TAN * l12, 6).tolist()}
    (DATA / "scenario1_12.json").write_text(json.dumps(scen1, indent=1) + "\n", encoding="utf-8")

    rand12 = {"kind": "random", "cp_mode": "uniform", "c0": [5.0, 20.0], "cp": [5.0 / 12, 20.0 / 12],
              "cr": [5.0, 20.0], "l_min": np.round(0.5 * l12, 6).tolist(), "l_max": l12.tolist(),
              "q_min": np.round(0.5 * PF_TAN * l12, 6).tolist(),
              "q_max": np.round(PF_TAN * l12, 6).tolist()}
    (DATA / "random_12.json").write_text(json.dumps(rand12, indent=1) + "\n", encoding="utf-8")

    # 33 load buses, IEEE-34 topology
    l33 = np.round(rng.uniform(0.005, 0.02, 33), 4)
    f33, lab33 = build(IEEE34_EDGES, 3401, l33)
    write_feeder(DATA / "feeder33.txt", f33, lab33, "33-bus feeder with IEEE 34-bus topology")
    lines = ["# Fleet for the 33-bus feeder: s_max from the IEEE-34 placement table (1e-2 units),",
             "# b_max = s_max / 100, b_min = -b_max, s_min = 0.",
             "bus,s_min,s_max,b_min,b_max"]
    for i in range(1, 34):
        s = TABLE_S_MAX[lab33[i]] / 100
        b = s / 100
        lines.append(f"{i},0.0,{s!r},{-b!r},{b!r}  # {lab33[i]}")
    (DATA / "fleet33.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    rand33 = {"kind": "random", "cp_mode": "c0_over_n", "c0": [5.0, 20.0], "cp": [5.0 / 33, 20.0 / 33],
              "cr": [5.0, 20.0], "l_min": np.round(0.5 * l33, 6).tolist(), "l_max": l33.tolist(),
              "q_min": np.round(0.5 * PF_TAN * l33, 6).tolist(),
              "q_max": np.round(PF_TAN * l33, 6).tolist()}
    (DATA / "random_33.json").write_text(json.dumps(rand33, indent=1) + "\n", encoding="utf-8")

    for name, f, l in (("feeder12", f12, l12), ("feeder33", f33, l33)):
        S = build_sensitivities(f)
        v = ldf_voltages(S, l, PF_TAN * l, f.v0)
        print(name, "min |V| at nominal load:", np.sqrt(v.min()))


if __name__ == "__main__":
    main()
