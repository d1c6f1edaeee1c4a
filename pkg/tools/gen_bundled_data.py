"""Generate the bundled synthetic cases, series, and baseline partitions.

All bundled data is synthetic: the shapes mimic a daily load/wind profile and
a small two-cluster grid, but none of it is measured data.  Run from the repo
root; writes into src/mpopf/data/.
"""

import json
import math
import pathlib

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "mpopf" / "data"

ETA = math.sqrt(0.95)  # per-direction storage efficiency, roundtrip 0.95


def case5_demo() -> dict:
    return {
        "base_mva": 100.0,
        "buses": [
            {"id": 1, "kind": "slack", "p_load_base": 0.0, "q_load_base": 0.0,
             "v_min": 0.94, "v_max": 1.06, "v_set": 1.02},
            {"id": 2, "kind": "generator", "p_load_base": 0.0, "q_load_base": 0.0,
             "v_min": 0.94, "v_max": 1.06, "v_set": 1.01},
            {"id": 3, "kind": "load", "p_load_base": 0.35, "q_load_base": 0.10,
             "v_min": 0.94, "v_max": 1.06, "v_set": None},
            {"id": 4, "kind": "load", "p_load_base": 0.40, "q_load_base": 0.12,
             "v_min": 0.94, "v_max": 1.06, "v_set": None},
            {"id": 5, "kind": "load", "p_load_base": 0.30, "q_load_base": 0.08,
             "v_min": 0.94, "v_max": 1.06, "v_set": None},
        ],
        "branches": [
            {"from_bus": 1, "to_bus": 2, "r": 0.02, "x": 0.10, "b_sh": 0.02, "i_max": None},
            {"from_bus": 2, "to_bus": 3, "r": 0.02, "x": 0.09, "b_sh": 0.02, "i_max": None},
            {"from_bus": 3, "to_bus": 4, "r": 0.03, "x": 0.12, "b_sh": 0.02, "i_max": 1.2},
            {"from_bus": 4, "to_bus": 5, "r": 0.03, "x": 0.12, "b_sh": 0.02, "i_max": None},
            {"from_bus": 5, "to_bus": 1, "r": 0.02, "x": 0.10, "b_sh": 0.02, "i_max": 1.2},
            {"from_bus": 2, "to_bus": 5, "r": 0.04, "x": 0.16, "b_sh": 0.01, "i_max": None},
        ],
        "generators": [
            {"bus": 1, "a": 30.0, "b": 200.0, "c": 100.0,
             "p_min": 0.05, "p_max": 1.0, "q_min": -1.0, "q_max": 1.0},
            {"bus": 2, "a": 55.0, "b": 320.0, "c": 80.0,
             "p_min": 0.05, "p_max": 1.2, "q_min": -1.0, "q_max": 1.0},
        ],
        "storages": [
            {"bus": 4, "e_min": 0.02, "e_max": 1.0, "e_init": 0.5,
             "p_in_max": 0.3, "p_out_max": 0.3,
             "eta_c": ETA, "eta_d": ETA, "eps_sbl": 0.005},
        ],
        "wind_buses": [3],
    }


def case14_like() -> dict:
    """A 14-bus two-cluster grid: buses 1-7 and 8-14, joined by two weak ties."""
    buses = [
        {"id": 1, "kind": "slack", "p_load_base": 0.0, "q_load_base": 0.0,
         "v_min": 0.94, "v_max": 1.06, "v_set": 1.03},
        {"id": 2, "kind": "generator", "p_load_base": 0.10, "q_load_base": 0.03,
         "v_min": 0.94, "v_max": 1.06, "v_set": 1.02},
        {"id": 3, "kind": "generator", "p_load_base": 0.15, "q_load_base": 0.04,
         "v_min": 0.94, "v_max": 1.06, "v_set": 1.01},
        {"id": 4, "kind": "load", "p_load_base": 0.25, "q_load_base": 0.07,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 5, "kind": "load", "p_load_base": 0.20, "q_load_base": 0.05,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 6, "kind": "load", "p_load_base": 0.18, "q_load_base": 0.05,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 7, "kind": "load", "p_load_base": 0.12, "q_load_base": 0.03,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 8, "kind": "generator", "p_load_base": 0.0, "q_load_base": 0.0,
         "v_min": 0.94, "v_max": 1.06, "v_set": 1.02},
        {"id": 9, "kind": "load", "p_load_base": 0.30, "q_load_base": 0.08,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 10, "kind": "load", "p_load_base": 0.22, "q_load_base": 0.06,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 11, "kind": "load", "p_load_base": 0.18, "q_load_base": 0.05,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 12, "kind": "load", "p_load_base": 0.16, "q_load_base": 0.04,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
        {"id": 13, "kind": "generator", "p_load_base": 0.10, "q_load_base": 0.03,
         "v_min": 0.94, "v_max": 1.06, "v_set": 1.01},
        {"id": 14, "kind": "load", "p_load_base": 0.24, "q_load_base": 0.06,
         "v_min": 0.94, "v_max": 1.06, "v_set": None},
    ]
    # internal lines are stiff (small x); the two 7-8 / 6-9 ties are weak
    def line(f, t, r, x, b_sh=0.02, i_max=None):
        return {"from_bus": f, "to_bus": t, "r": r, "x": x, "b_sh": b_sh, "i_max": i_max}

    branches = [
        # cluster A (1-7)
        line(1, 2, 0.010, 0.06),
        line(1, 5, 0.014, 0.08),
        line(2, 3, 0.012, 0.07),
        line(2, 4, 0.014, 0.08),
        line(3, 4, 0.012, 0.07),
        line(4, 5, 0.010, 0.06),
        line(4, 7, 0.014, 0.08),
        line(5, 6, 0.012, 0.07),
        line(6, 7, 0.014, 0.08),
        # ties (weaker than the cluster-internal lines)
        line(7, 8, 0.040, 0.20, b_sh=0.01, i_max=1.1),
        line(6, 9, 0.045, 0.22, b_sh=0.01, i_max=1.1),
        # cluster B (8-14)
        line(8, 9, 0.012, 0.07),
        line(8, 11, 0.014, 0.08),
        line(9, 10, 0.010, 0.06),
        line(9, 13, 0.014, 0.08),
        line(10, 11, 0.012, 0.07),
        line(11, 12, 0.012, 0.07),
        line(12, 13, 0.010, 0.06),
        line(13, 14, 0.012, 0.07),
        line(10, 14, 0.014, 0.08),
    ]
    generators = [
        {"bus": 1, "a": 25.0, "b": 180.0, "c": 100.0,
         "p_min": 0.05, "p_max": 1.6, "q_min": -1.0, "q_max": 1.0},
        {"bus": 2, "a": 40.0, "b": 250.0, "c": 90.0,
         "p_min": 0.02, "p_max": 0.9, "q_min": -0.8, "q_max": 0.8},
        {"bus": 3, "a": 55.0, "b": 300.0, "c": 80.0,
         "p_min": 0.02, "p_max": 0.7, "q_min": -0.8, "q_max": 0.8},
        {"bus": 8, "a": 60.0, "b": 340.0, "c": 90.0,
         "p_min": 0.02, "p_max": 0.8, "q_min": -0.9, "q_max": 0.9},
        {"bus": 13, "a": 70.0, "b": 380.0, "c": 80.0,
         "p_min": 0.02, "p_max": 0.6, "q_min": -0.8, "q_max": 0.8},
    ]
    storages = [
        {"bus": 14, "e_min": 0.02, "e_max": 1.0, "e_init": 0.5,
         "p_in_max": 0.08, "p_out_max": 0.08,
         "eta_c": ETA, "eta_d": ETA, "eps_sbl": 0.005},
    ]
    return {
        "base_mva": 100.0,
        "buses": buses,
        "branches": branches,
        "generators": generators,
        "storages": storages,
        "wind_buses": [5],
    }


def daily_series(wind_bus: int, n: int = 144) -> str:
    """A smooth synthetic 24-hour profile at 10-minute intervals."""
    rows = ["minute,load_scale,wind_%d" % wind_bus]
    for i in range(n):
        h = i * 10.0 / 60.0  # hour of day
        load = (0.78
                + 0.13 * math.exp(-((h - 18.5) / 3.2) ** 2)
                + 0.07 * math.exp(-((h - 8.5) / 2.4) ** 2)
                - 0.05 * math.exp(-((h - 3.0) / 2.6) ** 2))
        wind = (0.16
                + 0.10 * math.sin(2 * math.pi * h / 24.0 + 1.1)
                + 0.05 * math.sin(2 * math.pi * h / 8.0 + 0.4))
        wind = max(0.0, wind)
        rows.append("%d,%.4f,%.4f" % (i * 10, load, wind))
    return "\n".join(rows) + "\n"


def valley_peak_series(wind_bus: int, n: int = 24) -> str:
    """A cheap valley, then a peak inside the first 12 intervals so a
    12-step window accounts for the look-ahead payoff."""
    rows = ["minute,load_scale,wind_%d" % wind_bus]
    for i in range(n):
        u = i / (n - 1.0)
        load = 0.60 + 0.50 * math.exp(-((u - 0.45) / 0.18) ** 2)
        rows.append("%d,%.4f,%.4f" % (i * 10, load, 0.0))
    return "\n".join(rows) + "\n"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "case5_demo.json").write_text(json.dumps(case5_demo(), indent=2) + "\n")
    (OUT / "case14_like.json").write_text(json.dumps(case14_like(), indent=2) + "\n")
    (OUT / "case5_demo_series.csv").write_text(daily_series(3))
    (OUT / "case14_like_series.csv").write_text(daily_series(5))
    (OUT / "case5_demo_valleypeak.csv").write_text(valley_peak_series(3))
    # illustrative "by eye" geographic partitions that ignore coupling strength
    arb = {
        "case5_demo_arb_k2.json": {"K": 2, "region_of": {"1": 0, "2": 0, "3": 1, "4": 1, "5": 1}},
        "case5_demo_arb_k3.json": {"K": 3, "region_of": {"1": 0, "2": 1, "3": 1, "4": 2, "5": 2}},
        # a left/right split that looks fine on the one-line diagram but cuts
        # six strongly coupled lines
        "case14_like_arb_k2.json": {"K": 2, "region_of": {
            "1": 0, "2": 0, "5": 0, "6": 0, "7": 0,
            "3": 1, "4": 1, "8": 1, "9": 1, "10": 1,
            "11": 1, "12": 1, "13": 1, "14": 1}},
        "case14_like_arb_k3.json": {"K": 3, "region_of": {
            "1": 0, "2": 0, "3": 0, "4": 0, "5": 0,
            "6": 1, "7": 1, "8": 1, "9": 1,
            "10": 2, "11": 2, "12": 2, "13": 2, "14": 2}},
    }
    for name, doc in arb.items():
        (OUT / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print("wrote bundled data to", OUT)


if __name__ == "__main__":
    main()
