"""Delimited and JSON report writers.

Everything here is deterministic for fixed inputs: keys are sorted, floats
use the shortest round-trip representation, and rows follow fixed orders.
Wall-clock fields are the one nondeterministic ingredient; ``timing=False``
writes them as 0 so that repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .mpc import MpcResult, step_convergence_time
from .model import PowerSystem
from .ocd import DistributedReport
from .partition import AffinityMatrix, Partition

TRACE_HEADER = ("iteration", "region", "residual_norm", "step_seconds",
                "scalars_sent")
COMPARE_HEADER = ("horizon", "method", "partition", "steps", "converged_steps",
                  "avg_iterations", "median_iterations", "max_iterations",
                  "avg_convergence_time_s")
SCHEDULE_HEADER = ("step", "entity", "variable", "value")
STEPS_HEADER = ("step", "iterations", "convergence_time_s", "objective")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def report_to_dict(report, timing: bool = True) -> dict:
    """JSON-friendly summary of a solve report (solution vector omitted)."""
    doc = {
        "converged": bool(report.converged),
        "iterations": int(report.iterations),
        "objective": float(report.objective),
        "residual_norm": float(report.residual_norm),
        "wall_seconds": float(report.wall_seconds) if timing else 0.0,
        "mu_final": float(report.mu_final),
        "diagnosis": report.diagnosis,
    }
    if isinstance(report, DistributedReport):
        doc["method"] = report.method
        doc["regions"] = report.partition.K
        doc["convergence_time_s"] = (
            float(report.convergence_time) if timing else 0.0
        )
        doc["total_scalars_exchanged"] = int(report.total_scalars_exchanged)
    else:
        doc["method"] = "centralized"
    return doc


def write_trace_csv(path, report, timing: bool = True) -> None:
    """Per-iteration per-region trace of a solve.

    Centralized reports are written as a single region 0 whose step time is
    the Newton factor+solve time.
    """
    if isinstance(report, DistributedReport):
        rows = [
            (it, region, norm, seconds if timing else 0.0, sent)
            for (it, region, norm, seconds, sent) in report.trace
        ]
    else:
        rows = [
            (it, 0, norm, seconds if timing else 0.0, 0)
            for it, (norm, seconds) in enumerate(
                zip(report.residual_history, report.per_iteration_seconds)
            )
        ]
    write_csv(path, TRACE_HEADER, rows)


def compare_row(horizon: int, method: str, partition_name: str,
                results: list, steps_requested: int, timing: bool = True):
    """One comparison-table row aggregated from per-step solve reports."""
    its = [r.iterations for r in results if r.converged]
    times = [step_convergence_time(r) for r in results if r.converged]
    n_conv = len(its)
    return (
        horizon, method, partition_name, steps_requested, n_conv,
        float(np.mean(its)) if its else float("nan"),
        float(np.median(its)) if its else float("nan"),
        int(np.max(its)) if its else 0,
        (float(np.mean(times)) if timing else 0.0) if times else float("nan"),
    )


def write_schedule_csv(path, system: PowerSystem, result: MpcResult) -> None:
    """Applied-schedule export: one row per step/entity/variable."""
    rows = []
    for t in range(result.applied_pg.shape[0]):
        for i, g in enumerate(system.generators):
            rows.append((t, f"gen{i}@bus{g.bus}", "p_g", result.applied_pg[t, i]))
            rows.append((t, f"gen{i}@bus{g.bus}", "q_g", result.applied_qg[t, i]))
        for s, d in enumerate(system.storages):
            rows.append((t, f"storage{s}@bus{d.bus}", "p_in", result.applied_pin[t, s]))
            rows.append((t, f"storage{s}@bus{d.bus}", "p_out", result.applied_pout[t, s]))
            rows.append((t, f"storage{s}@bus{d.bus}", "e", result.applied_e[t, s]))
    write_csv(path, SCHEDULE_HEADER, rows)


def write_steps_csv(path, results: list, timing: bool = True) -> None:
    """Per-MPC-step iteration counts and convergence times."""
    rows = [
        (t, r.iterations,
         step_convergence_time(r) if timing else 0.0,
         r.objective)
        for t, r in enumerate(results)
    ]
    write_csv(path, STEPS_HEADER, rows)


def write_affinity_csv(path, aff: AffinityMatrix) -> None:
    header = ["bus"] + [str(b) for b in aff.bus_ids]
    rows = [
        [str(bus)] + [a for a in aff.a[i]]
        for i, bus in enumerate(aff.bus_ids)
    ]
    write_csv(path, header, rows)


def partition_summary(partition: Partition, system: PowerSystem) -> dict:
    regions: dict[int, list[int]] = {}
    for bus, r in sorted(partition.region_of.items()):
        regions.setdefault(r, []).append(bus)
    return {
        "K": partition.K,
        "regions": {str(r): v for r, v in sorted(regions.items())},
        "tie_lines": [
            {"index": n,
             "from_bus": system.branches[n].from_bus,
             "to_bus": system.branches[n].to_bus}
            for n in partition.tie_lines
        ],
        "boundary_buses": sorted(partition.boundary_buses),
    }
