"""Command-line front end: solve | partition | compare | mpc.

Every command reads a case (and usually a series), runs the requested
experiment, and writes delimited output plus rendered figures into --out.
A JSON config file can carry any flag (flags override the file).  Exit code
0 means every requested solve converged; 3 flags a non-converged solve;
2 is a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formulation as fm
from . import plots, reporting
from .central import solve_centralized
from .cases import BUNDLED_CASES, _read_text
from .model import build_admittance, parse_case, parse_timeseries
from .mpc import (
    METHOD_CENTRALIZED,
    MpcConfig,
    MpcRunError,
    run_mpc,
)
from .ocd import METHOD_OCD, METHOD_OCDC, solve_distributed
from .partition import (
    Partition,
    compute_affinity,
    partition_from_json,
    partition_to_json,
    spectral_partition,
)

METHOD_ALIASES = {
    "centralized": METHOD_CENTRALIZED,
    "central": METHOD_CENTRALIZED,
    "ocd": METHOD_OCD,
    "ocd-c": METHOD_OCDC,
    "ocdc": METHOD_OCDC,
}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3


@dataclass
class ExperimentConfig:
    """Resolved experiment description (config file merged with flags)."""

    mode: str
    case_path: str = ""
    series_path: str = ""
    horizons: list[int] = field(default_factory=lambda: [1])
    methods: list[str] = field(default_factory=lambda: [METHOD_CENTRALIZED])
    partitions: list[tuple[str, str]] = field(default_factory=list)
    seed: int = 0
    output_dir: str = "out"
    regions: int = 2
    steps: int = 12
    start: int = 0
    tolerance: float = 1e-3
    max_iter: int = 500
    ref_interval: int = 0
    timing: str = "wall"

    def validate(self) -> None:
        if not self.case_path:
            raise UsageError("--case is required")
        if any(n < 1 for n in self.horizons):
            raise UsageError("horizons must be >= 1")
        if not self.methods:
            raise UsageError("at least one --method is required")
        for m in self.methods:
            if m not in (METHOD_CENTRALIZED, METHOD_OCD, METHOD_OCDC):
                raise UsageError(f"unknown method '{m}'")


class UsageError(ValueError):
    pass


def _read_input(path: str) -> str:
    """Read a file path, or a bundled data name like 'case5_demo'."""
    p = Path(path)
    if p.exists():
        return p.read_text()
    stem = path.removesuffix(".json").removesuffix(".csv")
    for suffix in (".json", ".csv"):
        try:
            return _read_text(stem + suffix)
        except (FileNotFoundError, ModuleNotFoundError):
            continue
    raise FileNotFoundError(path)


def load_experiment(cfg: ExperimentConfig):
    system = parse_case(_read_input(cfg.case_path))
    series = None
    if cfg.series_path:
        series = parse_timeseries(_read_input(cfg.series_path), system)
    return system, series


def compute_sp_partition(system, series, cfg: ExperimentConfig):
    """The partitioning procedure: solve N=1 at the reference interval, build
    the affinity from the Hessian at the solution, cluster.  Returns
    (partition, affinity)."""
    problem = fm.build_horizon_problem(system, series, cfg.ref_interval, 1)
    rep = solve_centralized(problem, tolerance=cfg.tolerance,
                            max_iter=cfg.max_iter)
    if not rep.converged:
        raise RuntimeError(
            f"reference solve at interval {cfg.ref_interval} failed: "
            f"{rep.diagnosis}"
        )
    kkt = fm.assemble_hessian(problem, rep.solution)
    aff = compute_affinity(kkt, build_admittance(system), problem.layout)
    return spectral_partition(aff, cfg.regions, cfg.seed, system=system), aff


def resolve_partitions(cfg: ExperimentConfig, system, series) -> dict[str, Partition]:
    """Named partitions for the experiment grid: computed SP and/or files."""
    named: dict[str, Partition] = {}
    specs = cfg.partitions or [("sp", "computed")]
    for name, source in specs:
        if source == "computed":
            named[name], _ = compute_sp_partition(system, series, cfg)
        else:
            named[name] = partition_from_json(_read_input(source), system)
    return named


def _grid(cfg: ExperimentConfig, named: dict[str, Partition]):
    """Deterministic (method, partition-name) grid; centralized ignores
    partitions."""
    for method in cfg.methods:
        if method == METHOD_CENTRALIZED:
            yield method, "", None
        else:
            for pname in named:
                yield method, pname, named[pname]


def _label(method: str, pname: str) -> str:
    return f"{method}/{pname}" if pname else method


def _run_grid_point(system, series, cfg, horizon, method, part):
    """One MPC run; non-convergence becomes a partial result, not an abort."""
    mpc_cfg = MpcConfig(
        horizon=horizon, method=method, partition=part,
        steps_to_run=cfg.steps, tolerance=cfg.tolerance,
        max_iter=cfg.max_iter, reference_interval=cfg.ref_interval,
    )
    try:
        result = run_mpc(system, series, mpc_cfg)
        return result, result.per_step, True
    except MpcRunError as err:
        return err.partial, err.partial.per_step, False


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg: ExperimentConfig) -> int:
    system, series = load_experiment(cfg)
    if series is None:
        raise UsageError("--series is required for solve")
    timing = cfg.timing == "wall"
    out = Path(cfg.output_dir)
    method = cfg.methods[0]
    horizon = cfg.horizons[0]
    problem = fm.build_horizon_problem(system, series, cfg.start, horizon)
    if method == METHOD_CENTRALIZED:
        rep = solve_centralized(problem, tolerance=cfg.tolerance,
                                max_iter=cfg.max_iter)
    else:
        named = resolve_partitions(cfg, system, series)
        part = next(iter(named.values()))
        rep = solve_distributed(problem, part, method,
                                tolerance=cfg.tolerance, max_iter=cfg.max_iter)
    reporting.write_json(out / "report.json", reporting.report_to_dict(rep, timing))
    reporting.write_trace_csv(out / "trace.csv", rep, timing)
    print(f"solve: converged={rep.converged} iterations={rep.iterations} "
          f"objective={rep.objective:.6g}")
    print(f"wrote {out / 'report.json'}, {out / 'trace.csv'}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def cmd_partition(cfg: ExperimentConfig) -> int:
    system, series = load_experiment(cfg)
    if series is None:
        raise UsageError("--series is required for partition")
    out = Path(cfg.output_dir)
    part, aff = compute_sp_partition(system, series, cfg)
    if cfg.regions >= system.n_buses:
        print("warning: K equals the bus count; every region is a singleton",
              file=sys.stderr)
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(partition_to_json(part))
    reporting.write_affinity_csv(out / "affinity.csv", aff)
    reporting.write_json(out / "partition_summary.json",
                         reporting.partition_summary(part, system))
    plots.affinity_heatmap(aff.a, aff.bus_ids, out / "affinity.png")
    print(f"partition (K={part.K}): "
          f"{reporting.partition_summary(part, system)['regions']}")
    print(f"wrote {out / 'partition.json'}, {out / 'affinity.csv'}, "
          f"{out / 'affinity.png'}")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig) -> int:
    system, series = load_experiment(cfg)
    if series is None:
        raise UsageError("--series is required for compare")
    timing = cfg.timing == "wall"
    out = Path(cfg.output_dir)
    named = resolve_partitions(cfg, system, series)
    grid = list(_grid(cfg, named))
    all_ok = True
    rows = []
    for horizon in cfg.horizons:
        time_series_by_label = {}
        for method, pname, part in grid:
            result, reports, ok = _run_grid_point(
                system, series, cfg, horizon, method, part)
            all_ok = all_ok and ok
            rows.append(reporting.compare_row(
                horizon, method, pname, reports, cfg.steps, timing))
            tag = _label(method, pname).replace("/", "_")
            reporting.write_steps_csv(
                out / f"steps_N{horizon}_{tag}.csv", reports, timing)
            time_series_by_label[_label(method, pname)] = [
                reporting.step_convergence_time(r) if timing else r.iterations
                for r in reports
            ]
        plots.per_step_series(
            time_series_by_label,
            "convergence time (s)" if timing else "iterations",
            out / f"per_step_N{horizon}.png",
            title=f"N={horizon}",
        )
    reporting.write_csv(out / "compare.csv", reporting.COMPARE_HEADER, rows)
    plots.iterations_bars(rows, out / "iterations.png")
    print(f"wrote {out / 'compare.csv'} and figures for horizons {cfg.horizons}")
    return EXIT_OK if all_ok else EXIT_NOT_CONVERGED


def cmd_mpc(cfg: ExperimentConfig) -> int:
    system, series = load_experiment(cfg)
    if series is None:
        raise UsageError("--series is required for mpc")
    timing = cfg.timing == "wall"
    out = Path(cfg.output_dir)
    needs_parts = any(m != METHOD_CENTRALIZED for m in cfg.methods)
    named = resolve_partitions(cfg, system, series) if needs_parts else {}
    grid = list(_grid(cfg, named))
    all_ok = True
    summary: dict[str, dict] = {}
    storage_by_horizon_label: dict[str, dict[str, np.ndarray]] = {}
    for horizon in cfg.horizons:
        time_by_label = {}
        for method, pname, part in grid:
            result, reports, ok = _run_grid_point(
                system, series, cfg, horizon, method, part)
            all_ok = all_ok and ok
            label = _label(method, pname)
            tag = label.replace("/", "_")
            reporting.write_schedule_csv(
                out / f"schedule_N{horizon}_{tag}.csv", system, result)
            reporting.write_steps_csv(
                out / f"steps_N{horizon}_{tag}.csv", reports, timing)
            summary.setdefault(str(horizon), {})[label] = {
                "total_cost": result.total_cost,
                "total_ramping": result.total_ramping,
                "converged_steps": sum(r.converged for r in reports),
                "requested_steps": cfg.steps,
            }
            time_by_label[label] = [
                reporting.step_convergence_time(r) if timing else 0.0
                for r in reports
            ]
            if result.applied_e.size:
                storage_by_horizon_label.setdefault(label, {})[
                    f"N={horizon}"] = result.applied_e[:, 0]
        if timing:
            plots.per_step_series(
                time_by_label, "convergence time (s)",
                out / f"time_per_step_N{horizon}.png", title=f"N={horizon}")
    reporting.write_json(out / "summary.json", summary)
    for label, by_horizon in storage_by_horizon_label.items():
        plots.storage_levels(
            by_horizon,
            out / f"storage_{label.replace('/', '_')}.png")
    print(f"wrote {out / 'summary.json'} plus schedules and figures")
    return EXIT_OK if all_ok else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# argument handling


def _parse_partition_flag(value: str) -> tuple[str, str]:
    if "=" in value:
        name, path = value.split("=", 1)
        return name, path
    if value.lower() == "sp":
        return "sp", "computed"
    raise argparse.ArgumentTypeError(
        "partition must be 'sp' or '<name>=<file.json>'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpopf",
        description="Multi-period AC OPF with storage: centralized and "
                    "distributed (OCD/OCD-C) solves, spectral partitioning, "
                    "and receding-horizon experiments.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, helptext in (
        ("solve", "one horizon solve at a fixed start interval"),
        ("partition", "compute and export the spectral partition"),
        ("compare", "iterations/time comparison table across methods"),
        ("mpc", "receding-horizon runs with schedule and summary export"),
    ):
        p = sub.add_parser(mode, help=helptext)
        p.add_argument("--config", help="JSON config file mirroring the flags")
        p.add_argument("--case", help="case file path or bundled name "
                       f"({', '.join(BUNDLED_CASES)})")
        p.add_argument("--series", help="time-series CSV path or bundled name")
        p.add_argument("--horizon", action="append", type=int, dest="horizons",
                       help="optimization horizon N (repeatable)")
        p.add_argument("--method", action="append", dest="methods",
                       choices=sorted(METHOD_ALIASES), help="solver (repeatable)")
        p.add_argument("--partition", action="append", dest="partitions",
                       type=_parse_partition_flag,
                       help="'sp' (computed) or name=<file.json> (repeatable)")
        p.add_argument("--regions", type=int, help="region count K for sp")
        p.add_argument("--seed", type=int, help="clustering seed")
        p.add_argument("--tol", type=float, help="convergence tolerance")
        p.add_argument("--max-iter", type=int, help="iteration cap per solve")
        p.add_argument("--ref-interval", type=int,
                       help="series interval for the partitioning solve")
        p.add_argument("--steps", type=int, help="MPC steps to run")
        p.add_argument("--start", type=int, help="start interval (solve)")
        p.add_argument("--timing", choices=("wall", "off"),
                       help="wall-clock timing in outputs, or zeros for "
                            "byte-reproducible output")
        p.add_argument("--out", help="output directory")
    return parser


_FLAG_TO_FIELD = {
    "case": "case_path", "series": "series_path", "horizons": "horizons",
    "methods": "methods", "partitions": "partitions", "regions": "regions",
    "seed": "seed", "tol": "tolerance", "max_iter": "max_iter",
    "ref_interval": "ref_interval", "steps": "steps", "start": "start",
    "timing": "timing", "out": "output_dir",
}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig(mode=args.mode)
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        for key, value in doc.items():
            if key not in _FLAG_TO_FIELD:
                raise UsageError(f"unknown config key '{key}'")
            if key == "partitions":
                value = [_parse_partition_flag(v) for v in value]
            if key == "methods":
                value = [METHOD_ALIASES[v] for v in value]
            setattr(cfg, _FLAG_TO_FIELD[key], value)
    for flag, fieldname in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "methods":
                value = [METHOD_ALIASES[v] for v in value]
            setattr(cfg, fieldname, value)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        command = {
            "solve": cmd_solve,
            "partition": cmd_partition,
            "compare": cmd_compare,
            "mpc": cmd_mpc,
        }[cfg.mode]
        return command(cfg)
    except UsageError as err:
        parser.error(str(err))  # exits 2
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
