"""Static power-system description, case/series parsing, and the admittance matrix.

A system is a set of buses joined by pi-model branches, with quadratic-cost
generators, energy storage devices, and must-take wind injection sites.  All
electrical quantities are per-unit on ``base_mva``; storage energy is in
p.u.-interval units.  Instances are immutable after construction and safe to
share across concurrent solver workers.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, asdict
from functools import cached_property

import numpy as np

BUS_KINDS = ("slack", "generator", "load")


class CaseError(ValueError):
    """Base class for case-file problems."""


class CaseSyntaxError(CaseError):
    """Malformed document (bad JSON, wrong types, missing keys)."""


class CaseSemanticError(CaseError):
    """Well-formed document that violates a system invariant."""


class SeriesFormatError(ValueError):
    """Malformed or inconsistent time-series document."""


@dataclass(frozen=True)
class Bus:
    """A network node.

    ``kind`` is one of slack/generator/load; slack and generator buses hold
    their voltage magnitude at ``v_set``.  Base loads are scaled per interval
    by the time series.
    """

    id: int
    kind: str
    p_load_base: float = 0.0
    q_load_base: float = 0.0
    v_min: float = 0.94
    v_max: float = 1.06
    v_set: float | None = None


@dataclass(frozen=True)
class Branch:
    """A pi-model line: series impedance r + jx, total shunt susceptance b_sh.

    ``i_max`` is the current-magnitude limit at the from-end; None means the
    line is unconstrained.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    i_max: float | None = None

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    """A dispatchable generator with cost a*P^2 + b*P + c ($, P in p.u.)."""

    bus: int
    a: float
    b: float
    c: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class StorageDevice:
    """An energy storage device.

    Energy evolves as E(t+1) = E(t) + eta_c*P_in - P_out/eta_d - eps_sbl per
    interval; the standby loss applies unconditionally, even to an empty
    device (the energy lower bound keeps the dispatch problem feasible).
    """

    bus: int
    e_min: float
    e_max: float
    e_init: float
    p_in_max: float
    p_out_max: float
    eta_c: float
    eta_d: float
    eps_sbl: float = 0.0


@dataclass(frozen=True)
class TimeSeries:
    """Per-interval load multiplier and wind injections.

    ``load_scale`` multiplies every base load; ``wind_power`` maps a wind-site
    bus id to its active-power injection series (p.u.).  All series share one
    length.
    """

    interval_minutes: int
    load_scale: np.ndarray
    wind_power: dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.load_scale)


@dataclass(frozen=True)
class PowerSystem:
    """The static network: buses, branches, generators, storages, wind sites."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    storages: tuple[StorageDevice, ...]
    wind_buses: tuple[int, ...] = ()
    base_mva: float = 100.0

    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """Map external bus id -> 0-based position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def neighbors(self) -> dict[int, tuple[int, ...]]:
        """Adjacency sets from the branch list (bus id -> sorted neighbor ids)."""
        adj: dict[int, set[int]] = {b.id: set() for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        return {j: tuple(sorted(s)) for j, s in adj.items()}

    @cached_property
    def gens_at_bus(self) -> dict[int, tuple[int, ...]]:
        """Bus id -> indices into ``generators`` of the units connected there."""
        at: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for i, g in enumerate(self.generators):
            at[g.bus].append(i)
        return {j: tuple(v) for j, v in at.items()}

    @cached_property
    def storages_at_bus(self) -> dict[int, tuple[int, ...]]:
        at: dict[int, list[int]] = {b.id: [] for b in self.buses}
        for s, d in enumerate(self.storages):
            at[d.bus].append(s)
        return {j: tuple(v) for j, v in at.items()}

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def slack_buses(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.kind == "slack")

    @cached_property
    def pinned_buses(self) -> tuple[int, ...]:
        """Buses whose voltage magnitude is held at v_set (slack + generator kind)."""
        return tuple(b.id for b in self.buses if b.kind in ("slack", "generator"))


def _req(record: dict, key: str, where: str):
    if key not in record:
        raise CaseSyntaxError(f"{where}: missing field '{key}'")
    return record[key]


def validate_system(system: PowerSystem, require_connected: bool = True) -> None:
    """Check all type invariants; raise CaseSemanticError naming the offender.

    ``require_connected`` also enforces single-slack + graph connectivity (the
    parser's defaults); pass False when assembling multi-island test systems
    directly.
    """
    ids = [b.id for b in system.buses]
    if not ids:
        raise CaseSemanticError("system has no buses")
    seen: set[int] = set()
    for b in system.buses:
        if b.id in seen:
            raise CaseSemanticError(f"bus {b.id}: duplicate id")
        seen.add(b.id)
        if b.kind not in BUS_KINDS:
            raise CaseSemanticError(f"bus {b.id}: unknown kind '{b.kind}'")
        if b.v_min > b.v_max:
            raise CaseSemanticError(f"bus {b.id}: v_min > v_max")
        if b.kind in ("slack", "generator") and b.v_set is None:
            raise CaseSemanticError(f"bus {b.id}: kind '{b.kind}' requires v_set")
        if b.v_set is not None and not (b.v_min <= b.v_set <= b.v_max):
            raise CaseSemanticError(f"bus {b.id}: v_set outside [v_min, v_max]")

    for n, br in enumerate(system.branches):
        where = f"branch {n} ({br.from_bus}-{br.to_bus})"
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise CaseSemanticError(f"{where}: unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"{where}: self-loop")
        if br.r == 0.0 and br.x == 0.0:
            raise CaseSemanticError(f"{where}: zero series impedance")
        if br.i_max is not None and br.i_max <= 0.0:
            raise CaseSemanticError(f"{where}: i_max must be positive")

    for n, g in enumerate(system.generators):
        where = f"generator {n} at bus {g.bus}"
        if g.bus not in seen:
            raise CaseSemanticError(f"{where}: unknown bus {g.bus}")
        if g.a < 0.0:
            raise CaseSemanticError(f"{where}: negative quadratic cost coefficient")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseSemanticError(f"{where}: empty output box")

    for n, d in enumerate(system.storages):
        where = f"storage {n} at bus {d.bus}"
        if d.bus not in seen:
            raise CaseSemanticError(f"{where}: unknown bus {d.bus}")
        if not (d.e_min <= d.e_init <= d.e_max):
            raise CaseSemanticError(f"{where}: e_init outside [e_min, e_max]")
        if not (0.0 < d.eta_c * d.eta_d <= 1.0):
            raise CaseSemanticError(f"{where}: eta_c*eta_d must lie in (0, 1]")
        if d.eps_sbl < 0.0:
            raise CaseSemanticError(f"{where}: negative standby loss")
        if d.p_in_max < 0.0 or d.p_out_max < 0.0:
            raise CaseSemanticError(f"{where}: negative power limit")

    for w in system.wind_buses:
        if w not in seen:
            raise CaseSemanticError(f"wind site: unknown bus {w}")

    if require_connected:
        slacks = [b.id for b in system.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise CaseSemanticError(
                f"exactly one slack bus required, found {len(slacks)}: {slacks}"
            )
        # BFS over the branch adjacency
        todo = [ids[0]]
        reached = {ids[0]}
        while todo:
            j = todo.pop()
            for k in system.neighbors[j]:
                if k not in reached:
                    reached.add(k)
                    todo.append(k)
        missing = sorted(set(ids) - reached)
        if missing:
            raise CaseSemanticError(f"disconnected graph: buses {missing} unreachable")


def parse_case(text: str) -> PowerSystem:
    """Parse a UTF-8 JSON case document into a validated PowerSystem.

    Raises CaseSyntaxError (with position) on malformed documents and
    CaseSemanticError naming the offending record on invariant violations.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseSyntaxError(f"line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise CaseSyntaxError("top level must be a JSON object")

    try:
        buses = tuple(
            Bus(
                id=int(_req(rec, "id", f"buses[{i}]")),
                kind=str(_req(rec, "kind", f"buses[{i}]")),
                p_load_base=float(rec.get("p_load_base", 0.0)),
                q_load_base=float(rec.get("q_load_base", 0.0)),
                v_min=float(rec.get("v_min", 0.94)),
                v_max=float(rec.get("v_max", 1.06)),
                v_set=None if rec.get("v_set") is None else float(rec["v_set"]),
            )
            for i, rec in enumerate(doc.get("buses", []))
        )
        branches = tuple(
            Branch(
                from_bus=int(_req(rec, "from_bus", f"branches[{i}]")),
                to_bus=int(_req(rec, "to_bus", f"branches[{i}]")),
                r=float(_req(rec, "r", f"branches[{i}]")),
                x=float(_req(rec, "x", f"branches[{i}]")),
                b_sh=float(rec.get("b_sh", 0.0)),
                i_max=None if rec.get("i_max") is None else float(rec["i_max"]),
            )
            for i, rec in enumerate(doc.get("branches", []))
        )
        generators = tuple(
            Generator(
                bus=int(_req(rec, "bus", f"generators[{i}]")),
                a=float(_req(rec, "a", f"generators[{i}]")),
                b=float(_req(rec, "b", f"generators[{i}]")),
                c=float(_req(rec, "c", f"generators[{i}]")),
                p_min=float(_req(rec, "p_min", f"generators[{i}]")),
                p_max=float(_req(rec, "p_max", f"generators[{i}]")),
                q_min=float(_req(rec, "q_min", f"generators[{i}]")),
                q_max=float(_req(rec, "q_max", f"generators[{i}]")),
            )
            for i, rec in enumerate(doc.get("generators", []))
        )
        storages = tuple(
            StorageDevice(
                bus=int(_req(rec, "bus", f"storages[{i}]")),
                e_min=float(_req(rec, "e_min", f"storages[{i}]")),
                e_max=float(_req(rec, "e_max", f"storages[{i}]")),
                e_init=float(_req(rec, "e_init", f"storages[{i}]")),
                p_in_max=float(_req(rec, "p_in_max", f"storages[{i}]")),
                p_out_max=float(_req(rec, "p_out_max", f"storages[{i}]")),
                eta_c=float(_req(rec, "eta_c", f"storages[{i}]")),
                eta_d=float(_req(rec, "eta_d", f"storages[{i}]")),
                eps_sbl=float(rec.get("eps_sbl", 0.0)),
            )
            for i, rec in enumerate(doc.get("storages", []))
        )
        wind_buses = tuple(int(w) for w in doc.get("wind_buses", []))
        base_mva = float(doc.get("base_mva", 100.0))
    except (TypeError, ValueError) as e:
        if isinstance(e, CaseError):
            raise
        raise CaseSyntaxError(f"bad field value: {e}") from e

    system = PowerSystem(
        buses=buses,
        branches=branches,
        generators=generators,
        storages=storages,
        wind_buses=wind_buses,
        base_mva=base_mva,
    )
    validate_system(system)
    return system


def serialize_case(system: PowerSystem) -> str:
    """Render a PowerSystem back to its JSON case document (round-trips)."""
    doc = {
        "base_mva": system.base_mva,
        "buses": [asdict(b) for b in system.buses],
        "branches": [asdict(br) for br in system.branches],
        "generators": [asdict(g) for g in system.generators],
        "storages": [asdict(s) for s in system.storages],
        "wind_buses": list(system.wind_buses),
    }
    return json.dumps(doc, indent=2) + "\n"


def build_admittance(system: PowerSystem) -> np.ndarray:
    """Build the complex B x B bus admittance matrix.

    Off-diagonal (m, n) is minus the summed series admittance of the parallel
    branches between m and n; the diagonal collects incident series
    admittances plus half of each incident branch's shunt susceptance.
    """
    B = system.n_buses
    idx = system.bus_index
    Y = np.zeros((B, B), dtype=complex)
    for br in system.branches:
        j, k = idx[br.from_bus], idx[br.to_bus]
        ys = br.y_series
        ysh = 0.5j * br.b_sh
        Y[j, j] += ys + ysh
        Y[k, k] += ys + ysh
        Y[j, k] -= ys
        Y[k, j] -= ys
    return Y


def parse_timeseries(text: str, system: PowerSystem) -> TimeSeries:
    """Parse the wind/load CSV (`minute,load_scale,wind_<busid>,...`).

    The minute column must increase with a constant stride, which defines
    interval_minutes (default 10 for a single-row file).  Wind columns must
    cover exactly the system's wind buses.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SeriesFormatError("empty time-series document") from None
    header = [h.strip() for h in header]
    if header[:2] != ["minute", "load_scale"]:
        raise SeriesFormatError("header must start with 'minute,load_scale'")

    wind_cols: dict[int, int] = {}
    for pos, name in enumerate(header[2:], start=2):
        if not name.startswith("wind_"):
            raise SeriesFormatError(f"unexpected column '{name}'")
        try:
            bus = int(name[5:])
        except ValueError:
            raise SeriesFormatError(f"malformed wind column '{name}'") from None
        if bus not in system.wind_buses:
            raise SeriesFormatError(f"unknown wind bus {bus}")
        wind_cols[bus] = pos
    missing = sorted(set(system.wind_buses) - set(wind_cols))
    if missing:
        raise SeriesFormatError(f"missing wind column(s) for bus(es) {missing}")

    minutes: list[int] = []
    scale: list[float] = []
    wind: dict[int, list[float]] = {b: [] for b in wind_cols}
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header) or any(not c.strip() for c in row):
            raise SeriesFormatError(f"row {rownum}: length mismatch with header")
        minutes.append(int(row[0]))
        ls = float(row[1])
        if ls <= 0.0:
            raise SeriesFormatError(f"row {rownum}: load_scale must be positive")
        scale.append(ls)
        for bus, pos in wind_cols.items():
            w = float(row[pos])
            if w < 0.0:
                raise SeriesFormatError(f"row {rownum}: negative wind at bus {bus}")
            wind[bus].append(w)

    if not minutes:
        raise SeriesFormatError("time series has no rows")
    if len(minutes) == 1:
        stride = 10
    else:
        strides = np.diff(minutes)
        if strides[0] <= 0 or not np.all(strides == strides[0]):
            raise SeriesFormatError("minute column must increase with constant stride")
        stride = int(strides[0])

    return TimeSeries(
        interval_minutes=stride,
        load_scale=np.asarray(scale),
        wind_power={b: np.asarray(v) for b, v in wind.items()},
    )
