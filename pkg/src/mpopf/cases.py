"""Loaders for the bundled synthetic cases and series.

The bundled data is synthetic: profiles and parameters are shaped like a
daily wind/load cycle on small demo grids, but none of it is measured data.
"""

from __future__ import annotations

import importlib.resources
import json

from .model import PowerSystem, TimeSeries, parse_case, parse_timeseries

BUNDLED_CASES = ("case5_demo", "case14_like")


def _read_text(name: str) -> str:
    ref = importlib.resources.files("mpopf.data").joinpath(name)
    return ref.read_text(encoding="utf-8")


def load_case(name: str) -> PowerSystem:
    """Load a bundled case by name (one of BUNDLED_CASES)."""
    if name not in BUNDLED_CASES:
        raise KeyError(f"unknown bundled case '{name}'; have {BUNDLED_CASES}")
    return parse_case(_read_text(name + ".json"))


def load_series(name: str, system: PowerSystem) -> TimeSeries:
    """Load a bundled series: '<case>_series' or 'case5_demo_valleypeak'."""
    return parse_timeseries(_read_text(name + ".csv"), system)


def load_bundled_partition(name: str) -> dict:
    """Load a committed baseline partition document (K + region_of)."""
    return json.loads(_read_text(name + ".json"))
