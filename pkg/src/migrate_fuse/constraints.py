"""Per-year marginal targets and their demographic adjustments.

Flow matrices count people alive at both ends of the year (with deaths
and emigrants kept as non-movers), so Census targets are shifted onto that
population before use: year-``t`` populations lose natural increase and
net international migration, and mover/non-mover counts gain deaths and
emigrants on the diagonal.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import AlreadyAdjusted, InputError, MissingComponent, UnknownArea, ZeroEstimate
from .geo import GeoHierarchy

log = logging.getLogger(__name__)

Z90 = 1.645

WINDOWS = ("census2010",) + tuple(f"acs{y - 4}-{y}" for y in range(2010, 2020))
PATH_YEARS = tuple(range(2009, 2020))


@dataclass(frozen=True)
class ComponentsOfChange:
    """PEP/ACS components for one year, keyed by area id (county or state)."""

    year: int
    births: Mapping[str, float]
    deaths: Mapping[str, float]
    net_international: Mapping[str, float]
    immigrants: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("births", "deaths", "immigrants"):
            if any(v < 0 for v in getattr(self, name).values()):
                raise InputError(f"{name} must be non-negative")


@dataclass(frozen=True)
class ConstraintSet:
    year: int
    state_stayers: Mapping[str, float] = field(default_factory=dict)
    state_pops: Mapping[str, float] = field(default_factory=dict)
    state_flows: Mapping[tuple, float] = field(default_factory=dict)
    county_pops_prev: Mapping[str, float] = field(default_factory=dict)
    county_pops_curr: Mapping[str, float] = field(default_factory=dict)
    cbg_population_obs: Mapping[str, list] = field(default_factory=dict)
    adjusted: bool = False

    def __post_init__(self):
        for name in ("state_stayers", "state_pops", "state_flows", "county_pops_prev", "county_pops_curr"):
            vals = getattr(self, name).values()
            if any(not math.isfinite(v) or v < 0 for v in vals):
                raise InputError(f"{name} must be finite and non-negative")

    def check_hierarchy(self, h: GeoHierarchy) -> None:
        counties = set(h.county_to_state)
        states = set(h.county_to_state.values())
        for name in ("county_pops_prev", "county_pops_curr"):
            got = set(getattr(self, name))
            if got and got != counties:
                extra, missing = sorted(got - counties), sorted(counties - got)
                if extra:
                    raise UnknownArea(f"{name}: unknown counties {extra[:5]}")
                raise InputError(f"{name}: missing counties {missing[:5]}")
        for name in ("state_stayers", "state_pops"):
            extra = sorted(set(getattr(self, name)) - states)
            if extra:
                raise UnknownArea(f"{name}: unknown states {extra[:5]}")
        for r, s in self.state_flows:
            if r not in states or s not in states:
                raise UnknownArea(f"state flow ({r}, {s}) names an unknown state")


def adjust_population_targets(raw_pops: Mapping[str, float], c: ComponentsOfChange, year: int | None = None) -> dict:
    """Remove natural increase and net international migration; clamp at zero."""
    if year is not None and year != c.year:
        raise InputError(f"components are for {c.year}, targets for {year}")
    out = {}
    for area, raw in raw_pops.items():
        try:
            v = raw - (c.births[area] - c.deaths[area]) - c.net_international[area]
        except KeyError:
            raise MissingComponent(f"no components of change for area {area}") from None
        if v < 0:
            log.warning("adjusted population for %s is negative (%g); clamped to 0", area, v)
            v = 0.0
        out[area] = v
    return out


def emigrants_per_state(net_international: Mapping[str, float], immigrants: Mapping[str, float]) -> dict:
    out = {}
    for s in sorted(set(net_international) | set(immigrants)):
        e = immigrants.get(s, 0.0) - net_international.get(s, 0.0)
        if e < 0:
            log.warning("state %s: net international migration exceeds immigrants; emigrants clamped to 0", s)
            e = 0.0
        out[s] = e
    return out


def add_exits_to_diagonal(
    cs: ConstraintSet, deaths: Mapping[str, float], emigrants: Mapping[str, float]
) -> ConstraintSet:
    """Count deaths and emigrants as non-movers of their state."""
    stayers = dict(cs.state_stayers)
    flows = dict(cs.state_flows)
    for k in sorted(set(deaths) | set(emigrants)):
        extra = deaths.get(k, 0.0) + emigrants.get(k, 0.0)
        if extra == 0:
            continue
        stayers[k] = stayers.get(k, 0.0) + extra
        flows[(k, k)] = flows.get((k, k), 0.0) + extra
    return replace(cs, state_stayers=stayers, state_flows=flows)


def prepare_constraints(
    cs: ConstraintSet, county_components: ComponentsOfChange, state_components: ComponentsOfChange
) -> ConstraintSet:
    """Full adjustment of a raw constraint set for the matrix of ``cs.year``."""
    if cs.adjusted:
        raise AlreadyAdjusted(f"constraints for {cs.year} are already adjusted")
    curr = adjust_population_targets(cs.county_pops_curr, county_components, cs.year)
    state_pops = adjust_population_targets(cs.state_pops, state_components, cs.year)
    emig = emigrants_per_state(state_components.net_international, state_components.immigrants)
    out = replace(cs, county_pops_curr=curr, state_pops=state_pops)
    out = add_exits_to_diagonal(out, state_components.deaths, emig)
    return replace(out, adjusted=True)


def coefficient_of_variation(estimate: float, moe: float) -> float:
    """Standard error (90% MOE / 1.645) relative to the estimate."""
    if moe < 0:
        raise InputError("margin of error must be non-negative")
    if estimate <= 0:
        raise ZeroEstimate("coefficient of variation needs a positive estimate")
    return (moe / Z90) / estimate


def mean_cv(pairs) -> float:
    """Mean CV over the non-zero estimates of a table of (estimate, moe)."""
    cvs = [coefficient_of_variation(e, m) for e, m in pairs if e > 0]
    return float(np.mean(cvs)) if cvs else float("nan")


def observation_vector(obs) -> np.ndarray:
    """Order ``(window, value, moe)`` observations as the NNLS right-hand side.

    Missing windows are NaN; the solver drops those rows.
    """
    b = np.full(len(WINDOWS), np.nan)
    pos = {w: k for k, w in enumerate(WINDOWS)}
    for window, value, _moe in obs:
        if window not in pos:
            raise InputError(f"unknown population window {window!r}; expected one of {WINDOWS}")
        b[pos[window]] = float(value)
    return b


# ---- file IO ---------------------------------------------------------------

def _rows(path):
    with open(path, newline="") as fh:
        yield from csv.DictReader(fh)


def read_cbg_pops(path) -> dict:
    """``cbg_id,window,value,moe`` -> {cbg: [(window, value, moe), ...]}"""
    out: dict = {}
    for row in _rows(path):
        moe = row.get("moe") or "0"
        out.setdefault(row["cbg_id"], []).append((row["window"], float(row["value"]), float(moe)))
    return out


def read_state_flows(path, year: int) -> dict:
    """``year,origin_state,dest_state,value``"""
    return {
        (row["origin_state"], row["dest_state"]): float(row["value"])
        for row in _rows(path)
        if int(row["year"]) == year
    }


def read_state_pops(path, year: int) -> tuple[dict, dict]:
    """``year,state_id,population,nonmovers`` -> (populations, non-movers)"""
    pops, stay = {}, {}
    for row in _rows(path):
        if int(row["year"]) == year:
            pops[row["state_id"]] = float(row["population"])
            stay[row["state_id"]] = float(row["nonmovers"])
    return pops, stay


def read_county_pops(path, year: int) -> dict:
    """``year,county_id,population``"""
    return {row["county_id"]: float(row["population"]) for row in _rows(path) if int(row["year"]) == year}


def read_components(path, year: int, level: str) -> ComponentsOfChange:
    """``year,level,area_id,births,deaths,net_international,immigrants``"""
    b, d, n, im = {}, {}, {}, {}
    for row in _rows(path):
        if int(row["year"]) != year or row["level"] != level:
            continue
        a = row["area_id"]
        b[a] = float(row["births"])
        d[a] = float(row["deaths"])
        n[a] = float(row["net_international"])
        im[a] = float(row.get("immigrants") or 0.0)
    return ComponentsOfChange(year, b, d, n, im)


def load_constraints(paths: Mapping[str, str], year: int, h: GeoHierarchy) -> ConstraintSet:
    """Assemble the raw constraint set for the matrix of ``year`` from CSV files.

    ``paths`` keys: ``state_flows``, ``state_pops``, ``county_pops``,
    ``cbg_pops`` (all optional). Components are applied separately.
    """
    kw: dict = {}
    if paths.get("state_flows"):
        kw["state_flows"] = read_state_flows(paths["state_flows"], year)
    if paths.get("state_pops"):
        kw["state_pops"], kw["state_stayers"] = read_state_pops(paths["state_pops"], year)
    if paths.get("county_pops"):
        kw["county_pops_prev"] = read_county_pops(paths["county_pops"], year - 1)
        kw["county_pops_curr"] = read_county_pops(paths["county_pops"], year)
    if paths.get("cbg_pops"):
        obs = read_cbg_pops(paths["cbg_pops"])
        unknown = sorted(c for c in obs if c not in h)
        if unknown:
            raise UnknownArea(f"cbg_pops: unknown CBGs {unknown[:5]}")
        kw["cbg_population_obs"] = obs
    cs = ConstraintSet(year, **kw)
    cs.check_hierarchy(h)
    return cs
