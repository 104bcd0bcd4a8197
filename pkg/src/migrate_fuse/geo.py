"""Geographic universe: CBG -> tract -> county -> state containment."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DuplicateId, InconsistentContainment, InputError, MissingCentroids, UnknownMember

LEVELS = ("cbg", "tract", "county", "state")


@dataclass(frozen=True)
class GeographyChange:
    year: int
    kind: str  # "merge" | "split"
    members: frozenset
    survivor: str

    def __post_init__(self):
        if self.kind not in ("merge", "split"):
            raise InputError(f"unknown change kind {self.kind!r}")
        if not self.members:
            raise InputError("geography change with no members")


@dataclass(frozen=True, eq=False)
class GeoHierarchy:
    """Immutable containment map; ``cbg_ids`` fixes the matrix index order."""

    cbg_ids: tuple
    cbg_to_tract: Mapping[str, str]
    tract_to_county: Mapping[str, str]
    county_to_state: Mapping[str, str]
    centroids: Mapping[str, tuple] | None = None
    _index: dict = field(init=False, repr=False, compare=False)
    _partitions: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.cbg_ids)})
        object.__setattr__(self, "_partitions", {})

    @property
    def n(self) -> int:
        return len(self.cbg_ids)

    def index(self, cbg_id: str) -> int:
        return self._index[cbg_id]

    def __contains__(self, cbg_id) -> bool:
        return cbg_id in self._index

    def parent_of(self, cbg_id: str, level: str) -> str:
        if level == "cbg":
            return cbg_id
        tract = self.cbg_to_tract[cbg_id]
        if level == "tract":
            return tract
        county = self.tract_to_county[tract]
        if level == "county":
            return county
        if level == "state":
            return self.county_to_state[county]
        raise InputError(f"unknown level {level!r}")

    def areas(self, level: str) -> list:
        return list(self.partition(level).labels)

    def partition(self, level: str):
        """Block partition of the CBG index at ``level`` (cached)."""
        from .flows import BlockPartition

        part = self._partitions.get(level)
        if part is None:
            parents = [self.parent_of(c, level) for c in self.cbg_ids]
            labels = tuple(sorted(set(parents)))
            pos = {lab: k for k, lab in enumerate(labels)}
            assignment = np.fromiter((pos[p] for p in parents), dtype=np.int64, count=len(parents))
            part = BlockPartition(level, labels, assignment)
            self._partitions[level] = part
        return part

    def centroid_array(self) -> np.ndarray:
        """(n, 2) array of (lat, lon) in degrees; raises if any centroid is missing."""
        if not self.centroids or any(self.centroids.get(c) is None for c in self.cbg_ids):
            raise MissingCentroids("hierarchy lacks centroids for some CBGs")
        return np.array([self.centroids[c] for c in self.cbg_ids], dtype=float)

    def has_centroids(self) -> bool:
        return bool(self.centroids) and all(self.centroids.get(c) is not None for c in self.cbg_ids)


def build_hierarchy(records: Iterable[Sequence]) -> GeoHierarchy:
    """Build a hierarchy from ``(cbg, tract, county, state[, (lat, lon)])`` records."""
    cbg_to_tract: dict = {}
    tract_to_county: dict = {}
    county_to_state: dict = {}
    centroids: dict = {}
    for rec in records:
        cbg, tract, county, state = (str(x) for x in rec[:4])
        centroid = rec[4] if len(rec) > 4 else None
        if cbg in cbg_to_tract:
            raise DuplicateId(f"duplicate cbg_id {cbg}")
        cbg_to_tract[cbg] = tract
        if tract_to_county.setdefault(tract, county) != county:
            raise InconsistentContainment(f"tract {tract} claimed by counties {tract_to_county[tract]} and {county}")
        if county_to_state.setdefault(county, state) != state:
            raise InconsistentContainment(f"county {county} claimed by states {county_to_state[county]} and {state}")
        centroids[cbg] = None if centroid is None else (float(centroid[0]), float(centroid[1]))
    if not cbg_to_tract:
        raise InputError("hierarchy needs at least one CBG")
    has_any = any(v is not None for v in centroids.values())
    return GeoHierarchy(
        tuple(sorted(cbg_to_tract)),
        cbg_to_tract,
        tract_to_county,
        county_to_state,
        centroids if has_any else None,
    )


def _level_of(h: GeoHierarchy, area: str) -> str | None:
    if area in h:
        return "cbg"
    if area in h.tract_to_county:
        return "tract"
    if area in h.county_to_state:
        return "county"
    if area in set(h.county_to_state.values()):
        return "state"
    return None


def change_map(h: GeoHierarchy, changes: Sequence[GeographyChange]) -> dict:
    """Map every CBG id of ``h`` to its CBG id after ``changes``."""
    mapping = {c: c for c in h.cbg_ids}
    current = h
    for ch in changes:
        new = apply_geography_changes(current, [ch])
        if _level_of(current, next(iter(ch.members))) == "cbg":
            for old, cur in mapping.items():
                if cur in ch.members:
                    mapping[old] = ch.survivor
        current = new
    return mapping


def apply_geography_changes(h: GeoHierarchy, changes: Sequence[GeographyChange]) -> GeoHierarchy:
    """Replace each change's member areas by its survivor (the coarser boundary).

    A change whose members are all gone and whose survivor already exists is
    treated as applied, which makes reapplication a no-op.
    """
    cbg_to_tract = dict(h.cbg_to_tract)
    tract_to_county = dict(h.tract_to_county)
    county_to_state = dict(h.county_to_state)
    centroids = dict(h.centroids) if h.centroids else None
    for ch in changes:
        cur = GeoHierarchy(tuple(sorted(cbg_to_tract)), cbg_to_tract, tract_to_county, county_to_state)
        levels = {_level_of(cur, m) for m in ch.members}
        if levels == {None}:
            if _level_of(cur, ch.survivor) is not None:
                continue
            raise UnknownMember(f"none of {sorted(ch.members)} exist")
        if None in levels or len(levels) != 1:
            missing = sorted(m for m in ch.members if _level_of(cur, m) is None)
            raise UnknownMember(f"unknown or mixed-level members {missing or sorted(ch.members)}")
        level = levels.pop()
        members = set(ch.members)
        if level == "cbg":
            parents = {cbg_to_tract[m] for m in members}
            if len(parents) != 1:
                raise InconsistentContainment(f"merged CBGs {sorted(members)} span tracts {sorted(parents)}")
            tract = parents.pop()
            if centroids is not None:
                pts = [centroids.get(m) for m in members]
                centroids = {k: v for k, v in centroids.items() if k not in members}
                if all(p is not None for p in pts):
                    centroids[ch.survivor] = (
                        math.fsum(p[0] for p in pts) / len(pts),
                        math.fsum(p[1] for p in pts) / len(pts),
                    )
                else:
                    centroids[ch.survivor] = None
            for m in members:
                del cbg_to_tract[m]
            cbg_to_tract[ch.survivor] = tract
        elif level == "tract":
            parents = {tract_to_county[m] for m in members}
            if len(parents) != 1:
                raise InconsistentContainment(f"tracts {sorted(members)} span counties {sorted(parents)}")
            county = parents.pop()
            for c, t in cbg_to_tract.items():
                if t in members:
                    cbg_to_tract[c] = ch.survivor
            for m in members:
                del tract_to_county[m]
            tract_to_county[ch.survivor] = county
        elif level == "county":
            parents = {county_to_state[m] for m in members}
            if len(parents) != 1:
                raise InconsistentContainment(f"counties {sorted(members)} span states {sorted(parents)}")
            state = parents.pop()
            for t, c in tract_to_county.items():
                if c in members:
                    tract_to_county[t] = ch.survivor
            for m in members:
                del county_to_state[m]
            county_to_state[ch.survivor] = state
        else:
            for c, s in county_to_state.items():
                if s in members:
                    county_to_state[c] = ch.survivor
    return GeoHierarchy(tuple(sorted(cbg_to_tract)), cbg_to_tract, tract_to_county, county_to_state, centroids)


def aggregate_values(values: Mapping[str, float], mapping: Mapping[str, str]) -> dict:
    """Sum a per-area table onto the post-change areas given by ``mapping``."""
    groups: dict = {}
    for area, v in values.items():
        groups.setdefault(mapping.get(area, area), []).append(v)
    return {k: math.fsum(v) for k, v in groups.items()}


def aggregate_moe(moes: Iterable[float]) -> float:
    """Combine margins of error of summed estimates (root sum of squares)."""
    vals = [float(m) for m in moes]
    if any(m < 0 for m in vals):
        raise InputError("margins of error must be non-negative")
    return math.sqrt(math.fsum(m * m for m in vals))


def read_hierarchy(path) -> GeoHierarchy:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lat, lon = row.get("lat", ""), row.get("lon", "")
            centroid = (float(lat), float(lon)) if lat not in ("", None) and lon not in ("", None) else None
            rows.append((row["cbg_id"], row["tract_id"], row["county_id"], row["state_id"], centroid))
    return build_hierarchy(rows)


def write_hierarchy(h: GeoHierarchy, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cbg_id", "tract_id", "county_id", "state_id", "lat", "lon"])
        for c in h.cbg_ids:
            t = h.cbg_to_tract[c]
            co = h.tract_to_county[t]
            cen = h.centroids.get(c) if h.centroids else None
            lat, lon = ("", "") if cen is None else ("%.17g" % cen[0], "%.17g" % cen[1])
            w.writerow([c, t, co, h.county_to_state[co], lat, lon])


def read_changes(path) -> list[GeographyChange]:
    grouped: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["year"]), row["kind"], row["survivor"])
            grouped.setdefault(key, set()).add(row["member"])
    return [GeographyChange(y, k, frozenset(m), s) for (y, k, s), m in sorted(grouped.items())]


def hierarchy_from_path(path: str | Path, changes_path: str | Path | None = None) -> GeoHierarchy:
    h = read_hierarchy(path)
    if changes_path:
        h = apply_geography_changes(h, read_changes(changes_path))
    return h
