"""Address histories -> annual address-to-address flow matrices.

Each person's dated address list is cleaned into a monthly probability
distribution over addresses; each year is then "surveyed" month by month
with the question of where the person lived twelve months earlier.

Months are handled as integers ``year * 12 + (month - 1)``.
"""
from __future__ import annotations

import calendar
import csv
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyAfterCleaning, InputError, MissingMonth, NoDates
from .flows import FlowMatrix

log = logging.getLogger(__name__)

KINDS = ("street", "pobox", "rural_route", "incomplete")
POBOX_WINDOW = 12  # months, inclusive
PERMANENCE_TOL = 1e-12


def parse_month(text: str | None) -> int | None:
    if text is None or text == "":
        return None
    try:
        y, m = text.strip().split("-")
        y, m = int(y), int(m)
    except ValueError:
        raise InputError(f"bad year-month {text!r}; expected YYYY-MM") from None
    if not 1 <= m <= 12:
        raise InputError(f"bad month in {text!r}")
    return y * 12 + m - 1


def format_month(ym: int) -> str:
    return f"{ym // 12:04d}-{ym % 12 + 1:02d}"


def month(year: int, mon: int) -> int:
    return year * 12 + mon - 1


def days_in_month(ym: int) -> int:
    return calendar.monthrange(ym // 12, ym % 12 + 1)[1]


def days_in_year(year: int) -> int:
    return 366 if calendar.isleap(year) else 365


@dataclass(frozen=True)
class Address:
    address_id: str
    kind: str = "street"
    effective: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown address kind {self.kind!r}")


@dataclass(frozen=True)
class PersonRecord:
    person_id: str
    addresses: tuple
    first_seen: int | None = None
    last_seen: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "addresses", tuple(self.addresses))
        if self.first_seen is not None and self.last_seen is not None and self.first_seen > self.last_seen:
            raise InputError(f"person {self.person_id}: first_seen after last_seen")


@dataclass(frozen=True)
class MonthlyResidence:
    person_id: str
    month: int
    distribution: dict = field(hash=False)


@dataclass(frozen=True)
class AddressFlowTuple:
    origin: str
    dest: str
    weight: float


def activity_interval(r: PersonRecord) -> tuple[int, int]:
    """Observed span padded by twelve months on each side."""
    dated = [a.effective for a in r.addresses if a.effective is not None]
    starts = [min(dated)] if dated else []
    ends = [max(dated)] if dated else []
    if r.first_seen is not None:
        starts.append(r.first_seen)
    if r.last_seen is not None:
        ends.append(r.last_seen)
    if not starts or not ends:
        raise NoDates(f"person {r.person_id} has no usable dates")
    return min(starts) - 12, max(ends) + 12


def _surviving_addresses(r: PersonRecord, first: int) -> list[Address]:
    addrs = list(r.addresses)
    if len(addrs) == 1 and addrs[0].effective is None:
        addrs = [Address(addrs[0].address_id, addrs[0].kind, first)]
    addrs = [a for a in addrs if a.effective is not None]
    anchors = [a.effective for a in addrs if a.kind != "pobox"]
    return [
        a
        for a in addrs
        if a.kind != "pobox" or not any(abs(a.effective - d) <= POBOX_WINDOW for d in anchors)
    ]


def clean_addresses(r: PersonRecord) -> list[MonthlyResidence]:
    """Monthly address distributions covering the whole activity interval."""
    start, end = activity_interval(r)
    addrs = _surviving_addresses(r, start + 12)
    if not addrs:
        raise EmptyAfterCleaning(f"person {r.person_id} has no address left after cleaning")
    groups: dict = defaultdict(list)
    for a in addrs:
        if a.address_id not in groups[a.effective]:
            groups[a.effective].append(a.address_id)
    dates = sorted(groups)
    dists = []
    for d in dates:
        ids = sorted(groups[d])
        dists.append({a: 1.0 / len(ids) for a in ids})
    out = []
    g = 0
    for m in range(start, end + 1):
        while g + 1 < len(dates) and dates[g + 1] <= m:
            g += 1
        out.append(MonthlyResidence(r.person_id, m, dists[g]))
    return out


def _same_distribution(p: dict, q: dict) -> bool:
    return p.keys() == q.keys() and all(abs(p[k] - q[k]) <= PERMANENCE_TOL for k in p)


def simulate_acs_year(residences: Sequence[MonthlyResidence], year: int) -> list[AddressFlowTuple]:
    """Expected answers to "where did you live a year ago?" asked through ``year``.

    A month contributes only when the person has a distribution both in that
    month and twelve months before; each month is weighted by its share of
    the year's days.
    """
    by_month = {res.month: res.distribution for res in residences}
    if by_month:
        lo, hi = min(by_month), max(by_month)
        if len(by_month) != hi - lo + 1:
            missing = next(m for m in range(lo, hi + 1) if m not in by_month)
            raise MissingMonth(f"no residence distribution for {format_month(missing)}")
    ndays = days_in_year(year)
    acc: dict = defaultdict(float)
    for m in range(month(year, 1), month(year, 12) + 1):
        cur = by_month.get(m)
        prev = by_month.get(m - 12)
        if cur is None or prev is None:
            continue
        w = days_in_month(m) / ndays
        if _same_distribution(cur, prev):
            for a in sorted(cur):
                acc[(a, a)] += w * cur[a]
        else:
            for a1 in sorted(prev):
                for a2 in sorted(cur):
                    acc[(a1, a2)] += w * prev[a1] * cur[a2]
    return [AddressFlowTuple(o, d, v) for (o, d), v in sorted(acc.items()) if v > 0]


def person_year_flows(r: PersonRecord, year: int) -> list[AddressFlowTuple]:
    return simulate_acs_year(clean_addresses(r), year)


@dataclass(frozen=True, eq=False)
class AddressMatrix:
    """Address-by-address flow matrix with its (sorted) address index."""

    ids: tuple
    matrix: FlowMatrix

    @property
    def year(self):
        return self.matrix.year


def aggregate_address_flows(
    tuples: Iterable[AddressFlowTuple], ids: Sequence[str] | None = None, year: int | None = None
) -> AddressMatrix:
    """Sum expected flows over persons into a sparse address matrix."""
    tuples = list(tuples)
    if ids is None:
        ids = sorted({t.origin for t in tuples} | {t.dest for t in tuples})
    ids = tuple(ids)
    index = {a: i for i, a in enumerate(ids)}
    rows = np.fromiter((index[t.origin] for t in tuples), dtype=np.int64, count=len(tuples))
    cols = np.fromiter((index[t.dest] for t in tuples), dtype=np.int64, count=len(tuples))
    vals = np.fromiter((t.weight for t in tuples), dtype=np.float64, count=len(tuples))
    return AddressMatrix(ids, FlowMatrix.from_triplets(len(ids), rows, cols, vals, year))


def _person_years(args):
    r, years = args
    res = clean_addresses(r)
    return [simulate_acs_year(res, y) for y in years]


def process_records(records: Iterable[PersonRecord], years: Sequence[int], workers: int = 1) -> dict:
    """Run cleaning and the survey simulation for every person and year.

    Persons are processed in ``person_id`` order and merged in that order, so
    the output does not depend on input order or on ``workers``. Records that
    cannot be cleaned are skipped and counted in the log.
    """
    records = sorted(records, key=lambda r: r.person_id)
    years = list(years)
    usable, skipped = [], 0
    for r in records:
        try:
            if not _surviving_addresses(r, activity_interval(r)[0] + 12):
                raise EmptyAfterCleaning(r.person_id)
        except (NoDates, EmptyAfterCleaning):
            skipped += 1
            continue
        usable.append(r)
    if skipped:
        log.warning("skipped %d records with no usable dates or addresses", skipped)
    jobs = [(r, years) for r in usable]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_person_years, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_person_years(j) for j in jobs]
    ids = sorted({a.address_id for r in usable for a in r.addresses})
    out = {}
    for k, y in enumerate(years):
        out[y] = aggregate_address_flows((t for per in results for t in per[k]), ids, y)
    return out


def read_records(path) -> list[PersonRecord]:
    rows: dict = defaultdict(list)
    meta: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["person_id"]
            rows[pid].append(
                Address(row["address_id"], row.get("kind") or "street", parse_month(row.get("effective_date")))
            )
            meta.setdefault(pid, (parse_month(row.get("first_seen")), parse_month(row.get("last_seen"))))
    return [PersonRecord(pid, tuple(addrs), *meta[pid]) for pid, addrs in rows.items()]


def write_records(records: Iterable[PersonRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["person_id", "address_id", "kind", "effective_date", "first_seen", "last_seen"])
        for r in records:
            fs = "" if r.first_seen is None else format_month(r.first_seen)
            ls = "" if r.last_seen is None else format_month(r.last_seen)
            for a in r.addresses:
                eff = "" if a.effective is None else format_month(a.effective)
                w.writerow([r.person_id, a.address_id, a.kind, eff, fs, ls])
