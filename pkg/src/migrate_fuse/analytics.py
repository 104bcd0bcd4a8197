"""National and regional statistics computed from harmonized matrices.

"Movers" throughout are off-diagonal mass: moves inside one CBG are not
visible in a CBG-by-CBG matrix.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyRegion, InputError, ZeroBaseShare
from .flows import BlockPartition, FlowMatrix, group_sum
from .geo import GeoHierarchy
from .synthgen import haversine_miles

RACES = ("white", "black", "asian", "hispanic")
CATEGORY_LABELS = tuple(f"race_{r}" for r in RACES) + ("urban", "rural") + tuple(f"income_q{q}" for q in range(1, 5))
TABLE_ROWS = CATEGORY_LABELS + ("all_movers", "population_share")


def income_buckets(income: np.ndarray, k: int) -> np.ndarray:
    """Equal-count buckets 1..k over CBGs (unweighted); NaN income -> 0.

    Ties are broken by CBG index so the assignment is deterministic.
    """
    income = np.asarray(income, dtype=float)
    out = np.zeros(income.size, dtype=np.int64)
    ok = np.flatnonzero(~np.isnan(income))
    if ok.size:
        order = ok[np.lexsort((ok, income[ok]))]
        out[order] = 1 + (np.arange(ok.size) * k) // ok.size
    return out


@dataclass(frozen=True, eq=False)
class CbgCategory:
    plurality_race: np.ndarray  # str per CBG
    urban: np.ndarray  # bool per CBG
    median_income: np.ndarray  # float per CBG, NaN when unknown
    income_quartile: np.ndarray
    income_decile: np.ndarray

    @classmethod
    def build(cls, plurality_race: Sequence[str], urban, median_income) -> "CbgCategory":
        race = np.asarray([str(r).lower() for r in plurality_race], dtype=object)
        bad = set(race) - set(RACES) - {"other"}
        if bad:
            raise InputError(f"unknown plurality race labels {sorted(bad)}")
        income = np.asarray(median_income, dtype=float)
        return cls(race, np.asarray(urban, dtype=bool), income, income_buckets(income, 4), income_buckets(income, 10))

    def membership(self) -> np.ndarray:
        """(n, 10) indicator matrix over ``CATEGORY_LABELS``; categories overlap."""
        cols = [self.plurality_race == r for r in RACES]
        cols += [self.urban, ~self.urban]
        cols += [self.income_quartile == q for q in range(1, 5)]
        return np.column_stack(cols).astype(np.float64)


def read_categories(path, h: GeoHierarchy) -> CbgCategory:
    """CSV ``cbg_id,plurality_race,urban,median_income``; absent CBGs get 'other', rural, NaN."""
    race = ["other"] * h.n
    urban = [False] * h.n
    income = [np.nan] * h.n
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["cbg_id"] not in h:
                continue
            i = h.index(row["cbg_id"])
            race[i] = row["plurality_race"] or "other"
            urban[i] = str(row["urban"]).strip().lower() in ("1", "true", "yes", "urban")
            income[i] = float(row["median_income"]) if row.get("median_income") else np.nan
    return CbgCategory.build(race, urban, income)


def _movers(e: FlowMatrix, exclude_within: BlockPartition | None = None) -> sp.csr_array:
    keep = ~e.diag_mask()
    if exclude_within is not None:
        a = exclude_within.assignment
        keep &= a[e.rows] != a[e.cols]
    return sp.csr_array((e.data[keep], (e.rows[keep], e.cols[keep])), shape=(e.n, e.n))


@dataclass
class ShareTable:
    rows: tuple
    cols: tuple
    values: np.ndarray

    def row(self, label) -> np.ndarray:
        return self.values[self.rows.index(label)]

    def cell(self, row, col) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])


def category_flow_table(
    e: FlowMatrix, cats: CbgCategory, exclude_within: BlockPartition | None = None
) -> ShareTable:
    """Share of each origin category's movers that land in each destination category.

    Extra rows: all movers, and each category's share of the year-t population.
    ``exclude_within`` drops moves inside one block (e.g. same county).
    """
    C = cats.membership()
    M = _movers(e, exclude_within)
    flows = C.T @ (M @ C)  # origin cat x dest cat
    out_mass = C.T @ (M @ np.ones(e.n))
    with np.errstate(invalid="ignore", divide="ignore"):
        shares = flows / out_mass[:, None]
    col_total = M.sum(axis=0)
    all_row = (C.T @ col_total) / col_total.sum() if col_total.sum() > 0 else np.full(C.shape[1], np.nan)
    pop = e.col_sums()
    pop_row = (C.T @ pop) / pop.sum()
    return ShareTable(TABLE_ROWS, CATEGORY_LABELS, np.vstack([shares, all_row, pop_row]))


def homophily_ratios(table: ShareTable) -> ShareTable:
    """Category rows (and the all-movers row) divided by the all-movers row."""
    base = table.row("all_movers")
    if np.any(~(base > 0)):
        bad = [table.cols[k] for k in np.flatnonzero(~(base > 0))]
        raise ZeroBaseShare(f"all-movers share is zero for {bad}")
    rows = table.rows[:-1]
    return ShareTable(rows, table.cols, table.values[: len(rows)] / base)


def upward_mobility(
    e: FlowMatrix,
    cats: CbgCategory,
    origin_filter: str = "all",
    bucket: str = "decile",
    target: str = "higher_income",
    denominator: str = "group",
) -> np.ndarray:
    """Probability that a mover from each origin income bucket reaches a
    qualifying destination; NaN for buckets without movers.

    ``origin_filter`` is ``"all"`` or a plurality-race label; the bucket is
    the origin's income decile (10 values) or percentile (100 values).
    ``denominator="group"`` divides by the filtered group's movers in the
    bucket, ``"bucket"`` by all movers in the bucket.
    """
    if denominator not in ("group", "bucket"):
        raise InputError(f"unknown denominator {denominator!r}")
    if bucket == "decile":
        b, k = cats.income_decile, 10
    elif bucket == "percentile":
        b, k = income_buckets(cats.median_income, 100), 100
    else:
        raise InputError(f"unknown bucket {bucket!r}")
    M = _movers(e).tocoo()
    i, j, v = M.row.astype(np.int64), M.col.astype(np.int64), M.data
    inc = cats.median_income
    ok = ~(np.isnan(inc[i]) | np.isnan(inc[j]))
    i, j, v = i[ok], j[ok], v[ok]
    den = group_sum(b[i] - 1, v, k)
    if origin_filter != "all":
        if origin_filter not in RACES and origin_filter != "other":
            raise InputError(f"unknown origin filter {origin_filter!r}")
        sel = cats.plurality_race[i] == origin_filter
        i, j, v = i[sel], j[sel], v[sel]
        if denominator == "group":
            den = group_sum(b[i] - 1, v, k)
    if target == "higher_income":
        hit = inc[j] > inc[i]
    elif target == "top_quartile":
        hit = cats.income_quartile[j] == 4
    elif target == "bottom_quartile":
        hit = cats.income_quartile[j] == 1
    else:
        raise InputError(f"unknown target {target!r}")
    keys = b[i] - 1
    num = group_sum(keys[hit], v[hit], k)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def _bucket_shares(dist: np.ndarray, mass: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    idx = np.searchsorted(np.asarray(edges, float), dist, side="right")
    tot = group_sum(idx, mass, len(edges) + 1)
    s = tot.sum()
    return tot / s if s > 0 else np.full(len(edges) + 1, np.nan)


def distance_distribution(
    e: FlowMatrix,
    h: GeoHierarchy,
    edges: Sequence[float] = (5.0, 50.0),
    stratify: str | None = None,
    cats: CbgCategory | None = None,
) -> dict:
    """Shares of mover mass by move distance (miles between centroids).

    ``stratify=None`` gives ``{"all": shares}``; ``"category"`` adds one
    entry per origin category; ``"boundary"`` returns shares of movers
    staying in the same tract, same county, same state, or leaving the state.
    """
    M = _movers(e).tocoo()
    i, j, v = M.row.astype(np.int64), M.col.astype(np.int64), M.data
    if stratify == "boundary":
        tr, co, st = (h.partition(lv).assignment for lv in ("tract", "county", "state"))
        cls = np.where(tr[i] == tr[j], 0, np.where(co[i] == co[j], 1, np.where(st[i] == st[j], 2, 3)))
        tot = group_sum(cls, v, 4)
        s = tot.sum()
        shares = tot / s if s > 0 else np.full(4, np.nan)
        return dict(zip(("same_tract", "same_county", "same_state", "other_state"), shares.tolist()))
    xy = h.centroid_array()
    d = haversine_miles(xy[i, 0], xy[i, 1], xy[j, 0], xy[j, 1])
    out = {"all": _bucket_shares(d, v, edges)}
    if stratify == "category":
        if cats is None:
            raise InputError("category stratification needs CBG categories")
        C = cats.membership()
        for k, lab in enumerate(CATEGORY_LABELS):
            sel = C[i, k] > 0
            out[lab] = _bucket_shares(d[sel], v[sel], edges)
    elif stratify is not None:
        raise InputError(f"unknown stratification {stratify!r}")
    return out


def bucket_labels(edges: Sequence[float]) -> list[str]:
    e = list(edges)
    return [f"<{e[0]:g}"] + [f"{a:g}-{b:g}" for a, b in zip(e[:-1], e[1:])] + [f">={e[-1]:g}"]


def region_out_migration_series(
    matrices: Mapping[int, FlowMatrix], regions: Mapping[str, Sequence[int]]
) -> dict:
    """{region: {year: off-diagonal row mass / total row mass}} over the region's CBGs."""
    out: dict = {}
    for name, members in regions.items():
        idx = np.asarray(sorted(set(int(x) for x in members)), dtype=np.int64)
        if idx.size == 0:
            raise EmptyRegion(f"region {name!r} has no CBGs")
        series = {}
        for year in sorted(matrices):
            m = matrices[year]
            inreg = np.zeros(m.n, dtype=bool)
            inreg[idx] = True
            sel = inreg[m.rows]
            total = float(np.sum(m.data[sel], dtype=np.longdouble))
            moved = float(np.sum(m.data[sel & ~m.diag_mask()], dtype=np.longdouble))
            series[year] = moved / total if total > 0 else float("nan")
        out[name] = series
    return out


def redact_low_diversity(e: FlowMatrix, k: int = 10, q: float = 0.90) -> tuple[FlowMatrix, list[int]]:
    """Zero the off-diagonal row of every CBG whose out-movers concentrate:
    if the top ``k`` destinations (by mass) already hold a ``q`` share of
    its out-movers, the row is removed. Diagonals are kept."""
    if k < 1 or not 0 < q <= 1:
        raise InputError("need k >= 1 and 0 < q <= 1")
    diag = e.diag_mask()
    redacted = []
    drop = np.zeros(e.nnz, dtype=bool)
    indptr = e.csr.indptr
    for r in range(e.n):
        lo, hi = indptr[r], indptr[r + 1]
        vals = e.data[lo:hi][~diag[lo:hi]]
        if vals.size == 0:
            continue
        srt = np.sort(vals)[::-1]
        cum = np.cumsum(srt)
        need = int(np.searchsorted(cum, q * cum[-1] * (1 - 1e-12), side="left")) + 1
        if need <= k:
            redacted.append(r)
            drop[lo:hi] = ~diag[lo:hi]
    if not redacted:
        return e, []
    keep = ~drop
    csr = sp.csr_array((e.data[keep], (e.rows[keep], e.cols[keep])), shape=(e.n, e.n))
    return FlowMatrix(csr, e.year), redacted


def write_long(rows, path) -> None:
    """Long-format CSV ``statistic,stratum,bucket,year,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "stratum", "bucket", "year", "value"])
        for stat, stratum, bucket, year, value in rows:
            w.writerow([stat, stratum, bucket, "" if year is None else year, "%.17g" % value])
