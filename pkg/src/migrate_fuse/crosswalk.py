"""Address -> CBG probability crosswalk and the stayer-preserving transform."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InputError, UnknownArea
from .flows import FlowMatrix
from .geo import GeoHierarchy
from .records import AddressMatrix

log = logging.getLogger(__name__)

ROW_TOL = 1e-9


@dataclass(frozen=True)
class ZipAssignment:
    address_id: str
    zip: str
    tract_weights: Mapping[str, float]

    def __post_init__(self):
        w = list(self.tract_weights.values())
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise InputError(f"address {self.address_id}: tract weights must be >= 0 with one positive")


class CrosswalkMatrix:
    """Row-stochastic sparse map from addresses to CBGs.

    Addresses that could not be mapped have an all-zero row and are listed
    in ``unmapped``.
    """

    def __init__(self, address_ids: Sequence[str], n_cbg: int, csr, *, validate: bool = True):
        self.address_ids = tuple(address_ids)
        self.csr = sp.csr_array(csr, dtype=np.float64)
        self.csr.sort_indices()
        if self.csr.shape != (len(self.address_ids), n_cbg):
            raise DimensionMismatch(f"crosswalk shape {self.csr.shape} vs ({len(self.address_ids)}, {n_cbg})")
        self.n_cbg = n_cbg
        sums = self.row_sums()
        self.unmapped = tuple(a for a, s in zip(self.address_ids, sums) if s == 0)
        if validate:
            self.check()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def check(self) -> None:
        d = self.csr.data
        if np.any(d <= 0) or np.any(d > 1 + ROW_TOL):
            raise InputError("crosswalk probabilities must lie in (0, 1]")
        sums = self.row_sums()
        bad = np.flatnonzero((sums != 0) & (np.abs(sums - 1.0) > ROW_TOL))
        if bad.size:
            raise InputError(f"crosswalk row for address {self.address_ids[bad[0]]} sums to {sums[bad[0]]!r}")

    def is_row_stochastic(self) -> bool:
        try:
            self.check()
        except InputError:
            return False
        return not self.unmapped


def build_crosswalk(
    exact: Mapping[str, str],
    fuzzy: Sequence[ZipAssignment],
    cbg_populations: Mapping[str, float],
    h: GeoHierarchy,
    address_ids: Sequence[str] | None = None,
) -> CrosswalkMatrix:
    """Exact geocodes become point masses; ZIP-only addresses are spread
    over tracts by their crosswalk weight, then over each tract's CBGs by
    population share.

    A tract whose CBGs all have zero population loses its weight to the
    other candidate tracts; if every candidate CBG has zero population the
    address is split uniformly over all candidate CBGs.
    """
    tract_members: dict = defaultdict(list)
    for c in h.cbg_ids:
        tract_members[h.cbg_to_tract[c]].append(h.index(c))
    pops = np.array([float(cbg_populations.get(c, 0.0)) for c in h.cbg_ids])
    if np.any(pops < 0):
        raise InputError("CBG populations must be non-negative")

    rows_by_addr: dict = {}
    for addr, cbg in exact.items():
        if cbg not in h:
            raise UnknownArea(f"address {addr} geocoded to unknown CBG {cbg}")
        rows_by_addr[addr] = {h.index(cbg): 1.0}
    for z in fuzzy:
        if z.address_id in rows_by_addr:
            continue  # exact geocodes take precedence
        tw = {t: float(w) for t, w in z.tract_weights.items() if w > 0}
        for t in tw:
            if t not in tract_members:
                raise UnknownArea(f"address {z.address_id}: unknown tract {t}")
        candidates = sorted({i for t in tw for i in tract_members[t]})
        if pops[candidates].sum() == 0:
            row = {i: 1.0 / len(candidates) for i in candidates}
        else:
            live = {t: w for t, w in tw.items() if pops[tract_members[t]].sum() > 0}
            wsum = sum(live[t] for t in sorted(live))
            row = {}
            for t in sorted(live):
                members = tract_members[t]
                tp = pops[members].sum()
                for i in members:
                    if pops[i] > 0:
                        row[i] = row.get(i, 0.0) + (live[t] / wsum) * (pops[i] / tp)
        s = sum(row[i] for i in sorted(row))
        rows_by_addr[z.address_id] = {i: v / s for i, v in row.items()}

    if address_ids is None:
        address_ids = sorted(rows_by_addr)
    address_ids = tuple(address_ids)
    r, c, v = [], [], []
    missing = 0
    for k, a in enumerate(address_ids):
        row = rows_by_addr.get(a)
        if row is None:
            missing += 1
            continue
        for i in sorted(row):
            r.append(k)
            c.append(i)
            v.append(row[i])
    if missing:
        log.warning("%d of %d addresses have no CBG assignment and are dropped", missing, len(address_ids))
    csr = sp.csr_array((v, (r, c)), shape=(len(address_ids), h.n))
    return CrosswalkMatrix(address_ids, h.n, csr)


def _aligned(a: AddressMatrix, g: CrosswalkMatrix) -> sp.csr_array:
    if tuple(g.address_ids) == tuple(a.ids):
        return g.csr
    pos = {x: i for i, x in enumerate(g.address_ids)}
    take = np.array([pos.get(x, -1) for x in a.ids], dtype=np.int64)
    lost = int(np.sum(take < 0))
    if lost:
        log.warning("%d addresses in the flow matrix are absent from the crosswalk", lost)
    sel = sp.csr_array((np.ones(int(np.sum(take >= 0))), (np.flatnonzero(take >= 0), take[take >= 0])),
                       shape=(len(a.ids), len(g.address_ids)))
    return (sel @ g.csr).tocsr()


def apply_crosswalk(a: AddressMatrix, g: CrosswalkMatrix, year: int | None = None) -> FlowMatrix:
    """CBG flows from address flows.

    Movers go through ``G.T @ offdiag(A) @ G``; stayers are kept on the
    diagonal via ``diag(G.T @ diag(A))`` so a stayer at a spread address
    never becomes a mover between the candidate CBGs.
    """
    G = _aligned(a, g)
    A = a.matrix.csr
    if A.shape[0] != G.shape[0]:
        raise DimensionMismatch(f"address matrix {A.shape} vs crosswalk {G.shape}")
    d = A.diagonal()
    off = (A - sp.dia_array((d[np.newaxis, :], [0]), shape=A.shape)).tocsr()
    off.eliminate_zeros()
    movers = (G.T @ off @ G).tocsr()
    stay = G.T @ d
    E = movers + sp.dia_array((stay[np.newaxis, :], [0]), shape=movers.shape)
    return FlowMatrix(sp.csr_array(E), a.matrix.year if year is None else year)


def read_exact(path) -> dict:
    with open(path, newline="") as fh:
        return {row["address_id"]: row["cbg_id"] for row in csv.DictReader(fh)}


def read_fuzzy(path) -> list[ZipAssignment]:
    grouped: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["address_id"], row["zip"])
            tw = grouped.setdefault(key, {})
            tw[row["tract_id"]] = tw.get(row["tract_id"], 0.0) + float(row["weight"])
    return [ZipAssignment(a, z, tw) for (a, z), tw in sorted(grouped.items())]
