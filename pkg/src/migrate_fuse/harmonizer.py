"""Fuse a raw flow matrix with Census marginals.

Stages run in a fixed order: CBG population rows (once), state non-movers
and movers (once), state-to-state blocks (once), then alternating county
row/column block fitting until convergence. The one-shot stages are not
iterated so the noisier targets do not dominate; county populations are
matched last and exactly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .constraints import PATH_YEARS, ConstraintSet, observation_vector
from .errors import InconsistentMarginals, InputError, NonFiniteInput
from .flows import (
    BlockPartition,
    FlowMatrix,
    Grouper,
    block_sum,
    group_sum,
    l1_distance,
    scale_entries_by_block,
    split_diag_offdiag,
)
from .geo import GeoHierarchy

log = logging.getLogger(__name__)


def _design() -> np.ndarray:
    A = np.zeros((11, 11))
    A[0, 1] = 1.0  # decennial count, 2010
    for k in range(1, 5):  # ACS windows ending 2010..2013 start before 2009
        A[k, : k + 1] = 1.0 / (k + 1)
    for k in range(5, 11):
        A[k, k - 4 : k + 1] = 1.0 / 5
    return A


# Rows: Census 2010, ACS 2006-10 ... ACS 2015-19. Columns: years 2009..2019.
DESIGN = _design()
_DESIGN_INV = np.linalg.inv(DESIGN)


# ---- non-negative least squares ------------------------------------------

def nnls(A: np.ndarray, b: np.ndarray, max_iter: int | None = None) -> tuple[np.ndarray, float]:
    """Lawson-Hanson active-set NNLS; ties broken by the lowest index.

    Returns ``(x, ||Ax - b||)``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    max_iter = 3 * n if max_iter is None else max_iter
    tol = 10 * np.finfo(float).eps * max(m, n) * np.linalg.norm(A, 1) * max(1.0, np.abs(b).max(initial=0.0))
    passive = np.zeros(n, dtype=bool)
    x = np.zeros(n)
    w = A.T @ (b - A @ x)
    outer = 0
    while (~passive).any() and w[~passive].max() > tol and outer < max_iter:
        outer += 1
        cand = np.where(~passive, w, -np.inf)
        passive[int(np.argmax(cand))] = True
        while True:
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(A[:, passive], b, rcond=None)[0]
            if np.all(z[passive] > 0):
                x = z
                break
            neg = passive & (z <= 0)
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = A.T @ (b - A @ x)
    return x, float(np.linalg.norm(A @ x - b))


@dataclass(frozen=True)
class PopulationPath:
    values: np.ndarray  # populations for PATH_YEARS
    residual: float

    def at(self, year: int) -> float:
        return float(self.values[PATH_YEARS.index(year)])


def solve_population_path(b) -> PopulationPath:
    """Non-negative yearly populations 2009-2019 for one CBG.

    ``b`` holds the eleven observations in design-row order; NaN marks a
    missing window and drops that row.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (11,):
        raise InputError("population observations must have 11 entries")
    if np.any(np.isinf(b)):
        raise NonFiniteInput("population observations must be finite")
    keep = ~np.isnan(b)
    if keep.all():
        x = _DESIGN_INV @ b
        if np.all(x >= 0):
            return PopulationPath(x, float(np.linalg.norm(DESIGN @ x - b)))
    x, res = nnls(DESIGN[keep], b[keep])
    return PopulationPath(x, res)


def kkt_violation(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    """(worst negative gradient on active coords, worst |gradient| on free coords / ||A^T b||)."""
    g = A.T @ (A @ x - b)
    active = x == 0
    neg = float(max(0.0, -g[active].min())) if active.any() else 0.0
    scale = max(np.linalg.norm(A.T @ b), np.finfo(float).tiny)
    free = float(np.abs(g[~active]).max() / scale) if (~active).any() else 0.0
    return neg, free


class PopulationPaths:
    """Per-CBG yearly populations, aligned to the hierarchy index."""

    def __init__(self, years: Sequence[int], values: np.ndarray, residuals: np.ndarray | None = None):
        self.years = tuple(years)
        self.values = np.asarray(values, dtype=float)
        self.residuals = np.zeros(self.values.shape[0]) if residuals is None else np.asarray(residuals)
        if self.values.shape[1] != len(self.years):
            raise InputError("path values do not match years")

    def targets(self, year: int) -> np.ndarray:
        if year not in self.years:
            raise InputError(f"no population path value for {year}")
        return self.values[:, self.years.index(year)]

    @classmethod
    def from_targets(cls, targets, year: int) -> "PopulationPaths":
        return cls((year,), np.asarray(targets, dtype=float)[:, None])

    @classmethod
    def solve(cls, obs_by_cbg: Mapping[str, list], h: GeoHierarchy) -> "PopulationPaths":
        """Solve every CBG's path; CBGs without observations get NaN (no scaling)."""
        values = np.full((h.n, len(PATH_YEARS)), np.nan)
        res = np.zeros(h.n)
        B = np.full((h.n, 11), np.nan)
        for cbg, obs in obs_by_cbg.items():
            B[h.index(cbg)] = observation_vector(obs)
        full = ~np.isnan(B).any(axis=1)
        if full.any():
            X = B[full] @ _DESIGN_INV.T
            values[full] = X
        for i in range(h.n):
            if np.isnan(B[i]).all():
                continue
            if full[i] and np.all(values[i] >= 0):
                res[i] = np.linalg.norm(DESIGN @ values[i] - B[i])
                continue
            p = solve_population_path(B[i])
            values[i], res[i] = p.values, p.residual
        return cls(PATH_YEARS, values, res)


# ---- stages ----------------------------------------------------------------

@dataclass
class StageRecord:
    stage: str
    iteration: int = 0
    l1: float = 0.0
    max_violation: float = 0.0
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _ratio(target: np.ndarray, current: np.ndarray, labels: Sequence) -> tuple[np.ndarray, list]:
    """Scaling factors target/current; blocks that cannot or must not be scaled get 1."""
    f = np.ones_like(current)
    ok = (current > 0) & (target > 0)
    f[ok] = target[ok] / current[ok]
    skipped = []
    for k in np.flatnonzero(~ok & ~np.isnan(target)):
        if current[k] == 0 and target[k] > 0:
            skipped.append({"block": labels[k], "reason": "zero mass, positive target"})
        elif current[k] > 0 and target[k] == 0:
            skipped.append({"block": labels[k], "reason": "zero target"})
    return f, skipped


def _rel_violation(got: np.ndarray, target: np.ndarray) -> float:
    mask = (target > 0) & ~np.isnan(target)
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(got[mask] - target[mask]) / target[mask]))


def scale_to_cbg_populations(e: FlowMatrix, targets) -> tuple[FlowMatrix, StageRecord]:
    """Scale each row to its CBG population target (NaN target = leave alone)."""
    if isinstance(targets, PopulationPaths):
        targets = targets.targets(e.year - 1)
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (e.n,):
        raise InputError("CBG targets must cover every CBG")
    rows = e.row_sums()
    f, skipped = _ratio(np.where(np.isnan(targets), 0.0, targets), rows, range(e.n))
    f[np.isnan(targets)] = 1.0
    skipped = [s for s in skipped if not np.isnan(targets[s["block"]])]
    for s in skipped:
        log.info("CBG row %s not scaled: %s", s["block"], s["reason"])
    out = scale_entries_by_block(e, f, BlockPartition.identity(e.n), None)
    rec = StageRecord("cbg_populations", 1, l1_distance(e, out), _rel_violation(out.row_sums(), targets), skipped)
    return out, rec


def scale_state_stayers_movers(e: FlowMatrix, c: ConstraintSet, h: GeoHierarchy) -> tuple[FlowMatrix, StageRecord]:
    part = h.partition("state")
    nan = float("nan")
    R = np.array([c.state_stayers.get(s, nan) for s in part.labels])
    S = np.array([c.state_pops.get(s, nan) for s in part.labels])
    movers = S - R
    diag, off = split_diag_offdiag(e, part)
    fd, sk1 = _ratio(np.nan_to_num(R, nan=0.0), diag, part.labels)
    fd[np.isnan(R)] = 1.0
    fo, sk2 = _ratio(np.nan_to_num(movers, nan=0.0), off, part.labels)
    fo[np.isnan(movers)] = 1.0
    skipped = [dict(s, kind="diagonal") for s in sk1 if not np.isnan(R[part.labels.index(s["block"])])]
    skipped += [dict(s, kind="off-diagonal") for s in sk2 if not np.isnan(movers[part.labels.index(s["block"])])]
    if np.any(movers < 0):
        bad = [part.labels[k] for k in np.flatnonzero(movers < 0)]
        skipped += [{"block": b, "reason": "non-movers exceed population", "kind": "off-diagonal"} for b in bad]
    out = scale_entries_by_block(e, fd, None, part, include_diagonal="only")
    out = scale_entries_by_block(out, fo, None, part, include_diagonal="exclude")
    d2, o2 = split_diag_offdiag(out, part)
    viol = max(_rel_violation(d2, R), _rel_violation(o2, movers))
    return out, StageRecord("state_movers", 1, l1_distance(e, out), viol, skipped)


def state_flow_targets(c: ConstraintSet, part: BlockPartition) -> np.ndarray:
    pos = {s: k for k, s in enumerate(part.labels)}
    F = np.zeros((part.n_blocks, part.n_blocks))
    for (r, s), v in c.state_flows.items():
        F[pos[r], pos[s]] = v
    return F


def scale_state_flows(e: FlowMatrix, c: ConstraintSet, h: GeoHierarchy) -> tuple[FlowMatrix, StageRecord]:
    """Match state-pair block totals; zero targets leave their block as is."""
    part = h.partition("state")
    F = state_flow_targets(c, part)
    table = block_sum(e, part, part)
    f = np.ones_like(table)
    ok = (F > 0) & (table > 0)
    f[ok] = F[ok] / table[ok]
    skipped = [
        {"block": [part.labels[r], part.labels[s]], "reason": "zero mass, positive target"}
        for r, s in zip(*np.nonzero((F > 0) & (table == 0)))
    ]
    out = scale_entries_by_block(e, f, part, part)
    after = block_sum(out, part, part)
    viol = float(np.max(np.abs(after[ok] - F[ok]) / F[ok])) if ok.any() else 0.0
    return out, StageRecord("state_flows", 1, l1_distance(e, out), viol, skipped)


@dataclass
class IpfReport:
    iterations: int
    l1: list
    row_violation: float
    col_violation: float
    skipped: list
    converged: bool

    def records(self) -> list[StageRecord]:
        recs = [StageRecord("county_ipf", k + 1, float(v)) for k, v in enumerate(self.l1)]
        if recs:
            recs[-1].max_violation = max(self.row_violation, self.col_violation)
            recs[-1].skipped = list(self.skipped)
        return recs


def _as_block_vector(values, part: BlockPartition, name: str) -> np.ndarray:
    if isinstance(values, Mapping):
        missing = [c for c in part.labels if c not in values]
        if missing:
            raise InputError(f"{name}: no value for {missing[:5]}")
        return np.array([float(values[c]) for c in part.labels])
    arr = np.asarray(values, dtype=float)
    if arr.shape != (part.n_blocks,):
        raise InputError(f"{name}: expected {part.n_blocks} values")
    return arr


def ipf_to_county_pops(
    e: FlowMatrix,
    P_prev,
    P_curr,
    part: BlockPartition | GeoHierarchy,
    max_iter: int = 6000,
    tol: float | None = None,
    marginal_rtol: float = 1e-6,
) -> tuple[FlowMatrix, IpfReport]:
    """Alternate column-block (year t) and row-block (year t-1) scaling.

    Odd iterations fit columns to ``P_curr``, even ones rows to ``P_prev``.
    Stops after ``max_iter`` iterations, or at an even iteration whose
    change in L1 norm is below ``tol`` (default 1e-6 of the total target).
    """
    if isinstance(part, GeoHierarchy):
        part = part.partition("county")
    Pp = _as_block_vector(P_prev, part, "P_prev")
    Pc = _as_block_vector(P_curr, part, "P_curr")
    if np.any(Pp < 0) or np.any(Pc < 0) or not (np.all(np.isfinite(Pp)) and np.all(np.isfinite(Pc))):
        raise InputError("county populations must be finite and non-negative")
    tp, tc = float(np.sum(Pp, dtype=np.longdouble)), float(np.sum(Pc, dtype=np.longdouble))
    if tc <= 0:
        raise InconsistentMarginals("county populations sum to zero")
    gap = abs(tp - tc) / tc
    if gap > marginal_rtol:
        raise InconsistentMarginals(
            f"county totals differ by {gap:.3g} relative (t-1: {tp:.10g}, t: {tc:.10g})"
        )
    if tp != tc:
        Pp = Pp * (tc / tp)
    if tol is None:
        tol = 1e-6 * tc
    rk = part.assignment[e.rows]
    ck = part.assignment[e.cols]
    nb = part.n_blocks
    by_col, by_row = Grouper(ck, nb), Grouper(rk, nb)
    data = e.data.copy()
    trace: list = []
    skipped: dict = {}
    converged = False
    for it in range(1, max_iter + 1):
        keys, grp, target, side = (ck, by_col, Pc, "column") if it % 2 else (rk, by_row, Pp, "row")
        sums = grp.sum(data)
        f, sk = _ratio(target, sums, part.labels)
        for s in sk:
            skipped.setdefault((side, s["block"]), dict(s, side=side))
        new = data * f[keys]
        trace.append(float(np.sum(np.abs(new - data), dtype=np.longdouble)))
        data = new
        if it % 2 == 0 and trace[-1] < tol:
            converged = True
            break
    out = e.with_data(data)
    rows = by_row.sum(data)
    cols = by_col.sum(data)
    report = IpfReport(
        iterations=len(trace),
        l1=trace,
        row_violation=_rel_violation(rows, Pp),
        col_violation=_rel_violation(cols, Pc),
        skipped=[skipped[k] for k in sorted(skipped, key=str)],
        converged=converged,
    )
    return out, report


# ---- pipeline --------------------------------------------------------------

@dataclass
class HarmonizerOptions:
    cbg_stage: bool = True
    state_movers_stage: bool = True
    state_flows_stage: bool = True
    county_ipf_stage: bool = True
    max_iter: int = 6000
    tol: float | None = None  # absolute L1; default 1e-6 x total county population
    marginal_rtol: float = 1e-6

    @classmethod
    def held_out(cls, which: str, **kw) -> "HarmonizerOptions":
        if which == "cbg":
            return cls(cbg_stage=False, **kw)
        if which == "state":
            return cls(state_movers_stage=False, state_flows_stage=False, **kw)
        raise InputError(f"unknown held-out configuration {which!r}")


@dataclass
class HarmonizeReport:
    year: int | None
    records: list = field(default_factory=list)
    stage_counts: dict = field(default_factory=dict)
    ipf: IpfReport | None = None

    def add(self, rec: StageRecord) -> None:
        self.records.append(rec)
        self.stage_counts[rec.stage] = self.stage_counts.get(rec.stage, 0) + (rec.stage != "county_ipf" or rec.iteration == 1)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                d = asdict(r)
                d["year"] = self.year
                fh.write(json.dumps(d, sort_keys=True, default=str) + "\n")


def harmonize(
    e_raw: FlowMatrix,
    c: ConstraintSet,
    paths: PopulationPaths | np.ndarray | None,
    h: GeoHierarchy,
    options: HarmonizerOptions | None = None,
) -> tuple[FlowMatrix, HarmonizeReport]:
    """Run the enabled stages once each, in order, ending with county IPF."""
    opts = options or HarmonizerOptions()
    if e_raw.n != h.n:
        raise InputError(f"matrix dimension {e_raw.n} does not match hierarchy ({h.n} CBGs)")
    report = HarmonizeReport(e_raw.year)
    e = e_raw
    if opts.cbg_stage:
        if paths is None:
            raise InputError("CBG stage enabled but no population paths given")
        e, rec = scale_to_cbg_populations(e, paths)
        report.add(rec)
    if opts.state_movers_stage:
        e, rec = scale_state_stayers_movers(e, c, h)
        report.add(rec)
    if opts.state_flows_stage:
        e, rec = scale_state_flows(e, c, h)
        part = h.partition("state")
        R = np.array([c.state_stayers.get(s, np.nan) for s in part.labels])
        d2, _ = split_diag_offdiag(e, part)
        rec.skipped.append({"stage2_diagonal_drift": _rel_violation(d2, R)})
        report.add(rec)
    if opts.county_ipf_stage:
        e, ipf = ipf_to_county_pops(
            e, c.county_pops_prev, c.county_pops_curr, h, opts.max_iter, opts.tol, opts.marginal_rtol
        )
        report.ipf = ipf
        for rec in ipf.records():
            report.add(rec)
    return e, report
