"""Comparison metrics: error, error reduction, correlations, bias, in-migration."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import rankdata

from .errors import LengthMismatch, RawPerfect, ZeroTotal, ZeroVariance
from .flows import BlockPartition, FlowMatrix, block_sum, precise_sum

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    metric: str
    level: str
    value: float
    weighted: bool = False
    year: str | int | None = None


def national_rescale(e: FlowMatrix, national_pop: float) -> FlowMatrix:
    """One scalar so the matrix total equals ``national_pop``."""
    total = e.total()
    if total <= 0:
        raise ZeroTotal("cannot rescale an empty matrix")
    if total == national_pop:
        return e
    return e.with_data(e.data * (national_pop / total))


def _vectors(est, truth, weights=None):
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape or est.ndim != 1:
        raise LengthMismatch(f"lengths {est.shape} and {truth.shape} differ")
    if weights is None:
        return est, truth, np.ones_like(est)
    w = np.asarray(weights, dtype=float)
    if w.shape != est.shape:
        raise LengthMismatch("weights length differs")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    return est, truth, w


def rmse(est, truth, weights=None) -> float:
    est, truth, w = _vectors(est, truth, weights)
    return float(np.sqrt(np.sum(w * (est - truth) ** 2) / np.sum(w)))


def rmse_reduction(raw, harmonized, truth, weights=None) -> float:
    """Percent reduction in RMSE from ``raw`` to ``harmonized``."""
    r0 = rmse(raw, truth, weights)
    r1 = rmse(harmonized, truth, weights)
    if r0 == 0:
        if r1 == 0:
            return 0.0
        raise RawPerfect("raw estimate is already exact; reduction undefined")
    return 100.0 * (1.0 - r1 / r0)


def correlation(est, truth, weights=None, rank: bool = False) -> float:
    """Weighted Pearson, or Spearman (unweighted Pearson on midranks)."""
    est, truth, w = _vectors(est, truth, None if rank else weights)
    if est.size < 2:
        raise ValueError("correlation needs at least two points")
    if rank:
        est, truth = rankdata(est), rankdata(truth)
    w = w / w.sum()
    de = est - np.sum(w * est)
    dt = truth - np.sum(w * truth)
    ve, vt = np.sum(w * de * de), np.sum(w * dt * dt)
    if ve <= 0 or vt <= 0:
        raise ZeroVariance("correlation undefined for a constant series")
    r = np.sum(w * de * dt) / np.sqrt(ve * vt)
    return float(np.clip(r, -1.0, 1.0))


def demographic_bias(n, p, truth_total: float) -> float:
    """Percent error of the implied group size ``sum(p_i * n_i)``."""
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    if n.shape != p.shape:
        raise LengthMismatch("n and p differ in length")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("group shares must lie in [0, 1]")
    if truth_total <= 0:
        raise ValueError("truth total must be positive")
    return 100.0 * (precise_sum(p * n) - truth_total) / truth_total


def in_migration_rate(e: FlowMatrix, part: BlockPartition) -> np.ndarray:
    """Share of each area's year-t residents who lived in another area at t-1.

    Areas with zero population get NaN.
    """
    table = block_sum(e, part, part)
    total = table.sum(axis=0)
    inflow = total - np.diag(table)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(total > 0, inflow / np.where(total > 0, total, 1.0), np.nan)
    return rate


def align(est: Mapping, truth: Mapping) -> tuple[list, np.ndarray, np.ndarray]:
    """Join two area-keyed tables; areas missing on either side are dropped."""
    keys = sorted(set(est) & set(truth))
    dropped = len(set(est) ^ set(truth))
    if dropped:
        log.info("dropped %d areas present on only one side", dropped)
    return keys, np.array([est[k] for k in keys], float), np.array([truth[k] for k in keys], float)


def flow_vector(m: FlowMatrix, part: BlockPartition, movers_only: bool = False) -> np.ndarray:
    """Flattened block table; ``movers_only`` drops within-block cells."""
    t = block_sum(m, part, part)
    if movers_only:
        return t[~np.eye(part.n_blocks, dtype=bool)]
    return t.ravel()


def compare_matrices(
    raw: FlowMatrix,
    harmonized: FlowMatrix,
    truth: FlowMatrix,
    partitions: Mapping[str, BlockPartition],
    year=None,
) -> list[MetricReport]:
    """Pearson and RMSE reduction for flows (all / movers only), populations and
    population-weighted in-migration rates at each level.

    ``raw`` is rescaled to the truth total first so trivial undercounts do not
    count as error.
    """
    raw = national_rescale(raw, truth.total())
    out = []
    for level, part in partitions.items():
        for movers in (False, True):
            tag = "movers" if movers else "all"
            t = flow_vector(truth, part, movers)
            r = flow_vector(raw, part, movers)
            hm = flow_vector(harmonized, part, movers)
            out.append(MetricReport(f"pearson_flows_{tag}", level, _safe(correlation, hm, t), False, year))
            out.append(MetricReport(f"pearson_raw_flows_{tag}", level, _safe(correlation, r, t), False, year))
            out.append(MetricReport(f"rmse_reduction_flows_{tag}", level, _safe(rmse_reduction, r, hm, t), False, year))
        if part.n_blocks < 2:
            continue
        tp = block_sum(truth, part, BlockPartition.single(truth.n)).ravel()
        rp = block_sum(raw, part, BlockPartition.single(raw.n)).ravel()
        hp = block_sum(harmonized, part, BlockPartition.single(harmonized.n)).ravel()
        out.append(MetricReport("pearson_population", level, _safe(correlation, hp, tp), False, year))
        out.append(MetricReport("rmse_reduction_population", level, _safe(rmse_reduction, rp, hp, tp), False, year))
        tr, rr, hr = (in_migration_rate(m, part) for m in (truth, raw, harmonized))
        w = block_sum(truth, BlockPartition.single(truth.n), part).ravel()
        ok = ~(np.isnan(tr) | np.isnan(rr) | np.isnan(hr))
        if ok.sum() >= 2:
            out.append(MetricReport("pearson_in_migration_rate", level, _safe(correlation, hr[ok], tr[ok], w[ok]), True, year))
            out.append(
                MetricReport("rmse_reduction_in_migration_rate", level, _safe(rmse_reduction, rr[ok], hr[ok], tr[ok], w[ok]), True, year)
            )
    return out


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except (ZeroVariance, RawPerfect, ValueError) as exc:
        log.info("%s undefined: %s", fn.__name__, exc)
        return float("nan")


def write_metrics(reports: Iterable[MetricReport], path, append: bool = False) -> None:
    """CSV ``metric,level,weighted,year,value``."""
    import os

    new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["metric", "level", "weighted", "year", "value"])
        for r in reports:
            w.writerow([r.metric, r.level, int(bool(r.weighted)), "" if r.year is None else r.year, "%.17g" % r.value])
