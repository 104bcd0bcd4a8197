"""Synthetic worlds, ground-truth flows, perturbations and recovery runs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .constraints import ConstraintSet
from .errors import InputError
from .flows import FlowMatrix, block_sum, split_diag_offdiag
from .geo import GeoHierarchy, build_hierarchy
from .harmonizer import HarmonizerOptions, PopulationPaths, harmonize
from .validator import MetricReport, compare_matrices

EARTH_RADIUS_MI = 3958.7613
LEVELS = ("cbg", "tract", "county", "state")


def haversine_miles(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_MI * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def make_world(
    n_states: int = 4,
    counties_per_state: int = 2,
    tracts_per_county: int = 5,
    cbgs_per_tract: int = 5,
    seed: int = 0,
) -> GeoHierarchy:
    """Nested synthetic geography with FIPS-shaped ids and clustered centroids."""
    recs = []
    side = int(np.ceil(np.sqrt(n_states)))
    uid = 0
    for s in range(n_states):
        st = f"{s + 1:02d}"
        slat, slon = 35.0 + 4.0 * (s // side), -100.0 + 5.0 * (s % side)
        for c in range(counties_per_state):
            co = f"{st}{2 * c + 1:03d}"
            u = rng.uniforms(seed, "layout", [uid, uid + 1]); uid += 2
            clat, clon = slat + 1.6 * (u[0] - 0.5), slon + 2.0 * (u[1] - 0.5)
            for t in range(tracts_per_county):
                tr = f"{co}{100 * (t + 1):06d}"
                u = rng.uniforms(seed, "layout", [uid, uid + 1]); uid += 2
                tlat, tlon = clat + 0.3 * (u[0] - 0.5), clon + 0.3 * (u[1] - 0.5)
                for g in range(cbgs_per_tract):
                    u = rng.uniforms(seed, "layout", [uid, uid + 1]); uid += 2
                    recs.append((f"{tr}{g + 1}", tr, co, st, (tlat + 0.05 * (u[0] - 0.5), tlon + 0.05 * (u[1] - 0.5))))
    return build_hierarchy(recs)


def synth_populations(h: GeoHierarchy, total_pop: float, seed: int) -> np.ndarray:
    """Log-normal CBG populations scaled to ``total_pop``."""
    z = rng.normals(seed, "population", np.arange(h.n))
    pop = np.exp(0.5 * z)
    return pop * (total_pop / pop.sum())


def gen_ground_truth(
    h: GeoHierarchy,
    total_pop: float = 1_000_000.0,
    stay_rate: float = 0.87,
    gravity_exponent: float = 2.0,
    seed: int = 0,
    year: int = 2015,
    max_destinations: int | None = None,
) -> FlowMatrix:
    """Gravity-model flow matrix.

    Diagonal mass is ``stay_rate`` of each CBG's population; the remaining
    mass is spread as ``pop_i * pop_j / d_ij ** exponent`` normalized to
    ``(1 - stay_rate) * total``. Distances are floored at the 5th percentile
    of inter-centroid distances.
    """
    if not 0 < stay_rate < 1:
        raise InputError("stay_rate must lie in (0, 1)")
    xy = h.centroid_array()
    pop = synth_populations(h, total_pop, seed)
    d = haversine_miles(xy[:, None, 0], xy[:, None, 1], xy[None, :, 0], xy[None, :, 1])
    off = ~np.eye(h.n, dtype=bool)
    floor = np.percentile(d[off], 5) if h.n > 1 else 1.0
    d = np.maximum(d, max(floor, 1e-9))
    k = np.outer(pop, pop) / d**gravity_exponent
    k[~off] = 0.0
    if max_destinations is not None and max_destinations < h.n - 1:
        cut = -np.sort(-k, axis=1)[:, max_destinations - 1 : max_destinations]
        k[k < cut] = 0.0
    if k.sum() > 0:
        k *= (1 - stay_rate) * total_pop / k.sum()
    dense = k + np.diag(stay_rate * pop)
    return FlowMatrix.from_dense(dense, year)


def white_share_covariate(h: GeoHierarchy, seed: int) -> np.ndarray:
    """Spatially clustered share covariate, z-scored over CBGs."""
    counties = h.partition("county").assignment
    tracts = h.partition("tract").assignment
    x = (
        rng.normals(seed, "covariate", counties)
        + 0.7 * rng.normals(seed, "covariate", 10_000 + tracts)
        + 0.5 * rng.normals(seed, "covariate", 1_000_000 + np.arange(h.n))
    )
    share = 1.0 / (1.0 + np.exp(-x))
    return (share - share.mean()) / share.std()


@dataclass
class PerturbationSpec:
    family: str  # "structured" | "bias_noise"
    tau: float = 0.0
    b: float = 0.0
    sigma: float = 0.0
    w: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("structured", "bias_noise"):
            raise InputError(f"unknown perturbation family {self.family!r}")
        if self.tau < 0 or self.sigma < 0:
            raise InputError("tau and sigma must be non-negative")
        if self.family == "bias_noise" and self.w is not None:
            w = np.asarray(self.w, dtype=float)
            if abs(w.mean()) > 1e-6 or abs(w.std() - 1) > 1e-6:
                raise InputError("covariate w must be z-scored (mean 0, sd 1)")

    @classmethod
    def from_json(cls, path) -> "PerturbationSpec":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("w")
        return d


def structured_log_factors(m: FlowMatrix, tau: float, seed: int, h: GeoHierarchy) -> np.ndarray:
    """Per-entry log multiplier of the structured perturbation."""
    st = h.partition("state").assignment
    co = h.partition("county").assignment
    ns = h.partition("state").n_blocks
    r, c = m.rows, m.cols.astype(np.int64)
    diag = r == c
    z_row = rng.normals(seed, "row", np.arange(h.n))
    z_sd = rng.normals(seed, "state_diag", np.arange(ns))
    z_so = rng.normals(seed, "state_offdiag", np.arange(ns))
    z_pair = rng.normals(seed, "state_pair", np.arange(ns * ns))
    nc = h.partition("county").n_blocks
    z_cr = rng.normals(seed, "county_row", np.arange(nc))
    z_cc = rng.normals(seed, "county_col", np.arange(nc))
    g = (
        z_row[r]
        + np.where(diag, z_sd[st[c]], z_so[st[c]])
        + z_pair[st[r] * ns + st[c]]
        + z_cr[co[r]]
        + z_cc[co[c]]
    )
    return tau * g


def perturb_structured(m: FlowMatrix, tau: float, seed: int, h: GeoHierarchy) -> FlowMatrix:
    """Multiply rows, state diagonal groups, state off-diagonal column groups,
    state pairs, county row groups and county column groups by independent
    log-normal factors with log-sd ``tau``."""
    if tau < 0:
        raise InputError("tau must be non-negative")
    if tau == 0:
        return m.with_data(m.data.copy())
    return m.with_data(m.data * np.exp(structured_log_factors(m, tau, seed, h)))


def perturb_bias_noise(m: FlowMatrix, b: float, sigma: float, w, seed: int) -> FlowMatrix:
    """``E_ij = M_ij * exp(b * (w_i + w_j) + sigma * Z_ij)`` on the support of M."""
    w = np.asarray(w, dtype=float)
    if w.shape != (m.n,):
        raise InputError("covariate must cover every CBG")
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    r, c = m.rows, m.cols.astype(np.int64)
    if b == 0 and sigma == 0:
        return m.with_data(m.data.copy())
    z = rng.normals(seed, "entry", r.astype(np.uint64) * np.uint64(m.n) + c.astype(np.uint64))
    return m.with_data(m.data * np.exp(b * (w[r] + w[c]) + sigma * z))


def truth_constraints(truth: FlowMatrix, h: GeoHierarchy) -> tuple[ConstraintSet, PopulationPaths]:
    """The marginals of ``truth`` that the harmonizer is allowed to see."""
    sp = h.partition("state")
    cp = h.partition("county")
    diag, off = split_diag_offdiag(truth, sp)
    table = block_sum(truth, sp, sp)
    ctab = block_sum(truth, cp, cp)
    cs = ConstraintSet(
        year=truth.year,
        state_stayers=dict(zip(sp.labels, diag.tolist())),
        state_pops=dict(zip(sp.labels, (diag + off).tolist())),
        state_flows={
            (sp.labels[i], sp.labels[j]): float(table[i, j])
            for i in range(sp.n_blocks)
            for j in range(sp.n_blocks)
            if table[i, j] > 0
        },
        county_pops_prev=dict(zip(cp.labels, ctab.sum(axis=1).tolist())),
        county_pops_curr=dict(zip(cp.labels, ctab.sum(axis=0).tolist())),
        adjusted=True,
    )
    paths = PopulationPaths.from_targets(truth.row_sums(), truth.year - 1)
    return cs, paths


def perturb(spec: PerturbationSpec, truth: FlowMatrix, h: GeoHierarchy) -> FlowMatrix:
    if spec.family == "structured":
        return perturb_structured(truth, spec.tau, spec.seed, h)
    w = white_share_covariate(h, spec.seed) if spec.w is None else np.asarray(spec.w, float)
    return perturb_bias_noise(truth, spec.b, spec.sigma, w, spec.seed)


def recovery_experiment(
    spec: PerturbationSpec,
    h: GeoHierarchy,
    truth: FlowMatrix,
    options: HarmonizerOptions | None = None,
) -> list[MetricReport]:
    """Perturb ``truth``, harmonize against its own marginals, score recovery.

    Reports Pearson and RMSE reduction of flows at CBG, tract, county and
    state level, over all entries and movers only.
    """
    cs, paths = truth_constraints(truth, h)
    raw = perturb(spec, truth, h)
    est, _ = harmonize(raw, cs, paths, h, options)
    parts = {lvl: h.partition(lvl) for lvl in LEVELS}
    reports = compare_matrices(raw, est, truth, parts, truth.year)
    return [r for r in reports if "flows" in r.metric and not r.metric.startswith("pearson_raw")]
