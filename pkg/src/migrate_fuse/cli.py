"""``migrate-fuse <subcommand> --config <path> [--set key=value ...]``

Exit codes: 0 success, 2 input or validation error, 3 numerical failure.
``MIGRATE_THREADS`` caps worker count.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analytics, constraints, crosswalk, flows, geo, harmonizer, records, synthgen, validator
from .errors import InputError, NumericalError

log = logging.getLogger("migrate_fuse")

DEFAULTS = {
    "hierarchy": None,
    "changes": None,
    "records": None,
    "exact_crosswalk": None,
    "fuzzy_crosswalk": None,
    "cbg_pops": None,
    "state_flows": None,
    "state_pops": None,
    "county_pops": None,
    "components": None,
    "categories": None,
    "regions": None,
    "years": None,
    "output_dir": "out",
    "seed": 0,
    "address_matrices": None,
    "raw_matrices": None,
    "harmonized_matrices": None,
    "truth_matrices": None,
    "harmonizer": {
        "cbg_stage": True,
        "state_movers_stage": True,
        "state_flows_stage": True,
        "county_ipf_stage": True,
        "max_iter": 6000,
        "tol": None,
        "marginal_rtol": 1e-6,
    },
    "synth": {
        "n_states": 4,
        "counties_per_state": 2,
        "tracts_per_county": 5,
        "cbgs_per_tract": 5,
        "total_pop": 1000000.0,
        "stay_rate": 0.87,
        "gravity_exponent": 2.0,
        "year": 2015,
        "taus": [0.05, 0.10, 0.20],
        "bias_grid": [],
        "seeds": [0, 1, 2],
        "experiment": None,
    },
    "analyze": {"distance_edges": [5.0, 50.0]},
    "redact": {"k": 10, "q": 0.9},
}


def workers() -> int:
    try:
        return max(1, int(os.environ.get("MIGRATE_THREADS", "1")))
    except ValueError:
        raise InputError("MIGRATE_THREADS must be an integer") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path(".")
    if path:
        with open(path) as fh:
            user = json.load(fh)
        cfg = _merge(cfg, user)
        base_dir = Path(path).resolve().parent
    for item in overrides:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    # relative paths in the config file are relative to the file
    for k, v in list(cfg.items()):
        if isinstance(v, str) and k not in ("seed",) and v and not Path(v).is_absolute() and path:
            if k in DEFAULTS and k not in ("seed",):
                cfg[k] = str(base_dir / v)
    return cfg


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(out_dir: Path, sub: str, cfg: dict, inputs: list, outputs: list) -> None:
    data = {
        "subcommand": sub,
        "config": cfg,
        "inputs": {str(p): _digest(p) for p in inputs if p and Path(p).is_file()},
        "outputs": {str(Path(p).relative_to(out_dir)): _digest(p) for p in outputs},
    }
    with open(out_dir / f"manifest_{sub}.json", "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=str)


def _years(cfg) -> list[int]:
    ys = cfg.get("years")
    if not ys:
        raise InputError("config needs 'years': [first, last]")
    if isinstance(ys, int):
        return [ys]
    if len(ys) == 2 and ys[0] <= ys[1]:
        return list(range(int(ys[0]), int(ys[1]) + 1))
    return [int(y) for y in ys]


def _require(cfg, *keys):
    for k in keys:
        if not cfg.get(k):
            raise InputError(f"config needs {k!r}")


def _out(cfg) -> Path:
    p = Path(cfg["output_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _hierarchy(cfg) -> geo.GeoHierarchy:
    _require(cfg, "hierarchy")
    return geo.hierarchy_from_path(cfg["hierarchy"], cfg.get("changes"))


def _read_dir_matrices(d, prefix: str, ids) -> dict:
    out = {}
    for f in sorted(Path(d).glob(f"{prefix}_*.csv")):
        try:
            year = int(f.stem.rsplit("_", 1)[1])
        except ValueError:
            continue
        m = flows.read_matrix(f, ids)
        out[year] = flows.FlowMatrix(m.csr, year)
    if not out:
        raise InputError(f"no {prefix}_<year>.csv matrices in {d}")
    return out


# ---- subcommands -------------------------------------------------------------

def cmd_process_records(cfg) -> None:
    _require(cfg, "records")
    recs = records.read_records(cfg["records"])
    if not recs:
        raise InputError(f"{cfg['records']} holds no records")
    years = _years(cfg)
    mats = records.process_records(recs, years, workers())
    out = _out(cfg) / "address_matrices"
    out.mkdir(exist_ok=True)
    outputs = []
    ids = next(iter(mats.values())).ids
    idfile = out / "addresses.csv"
    with open(idfile, "w") as fh:
        fh.write("address_id\n")
        fh.writelines(f"{a}\n" for a in ids)
    outputs.append(idfile)
    for y, am in mats.items():
        p = out / f"address_flows_{y}.csv"
        flows.write_matrix(am.matrix, am.ids, p)
        outputs.append(p)
    _manifest(out.parent, "process_records", cfg, [cfg["records"]], outputs)
    print(f"wrote {len(mats)} address matrices to {out}")


def _read_address_ids(d: Path) -> list:
    with open(d / "addresses.csv") as fh:
        lines = fh.read().splitlines()
    return lines[1:]


def _raw_cbg_matrices(cfg, h) -> dict:
    if cfg.get("raw_matrices"):
        return _read_dir_matrices(cfg["raw_matrices"], "raw", h.cbg_ids)
    d = Path(cfg.get("address_matrices") or Path(cfg["output_dir"]) / "address_matrices")
    ids = _read_address_ids(d)
    amats = _read_dir_matrices(d, "address_flows", ids)
    exact = crosswalk.read_exact(cfg["exact_crosswalk"]) if cfg.get("exact_crosswalk") else {}
    fuzzy = crosswalk.read_fuzzy(cfg["fuzzy_crosswalk"]) if cfg.get("fuzzy_crosswalk") else []
    pops = {}
    if cfg.get("cbg_pops"):
        for cbg, obs in constraints.read_cbg_pops(cfg["cbg_pops"]).items():
            vals = [v for w, v, _ in obs if w == "census2010"] or [v for _, v, _ in obs]
            pops[cbg] = float(np.mean(vals))
    g = crosswalk.build_crosswalk(exact, fuzzy, pops, h, ids)
    return {
        y: crosswalk.apply_crosswalk(records.AddressMatrix(tuple(ids), m), g, y) for y, m in amats.items()
    }


def _options(cfg) -> harmonizer.HarmonizerOptions:
    o = cfg.get("harmonizer") or {}
    known = harmonizer.HarmonizerOptions.__dataclass_fields__
    unknown = set(o) - set(known)
    if unknown:
        raise InputError(f"unknown harmonizer options {sorted(unknown)}")
    return harmonizer.HarmonizerOptions(**o)


def _constraint_set(cfg, h, year) -> constraints.ConstraintSet:
    paths = {k: cfg.get(k) for k in ("state_flows", "state_pops", "county_pops")}
    cs = constraints.load_constraints(paths, year, h)
    if cfg.get("components"):
        cc = constraints.read_components(cfg["components"], year, "county")
        sc = constraints.read_components(cfg["components"], year, "state")
        cs = constraints.prepare_constraints(cs, cc, sc)
    return cs


def cmd_harmonize(cfg) -> None:
    h = _hierarchy(cfg)
    opts = _options(cfg)
    raw = _raw_cbg_matrices(cfg, h)
    years = [y for y in _years(cfg) if y in raw]
    if not years:
        raise InputError("no raw matrices for the configured years")
    paths = None
    if opts.cbg_stage:
        _require(cfg, "cbg_pops")
        paths = harmonizer.PopulationPaths.solve(constraints.read_cbg_pops(cfg["cbg_pops"]), h)
    css = {y: _constraint_set(cfg, h, y) for y in years}

    def run(y):
        return harmonizer.harmonize(raw[y], css[y], paths, h, opts)

    with ThreadPoolExecutor(max_workers=workers()) as ex:
        results = list(ex.map(run, years))
    out = _out(cfg) / "harmonized"
    out.mkdir(exist_ok=True)
    outputs = []
    for y, (m, rep) in zip(years, results):
        for name, mat in (("raw", raw[y]), ("migrate", m)):
            p = out / f"{name}_{y}.csv"
            flows.write_matrix(mat, h.cbg_ids, p)
            outputs.append(p)
        p = out / f"report_{y}.jsonl"
        rep.write_jsonl(p)
        outputs.append(p)
        ipf = rep.ipf
        if ipf is not None:
            print(f"{y}: county IPF {ipf.iterations} iterations, max violation "
                  f"{max(ipf.row_violation, ipf.col_violation):.3g}")
    inputs = [cfg.get(k) for k in ("hierarchy", "changes", "cbg_pops", "state_flows", "state_pops",
                                   "county_pops", "components", "exact_crosswalk", "fuzzy_crosswalk")]
    _manifest(out.parent, "harmonize", cfg, inputs, outputs)


def cmd_validate(cfg) -> None:
    h = _hierarchy(cfg)
    hdir = cfg.get("harmonized_matrices") or Path(cfg["output_dir"]) / "harmonized"
    _require(cfg, "truth_matrices")
    est = _read_dir_matrices(hdir, "migrate", h.cbg_ids)
    raw = _read_dir_matrices(cfg.get("raw_matrices") or hdir, "raw", h.cbg_ids)
    truth = _read_dir_matrices(cfg["truth_matrices"], "truth", h.cbg_ids)
    parts = {lv: h.partition(lv) for lv in ("cbg", "tract", "county", "state")}
    reports = []
    for y in sorted(set(est) & set(raw) & set(truth)):
        reports += validator.compare_matrices(raw[y], est[y], truth[y], parts, y)
    if not reports:
        raise InputError("no year has raw, harmonized and truth matrices")
    p = _out(cfg) / "metrics.csv"
    validator.write_metrics(reports, p)
    _manifest(_out(cfg), "validate", cfg, [cfg.get("hierarchy")], [p])
    print(f"wrote {len(reports)} metrics to {p}")


def _synth_world(s):
    h = synthgen.make_world(s["n_states"], s["counties_per_state"], s["tracts_per_county"], s["cbgs_per_tract"])
    truth = synthgen.gen_ground_truth(
        h, s["total_pop"], s["stay_rate"], s["gravity_exponent"], seed=0, year=s["year"]
    )
    return h, truth


def synth_grid_metrics(cfg) -> list[validator.MetricReport]:
    s = cfg["synth"]
    seed0 = int(cfg.get("seed") or 0)
    if s.get("hierarchy_seed") is not None:
        seed0 = int(s["hierarchy_seed"])
    h, truth = _synth_world(s)
    opts = _options(cfg)
    cells = []
    if s.get("experiment"):
        spec = synthgen.PerturbationSpec.from_json(s["experiment"])
        cells.append((spec.family, spec.to_dict() | {"w": spec.w}))
    else:
        cells += [("structured", {"tau": float(t)}) for t in s.get("taus") or []]
        cells += [("bias_noise", {"b": float(b), "sigma": float(sg)}) for b, sg in s.get("bias_grid") or []]
    reports = []
    for fam, params in cells:
        params = {k: v for k, v in params.items() if k not in ("family", "seed")}
        label = ",".join(f"{k}={v:g}" for k, v in sorted(params.items()) if k != "w" and v is not None)
        per_seed = []
        for sd in s.get("seeds") or [0]:
            spec = synthgen.PerturbationSpec(fam, seed=seed0 + int(sd), **params)
            per_seed.append(synthgen.recovery_experiment(spec, h, truth, opts))
        for k, r in enumerate(per_seed[0]):
            vals = [rs[k].value for rs in per_seed]
            reports.append(
                validator.MetricReport(f"{fam}[{label}]/{r.metric}", r.level, float(np.mean(vals)), False, truth.year)
            )
    return reports


def cmd_synth_eval(cfg) -> None:
    reports = synth_grid_metrics(cfg)
    p = _out(cfg) / "synth_metrics.csv"
    validator.write_metrics(reports, p, append=True)
    _manifest(_out(cfg), "synth_eval", cfg, [cfg["synth"].get("experiment")], [p])
    print(f"appended {len(reports)} metrics to {p}")


def _read_regions(path, h) -> dict:
    import csv

    regions: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["cbg_id"] not in h:
                raise InputError(f"regions: unknown CBG {row['cbg_id']}")
            regions.setdefault(row["region"], []).append(h.index(row["cbg_id"]))
    return regions


def cmd_analyze(cfg) -> None:
    h = _hierarchy(cfg)
    hdir = cfg.get("harmonized_matrices") or Path(cfg["output_dir"]) / "harmonized"
    mats = _read_dir_matrices(hdir, "migrate", h.cbg_ids)
    rows = []
    edges = cfg["analyze"].get("distance_edges", [5.0, 50.0])
    cats = analytics.read_categories(cfg["categories"], h) if cfg.get("categories") else None
    for y, m in sorted(mats.items()):
        if cats is not None:
            for scope, part in (("all", None), ("out_of_county", h.partition("county"))):
                tab = analytics.category_flow_table(m, cats, part)
                for rl, vals in zip(tab.rows, tab.values):
                    rows += [(f"category_share/{scope}", rl, cl, y, v) for cl, v in zip(tab.cols, vals)]
                try:
                    hom = analytics.homophily_ratios(tab)
                    for rl, vals in zip(hom.rows, hom.values):
                        rows += [(f"homophily/{scope}", rl, cl, y, v) for cl, v in zip(hom.cols, vals)]
                except analytics.ZeroBaseShare as exc:
                    log.warning("%s: homophily skipped: %s", y, exc)
            for origin in ("all",) + analytics.RACES:
                for target in ("higher_income", "top_quartile", "bottom_quartile"):
                    for den in ("group", "bucket") if origin != "all" else ("group",):
                        probs = analytics.upward_mobility(m, cats, origin, "decile", target, den)
                        stat = f"mobility/{target}" + ("" if den == "group" else "/of_all_movers")
                        rows += [(stat, origin, f"decile{k + 1}", y, v) for k, v in enumerate(probs)]
        if h.has_centroids():
            dd = analytics.distance_distribution(m, h, edges, "category" if cats is not None else None, cats)
            labels = analytics.bucket_labels(edges)
            for stratum, shares in dd.items():
                rows += [("distance_share", stratum, b, y, v) for b, v in zip(labels, shares)]
        for b, v in analytics.distance_distribution(m, h, stratify="boundary").items():
            rows.append(("boundary_share", "all", b, y, v))
    if cfg.get("regions"):
        series = analytics.region_out_migration_series(mats, _read_regions(cfg["regions"], h))
        for name, ser in series.items():
            rows += [("out_migration_rate", name, "", y, v) for y, v in ser.items()]
    p = _out(cfg) / "analytics.csv"
    analytics.write_long(rows, p)
    _manifest(_out(cfg), "analyze", cfg, [cfg.get("hierarchy"), cfg.get("categories")], [p])
    print(f"wrote {len(rows)} rows to {p}")


def cmd_redact(cfg) -> None:
    h = _hierarchy(cfg)
    hdir = cfg.get("harmonized_matrices") or Path(cfg["output_dir"]) / "harmonized"
    mats = _read_dir_matrices(hdir, "migrate", h.cbg_ids)
    k, q = int(cfg["redact"]["k"]), float(cfg["redact"]["q"])
    out = _out(cfg) / "redacted"
    out.mkdir(exist_ok=True)
    outputs = []
    listing = out / "redacted_cbgs.csv"
    with open(listing, "w") as fh:
        fh.write("year,cbg_id\n")
        for y, m in sorted(mats.items()):
            red, cbgs = analytics.redact_low_diversity(m, k, q)
            p = out / f"migrate_{y}.csv"
            flows.write_matrix(red, h.cbg_ids, p)
            outputs.append(p)
            fh.writelines(f"{y},{h.cbg_ids[i]}\n" for i in cbgs)
            print(f"{y}: redacted {len(cbgs)} of {h.n} CBGs ({100 * len(cbgs) / h.n:.3f}%)")
    outputs.append(listing)
    _manifest(_out(cfg), "redact", cfg, [cfg.get("hierarchy")], outputs)


def cmd_synth_fixture(cfg) -> None:
    """Write a self-contained synthetic input set plus a config that uses it."""
    s = cfg["synth"]
    out = _out(cfg)
    h, truth = _synth_world(s)
    years = _years(cfg) if cfg.get("years") else [s["year"]]
    geo.write_hierarchy(h, out / "hierarchy.csv")
    cs, paths = synthgen.truth_constraints(truth, h)
    tdir = out / "truth"
    rdir = out / "raw"
    tdir.mkdir(exist_ok=True)
    rdir.mkdir(exist_ok=True)
    tau = float((s.get("taus") or [0.1])[0])
    for k, y in enumerate(years):
        t = flows.FlowMatrix(truth.csr, y)
        flows.write_matrix(t, h.cbg_ids, tdir / f"truth_{y}.csv")
        raw = synthgen.perturb_structured(t, tau, int(cfg.get("seed") or 0) + k, h)
        raw = raw.with_data(raw.data * 0.7)  # undercount, as address data does
        flows.write_matrix(raw, h.cbg_ids, rdir / f"raw_{y}.csv")
    rows = truth.row_sums()
    with open(out / "cbg_pops.csv", "w") as fh:
        fh.write("cbg_id,window,value,moe\n")
        for i, c in enumerate(h.cbg_ids):
            for w in constraints.WINDOWS:
                fh.write(f"{c},{w},{rows[i]:.17g},{0.25 * rows[i]:.17g}\n")
    with open(out / "state_pops.csv", "w") as fh:
        fh.write("year,state_id,population,nonmovers\n")
        for y in years:
            for st in sorted(cs.state_pops):
                fh.write(f"{y},{st},{cs.state_pops[st]:.17g},{cs.state_stayers[st]:.17g}\n")
    with open(out / "state_flows.csv", "w") as fh:
        fh.write("year,origin_state,dest_state,value\n")
        for y in years:
            for (r, c), v in sorted(cs.state_flows.items()):
                fh.write(f"{y},{r},{c},{v:.17g}\n")
    with open(out / "county_pops.csv", "w") as fh:
        fh.write("year,county_id,population\n")
        for y in [years[0] - 1] + years:
            src = cs.county_pops_prev if y == years[0] - 1 else cs.county_pops_curr
            for co in sorted(src):
                fh.write(f"{y},{co},{src[co]:.17g}\n")
    with open(out / "components.csv", "w") as fh:
        fh.write("year,level,area_id,births,deaths,net_international,immigrants\n")
        for y in years:
            for co in sorted(h.county_to_state):
                fh.write(f"{y},county,{co},0,0,0,0\n")
            for st in sorted(cs.state_pops):
                fh.write(f"{y},state,{st},0,0,0,0\n")
    w = synthgen.white_share_covariate(h, 0)
    income = synthgen.synth_populations(h, 60000.0 * h.n, 7)
    with open(out / "categories.csv", "w") as fh:
        fh.write("cbg_id,plurality_race,urban,median_income\n")
        for i, c in enumerate(h.cbg_ids):
            race = "white" if w[i] > 0 else analytics.RACES[1 + i % 3]
            fh.write(f"{c},{race},{int(rows[i] > np.median(rows))},{income[i]:.2f}\n")
    counties = h.partition("county")
    with open(out / "regions.csv", "w") as fh:
        fh.write("region,cbg_id\n")
        for b in range(min(2, counties.n_blocks)):
            for i in counties.members(b):
                fh.write(f"{counties.labels[b]},{h.cbg_ids[i]}\n")
    conf = {
        "hierarchy": "hierarchy.csv",
        "raw_matrices": "raw",
        "truth_matrices": "truth",
        "cbg_pops": "cbg_pops.csv",
        "state_pops": "state_pops.csv",
        "state_flows": "state_flows.csv",
        "county_pops": "county_pops.csv",
        "components": "components.csv",
        "categories": "categories.csv",
        "regions": "regions.csv",
        "years": [years[0], years[-1]],
        "output_dir": "out",
    }
    with open(out / "config.json", "w") as fh:
        json.dump(conf, fh, indent=2)
    print(f"wrote synthetic fixture ({h.n} CBGs) to {out}")


COMMANDS = {
    "process-records": cmd_process_records,
    "harmonize": cmd_harmonize,
    "validate": cmd_validate,
    "synth-eval": cmd_synth_eval,
    "analyze": cmd_analyze,
    "redact": cmd_redact,
    "synth-fixture": cmd_synth_fixture,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="migrate-fuse", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config value (dotted keys; JSON values)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.subcommand](cfg)
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (InputError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
