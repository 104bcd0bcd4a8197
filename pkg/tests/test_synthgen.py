import json

import numpy as np
import pytest

from migrate_fuse import rng, synthgen
from migrate_fuse.errors import InputError
from migrate_fuse.flows import block_sum
from migrate_fuse.geo import build_hierarchy
from migrate_fuse.synthgen import PerturbationSpec


def test_stay_rate_and_total(world, truth):
    d = truth.diagonal()
    assert d.sum() == pytest.approx(0.87 * truth.total(), rel=1e-6)
    assert truth.total() == pytest.approx(1e6, rel=1e-12)
    assert (truth.data >= 0).all()


def test_two_cbg_symmetric():
    h = build_hierarchy([("a", "T", "C", "S", (35.0, -100.0)), ("b", "T", "C", "S", (35.01, -100.0))])
    m = synthgen.gen_ground_truth(h, total_pop=1000.0, stay_rate=0.9).toarray()
    assert m[0, 1] == pytest.approx(m[1, 0], rel=1e-12)
    assert m[0, 1] + m[1, 0] == pytest.approx(100.0, rel=1e-12)


def test_truth_is_symmetric_and_deterministic(world, truth):
    a = truth.toarray()
    np.testing.assert_allclose(a, a.T, rtol=1e-12)
    again = synthgen.gen_ground_truth(world)
    assert again.identical(truth)
    assert not synthgen.gen_ground_truth(world, seed=1).identical(truth)


def test_zero_perturbation_is_identity(world, truth):
    assert synthgen.perturb_structured(truth, 0.0, 3, world).identical(truth)
    w = synthgen.white_share_covariate(world, 0)
    assert synthgen.perturb_bias_noise(truth, 0.0, 0.0, w, 3).identical(truth)


def test_structured_replays_five_draws_on_single_cbg():
    h = build_hierarchy([("g", "T", "C", "S", (35.0, -100.0))])
    m = synthgen.gen_ground_truth(h, total_pop=500.0)
    tau, seed = 0.1, 42
    out = synthgen.perturb_structured(m, tau, seed, h)
    # a diagonal entry gets row, state-diagonal, state-pair, county-row and county-column draws
    g = sum(rng.normals(seed, fam, [0])[0] for fam in ("row", "state_diag", "state_pair", "county_row", "county_col"))
    assert out.toarray()[0, 0] == pytest.approx(m.toarray()[0, 0] * np.exp(tau * g), rel=1e-14)


def test_structured_preserves_pattern_and_is_seeded(world, truth):
    a = synthgen.perturb_structured(truth, 0.1, 0, world)
    b = synthgen.perturb_structured(truth, 0.1, 0, world)
    c = synthgen.perturb_structured(truth, 0.1, 1, world)
    assert a.identical(b) and not a.identical(c)
    assert np.array_equal(a.rows, truth.rows) and np.array_equal(a.cols, truth.cols)
    assert (a.data > 0).all()


def test_structured_factor_constant_within_groups(world, truth):
    # entries sharing every group get the same factor
    lf = synthgen.structured_log_factors(truth, 0.2, 5, world)
    co = world.partition("county").assignment
    r, c = truth.rows, truth.cols
    off = r != c
    key = r[off] * 10_000 + co[c[off]]
    vals = lf[off]
    for k in np.unique(key)[:50]:
        sel = vals[key == k]
        assert np.ptp(sel) == 0.0


def test_bias_noise_sigma_zero_is_exact_covariate(world, truth):
    w = synthgen.white_share_covariate(world, 0)
    out = synthgen.perturb_bias_noise(truth, 0.1, 0.0, w, 0)
    r, c = truth.rows, truth.cols
    np.testing.assert_allclose(np.log(out.data / truth.data), 0.1 * (w[r] + w[c]), atol=1e-12)


def test_bias_noise_log_factor_mean(world, truth):
    w = synthgen.white_share_covariate(world, 0)
    sigma = 0.2
    out = synthgen.perturb_bias_noise(truth, 0.0, sigma, w, 9)
    lf = np.log(out.data / truth.data)
    assert abs(lf.mean()) < 3 * sigma / np.sqrt(lf.size)
    assert lf.std() == pytest.approx(sigma, rel=0.05)


def test_covariate_is_z_scored(world):
    w = synthgen.white_share_covariate(world, 0)
    assert abs(w.mean()) < 1e-12 and w.std() == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(InputError):
        PerturbationSpec("bias_noise", b=0.1, w=[1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        PerturbationSpec("smooth")
    with pytest.raises(InputError):
        synthgen.perturb_bias_noise(synthgen.gen_ground_truth(world), 0.1, 0.1, w[:-1], 0)


def test_spec_json_roundtrip(tmp_path):
    spec = PerturbationSpec("structured", tau=0.05, seed=4)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(spec.to_dict()))
    assert PerturbationSpec.from_json(p) == spec


def test_truth_constraints_match_truth(world, truth):
    cs, paths = synthgen.truth_constraints(truth, world)
    sp = world.partition("state")
    table = block_sum(truth, sp, sp)
    assert sum(cs.state_flows.values()) == pytest.approx(truth.total(), rel=1e-12)
    assert cs.state_flows[(sp.labels[0], sp.labels[0])] == pytest.approx(table[0, 0], rel=1e-14)
    assert cs.county_pops_prev.keys() == cs.county_pops_curr.keys()


def test_zero_perturbation_recovery(world, truth):
    reps = synthgen.recovery_experiment(PerturbationSpec("structured", tau=0.0), world, truth)
    by = {(r.metric, r.level): r.value for r in reps}
    for lvl in synthgen.LEVELS:
        assert by[("pearson_flows_all", lvl)] == pytest.approx(1.0, abs=1e-9)
        assert np.isnan(by[("rmse_reduction_flows_all", lvl)])


def test_recovery_deterministic(world, truth):
    spec = PerturbationSpec("structured", tau=0.1, seed=2)
    a = synthgen.recovery_experiment(spec, world, truth)
    b = synthgen.recovery_experiment(spec, world, truth)
    assert [(r.metric, r.level, r.value) for r in a] == [(r.metric, r.level, r.value) for r in b]


@pytest.mark.slow
def test_mover_recovery_degrades_with_sigma(world, truth):
    w = synthgen.white_share_covariate(world, 0)
    vals = []
    for sigma in (0.05, 0.2, 0.5):
        spec = PerturbationSpec("bias_noise", b=0.1, sigma=sigma, w=w.tolist(), seed=0)
        reps = synthgen.recovery_experiment(spec, world, truth)
        vals.append({(r.metric, r.level): r.value for r in reps}[("pearson_flows_movers", "cbg")])
    assert vals[0] > vals[1] > vals[2]
