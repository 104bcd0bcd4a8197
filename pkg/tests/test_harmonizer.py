import numpy as np
import pytest

import oracles
from migrate_fuse import harmonizer as hz
from migrate_fuse.constraints import WINDOWS, ConstraintSet
from migrate_fuse.errors import InconsistentMarginals, NonFiniteInput
from migrate_fuse.flows import BlockPartition, FlowMatrix, block_sum, split_diag_offdiag
from migrate_fuse.geo import build_hierarchy
from migrate_fuse.harmonizer import DESIGN, HarmonizerOptions, PopulationPaths


def test_design_matrix_rows_are_averages():
    np.testing.assert_allclose(DESIGN.sum(axis=1), 1.0, rtol=1e-15)
    assert DESIGN[0].tolist() == [0, 1] + [0] * 9
    assert DESIGN[4].tolist() == [0.2] * 5 + [0] * 6
    assert DESIGN[10].tolist() == [0] * 6 + [0.2] * 5


def test_nnls_examples():
    p = hz.solve_population_path(DESIGN @ np.full(11, 500.0))
    np.testing.assert_allclose(p.values, 500.0, atol=1e-6)
    assert hz.solve_population_path(np.zeros(11)).values.tolist() == [0.0] * 11
    with pytest.raises(NonFiniteInput):
        hz.solve_population_path(np.r_[np.inf, np.zeros(10)])


def test_nnls_negative_pull_matches_enumeration():
    b = DESIGN @ np.full(11, 500.0)
    b[2] = -300.0  # forces some years to the bound
    p = hz.solve_population_path(b)
    assert np.all(p.values >= 0) and np.any(p.values == 0)
    _, best = oracles.brute_nnls(DESIGN, b)
    assert abs(p.residual - best) <= 1e-8 * max(1.0, best)


def test_nnls_missing_windows_dropped():
    x = np.linspace(100, 200, 11)
    b = DESIGN @ x
    b[3] = np.nan
    p = hz.solve_population_path(b)
    keep = ~np.isnan(b)
    assert np.linalg.norm(DESIGN[keep] @ p.values - b[keep]) < 1e-8


def test_generic_nnls_kkt(rng):
    for _ in range(30):
        A = rng.normal(size=(8, 5))
        b = rng.normal(size=8)
        x, _ = hz.nnls(A, b)
        neg, free = hz.kkt_violation(A, b, x)
        assert neg <= 1e-8 and free <= 1e-8
        _, best = oracles.brute_nnls(A, b)
        assert np.linalg.norm(A @ x - b) <= best + 1e-10


def test_paths_solve_vectorised(small_h):
    obs = {}
    rng = np.random.default_rng(3)
    for c in small_h.cbg_ids:
        x = rng.uniform(50, 500, 11)
        obs[c] = [(w, v, 0.0) for w, v in zip(WINDOWS, DESIGN @ x)]
    obs[small_h.cbg_ids[0]][1] = ("acs2006-2010", -1000.0, 0.0)
    paths = PopulationPaths.solve(obs, small_h)
    for i, c in enumerate(small_h.cbg_ids):
        b = np.array([v for _, v, _ in obs[c]])
        want = hz.solve_population_path(b)
        np.testing.assert_allclose(paths.values[i], want.values, rtol=1e-10, atol=1e-9)
    assert np.all(paths.values >= 0)


# ---- stage 1 ---------------------------------------------------------------

def test_cbg_row_scaling(rng):
    m = FlowMatrix.from_dense(np.array([[20.0, 30.0, 0.0], [1.0, 1.0, 2.0], [0.0, 0.0, 0.0]]), year=2016)
    t = np.array([100.0, 4.0, 5.0])
    out, rec = hz.scale_to_cbg_populations(m, t)
    np.testing.assert_allclose(out.toarray()[0], [40.0, 60.0, 0.0])
    np.testing.assert_array_equal(out.toarray()[1], m.toarray()[1])  # already on target
    assert rec.skipped == [{"block": 2, "reason": "zero mass, positive target"}]
    dense = rng.random((3, 3)) + 0.01
    out, _ = hz.scale_to_cbg_populations(FlowMatrix.from_dense(dense, 2016), np.array([3.0, 7.0, 11.0]))
    np.testing.assert_allclose(out.row_sums(), [3.0, 7.0, 11.0], rtol=1e-15)
    # paths are read at year t-1
    paths = PopulationPaths((2015, 2016), np.array([[1.0, 9.0], [2.0, 9.0], [3.0, 9.0]]))
    out, _ = hz.scale_to_cbg_populations(FlowMatrix.from_dense(dense, 2016), paths)
    np.testing.assert_allclose(out.row_sums(), [1.0, 2.0, 3.0], rtol=1e-15)


# ---- stages 2 and 3 --------------------------------------------------------

@pytest.fixture
def two_state():
    h = build_hierarchy([("a1", "Ta", "Ca", "A"), ("a2", "Ta", "Ca", "A"), ("b1", "Tb", "Cb", "B")])
    return h


def test_state_movers_examples(two_state, rng):
    h = two_state
    dense = rng.integers(1, 20, (3, 3)).astype(float)  # exact sums, so S - R == off-diagonal sum
    m = FlowMatrix.from_dense(dense)
    part = h.partition("state")
    d, o = split_diag_offdiag(m, part)
    cs = ConstraintSet(2015, state_stayers=dict(zip(part.labels, d)), state_pops=dict(zip(part.labels, d + o)))
    out, rec = hz.scale_state_stayers_movers(m, cs, h)
    assert out.identical(m)
    # R_A = half the current diagonal sum
    cs = ConstraintSet(2015, state_stayers={"A": d[0] / 2, "B": 7.0}, state_pops={"A": d[0] / 2 + 3.0, "B": 9.0})
    out, rec = hz.scale_state_stayers_movers(m, cs, h)
    np.testing.assert_allclose(out.toarray()[[0, 1], [0, 1]], dense[[0, 1], [0, 1]] / 2, rtol=1e-15)
    d2, o2 = split_diag_offdiag(out, part)
    np.testing.assert_allclose(d2, [d[0] / 2, 7.0], rtol=1e-9)
    np.testing.assert_allclose(o2, [3.0, 2.0], rtol=1e-9)
    assert rec.max_violation <= 1e-9


def test_state_flows_examples(rng):
    h = build_hierarchy([(f"g{k}", f"T{k}", f"C{k}", f"S{k // 2}") for k in range(6)])
    part = h.partition("state")
    dense = rng.random((6, 6)) + 0.1
    m = FlowMatrix.from_dense(dense)
    table = block_sum(m, part, part)
    F = {(part.labels[i], part.labels[j]): table[i, j] for i in range(3) for j in range(3)}
    assert hz.scale_state_flows(m, ConstraintSet(2015, state_flows=F), h)[0].identical(m)
    F = {("S0", "S1"): 5.0, ("S2", "S2"): 1.0, ("S1", "S0"): 2.5}
    out, _ = hz.scale_state_flows(m, ConstraintSet(2015, state_flows=F), h)
    after = block_sum(out, part, part)
    for (r, s), v in F.items():
        assert after[part.block(r), part.block(s)] == pytest.approx(v, rel=1e-9)
    # zero targets keep their block verbatim
    untouched = np.ones((3, 3), bool)
    for r, s in F:
        untouched[part.block(r), part.block(s)] = False
    rows, cols = np.nonzero(np.ones((6, 6)))
    for i, j in zip(rows, cols):
        if untouched[part.assignment[i], part.assignment[j]]:
            assert out.toarray()[i, j] == dense[i, j]


# ---- IPF -------------------------------------------------------------------

def _random_ipf_case(rng):
    n = int(rng.integers(4, 11))
    nb = int(rng.integers(2, 4))
    groups = np.sort(np.r_[np.arange(nb), rng.integers(0, nb, n - nb)])
    M = rng.uniform(0.1, 10.0, (n, n))
    Pp = rng.uniform(10, 100, nb)
    Pc = rng.uniform(10, 100, nb)
    Pc *= Pp.sum() / Pc.sum()
    part = BlockPartition("county", tuple(f"c{k}" for k in range(nb)), groups)
    return M, groups, Pp, Pc, part


def test_ipf_matches_dense_oracle(rng):
    for _ in range(10):
        M, groups, Pp, Pc, part = _random_ipf_case(rng)
        its = int(rng.integers(1, 40))
        out, rep = hz.ipf_to_county_pops(FlowMatrix.from_dense(M), Pp, Pc, part, max_iter=its, tol=0.0)
        assert rep.iterations == its and len(rep.l1) == its
        want = oracles.dense_ipf(M, groups.tolist(), Pp, Pc, its)
        np.testing.assert_allclose(out.toarray(), want, rtol=1e-10, atol=0)


def test_ipf_fixed_point_and_rank_one():
    M = np.array([[4.0, 1.0, 2.0, 3.0], [1.0, 5.0, 2.0, 2.0], [3.0, 3.0, 1.0, 1.0], [2.0, 1.0, 4.0, 3.0]])
    part = BlockPartition("county", ("a", "b"), np.array([0, 0, 1, 1]))
    m = FlowMatrix.from_dense(M)
    t = block_sum(m, part, part)
    out, rep = hz.ipf_to_county_pops(m, t.sum(axis=1), t.sum(axis=0), part)
    assert rep.iterations == 2 and rep.converged
    np.testing.assert_allclose(out.toarray(), M, rtol=1e-15)
    # uniform matrix converges to the independence table at block level
    u = FlowMatrix.from_dense(np.ones((4, 4)))
    Pp, Pc = np.array([30.0, 70.0]), np.array([60.0, 40.0])
    out, rep = hz.ipf_to_county_pops(u, Pp, Pc, part, tol=1e-12)
    np.testing.assert_allclose(block_sum(out, part, part), np.outer(Pp, Pc) / 100.0, rtol=1e-10)
    again, rep2 = hz.ipf_to_county_pops(out, Pp, Pc, part)
    assert rep2.iterations <= 2 and np.allclose(again.data, out.data, rtol=1e-9)


def test_ipf_marginal_checks():
    part = BlockPartition("county", ("a", "b"), np.array([0, 1]))
    m = FlowMatrix.from_dense(np.ones((2, 2)))
    with pytest.raises(InconsistentMarginals):
        hz.ipf_to_county_pops(m, [1.0, 1.0], [1.0, 1.1], part)
    # tiny gaps are absorbed by rescaling P_prev
    out, rep = hz.ipf_to_county_pops(m, [1.0, 1.0 + 1e-7], [1.0, 1.0], part, tol=1e-14)
    assert rep.row_violation < 1e-9 and rep.col_violation < 1e-9


def test_ipf_zero_block_reported():
    part = BlockPartition("county", ("a", "b"), np.array([0, 1]))
    m = FlowMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 0.0]]))
    out, rep = hz.ipf_to_county_pops(m, [1.0, 1.0], [1.0, 1.0], part, max_iter=4)
    assert any(s["block"] == "b" for s in rep.skipped)
    assert out.pattern_equal(m)


def test_ipf_trace_decreases_below_tol(rng):
    M, groups, Pp, Pc, part = _random_ipf_case(rng)
    tol = 1e-9 * Pc.sum()
    _, rep = hz.ipf_to_county_pops(FlowMatrix.from_dense(M), Pp, Pc, part, tol=tol)
    assert rep.converged and rep.l1[-1] < tol and rep.iterations % 2 == 0


# ---- pipeline --------------------------------------------------------------

def _six_cbg_case(small_h, rng):
    truth = FlowMatrix.from_dense(rng.uniform(1, 20, (6, 6)) + np.diag(rng.uniform(100, 200, 6)), 2015)
    sp_, cp = small_h.partition("state"), small_h.partition("county")
    d, o = split_diag_offdiag(truth, sp_)
    st = block_sum(truth, sp_, sp_)
    ct = block_sum(truth, cp, cp)
    cs = ConstraintSet(
        2015,
        state_stayers=dict(zip(sp_.labels, d)),
        state_pops=dict(zip(sp_.labels, d + o)),
        state_flows={(a, b): st[i, j] for i, a in enumerate(sp_.labels) for j, b in enumerate(sp_.labels)},
        county_pops_prev=dict(zip(cp.labels, ct.sum(axis=1))),
        county_pops_curr=dict(zip(cp.labels, ct.sum(axis=0))),
        adjusted=True,
    )
    raw = truth.with_data(truth.data * rng.lognormal(0, 0.3, truth.nnz))
    return truth, raw, cs, PopulationPaths.from_targets(truth.row_sums(), 2014)


def test_pipeline_six_cbg(small_h, rng):
    truth, raw, cs, paths = _six_cbg_case(small_h, rng)
    out, rep = hz.harmonize(raw, cs, paths, small_h, HarmonizerOptions(tol=1e-12 * truth.total()))
    cp = small_h.partition("county")
    t = block_sum(out, cp, cp)
    np.testing.assert_allclose(t.sum(axis=0), [cs.county_pops_curr[c] for c in cp.labels], rtol=1e-9)
    np.testing.assert_allclose(t.sum(axis=1), [cs.county_pops_prev[c] for c in cp.labels], rtol=1e-9)
    assert rep.stage_counts == {"cbg_populations": 1, "state_movers": 1, "state_flows": 1, "county_ipf": 1}
    stages = [r.stage for r in rep.records]
    assert stages[:3] == ["cbg_populations", "state_movers", "state_flows"]
    assert all(s == "county_ipf" for s in stages[3:])
    assert out.pattern_equal(raw) and np.all(out.data > 0)
    # earlier-stage marginals approximately held
    sp_ = small_h.partition("state")
    d, _ = split_diag_offdiag(out, sp_)
    np.testing.assert_allclose(d, [cs.state_stayers[s] for s in sp_.labels], rtol=0.2)


def test_all_stages_disabled_is_identity(small_h, rng):
    _, raw, cs, paths = _six_cbg_case(small_h, rng)
    off = HarmonizerOptions(False, False, False, False)
    out, rep = hz.harmonize(raw, cs, None, small_h, off)
    assert out.identical(raw) and rep.records == []


def test_held_out_options():
    o = HarmonizerOptions.held_out("cbg")
    assert not o.cbg_stage and o.state_movers_stage and o.county_ipf_stage
    o = HarmonizerOptions.held_out("state")
    assert o.cbg_stage and not o.state_movers_stage and not o.state_flows_stage


def test_report_jsonl(tmp_path, small_h, rng):
    _, raw, cs, paths = _six_cbg_case(small_h, rng)
    _, rep = hz.harmonize(raw, cs, paths, small_h)
    p = tmp_path / "r.jsonl"
    rep.write_jsonl(p)
    import json

    lines = [json.loads(x) for x in p.read_text().splitlines()]
    assert len(lines) == len(rep.records)
    assert set(lines[0]) == {"stage", "iteration", "l1", "max_violation", "skipped", "year"}
