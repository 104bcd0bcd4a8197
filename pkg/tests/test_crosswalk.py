import numpy as np
import pytest
import scipy.sparse as sp

import oracles
from migrate_fuse.crosswalk import (
    CrosswalkMatrix,
    ZipAssignment,
    apply_crosswalk,
    build_crosswalk,
    read_exact,
    read_fuzzy,
)
from migrate_fuse.errors import InputError, UnknownArea
from migrate_fuse.flows import FlowMatrix
from migrate_fuse.geo import build_hierarchy
from migrate_fuse.records import AddressMatrix


@pytest.fixture
def h():
    return build_hierarchy(
        [("g1", "T1", "C", "S"), ("g2", "T1", "C", "S"), ("g3", "T2", "C", "S"), ("g4", "T3", "C", "S")]
    )


def row(g: CrosswalkMatrix, addr):
    return g.csr.toarray()[g.address_ids.index(addr)]


def test_exact_row(h):
    g = build_crosswalk({"x": "g3"}, [], {}, h)
    np.testing.assert_array_equal(row(g, "x"), [0, 0, 1, 0])
    with pytest.raises(UnknownArea):
        build_crosswalk({"x": "nope"}, [], {}, h)


def test_population_proportional(h):
    g = build_crosswalk({}, [ZipAssignment("x", "z", {"T1": 1.0})], {"g1": 100, "g2": 300}, h)
    np.testing.assert_allclose(row(g, "x"), [0.25, 0.75, 0, 0], rtol=1e-15)


def test_two_stage_allocation():
    h = build_hierarchy([("a", "T1", "C", "S"), ("b", "T1", "C", "S"), ("c", "T2", "C", "S")])
    g = build_crosswalk({}, [ZipAssignment("x", "z", {"T1": 0.6, "T2": 0.4})], {"a": 50, "b": 50, "c": 200}, h)
    np.testing.assert_allclose(row(g, "x"), [0.3, 0.3, 0.4], rtol=1e-15)


def test_zero_population_fallbacks(h):
    # T2's only CBG is empty: its weight moves to T1
    g = build_crosswalk({}, [ZipAssignment("x", "z", {"T1": 0.5, "T2": 0.5})], {"g1": 1, "g2": 1}, h)
    np.testing.assert_allclose(row(g, "x"), [0.5, 0.5, 0, 0])
    # no candidate CBG has people: uniform over candidates
    g = build_crosswalk({}, [ZipAssignment("x", "z", {"T1": 0.9, "T3": 0.1})], {}, h)
    np.testing.assert_allclose(row(g, "x"), [1 / 3, 1 / 3, 0, 1 / 3])
    with pytest.raises(InputError):
        ZipAssignment("x", "z", {"T1": 0.0})
    with pytest.raises(UnknownArea):
        build_crosswalk({}, [ZipAssignment("x", "z", {"T9": 1.0})], {}, h)


def test_exact_precedence_and_missing(h, caplog):
    g = build_crosswalk({"x": "g4"}, [ZipAssignment("x", "z", {"T1": 1.0})], {"g1": 1}, h, ["x", "y"])
    np.testing.assert_array_equal(row(g, "x"), [0, 0, 0, 1])
    assert g.unmapped == ("y",)
    assert "no CBG assignment" in caplog.text


def test_exact_only_is_relabeling(h):
    g = build_crosswalk({"p": "g2", "q": "g4", "r": "g1"}, [], {}, h, ["p", "q", "r"])
    A = np.array([[5.0, 1.0, 0.0], [0.0, 3.0, 2.0], [4.0, 0.0, 7.0]])
    E = apply_crosswalk(AddressMatrix(("p", "q", "r"), FlowMatrix.from_dense(A)), g).toarray()
    perm = [1, 3, 0]
    want = np.zeros((4, 4))
    want[np.ix_(perm, perm)] = A
    np.testing.assert_array_equal(E, want)


def test_fuzzy_stayer_lands_on_diagonal(h):
    g = build_crosswalk({}, [ZipAssignment("x", "z", {"T1": 1.0})], {"g1": 100, "g2": 300}, h)
    E = apply_crosswalk(AddressMatrix(("x",), FlowMatrix.from_dense([[1.0]])), g).toarray()
    want = np.zeros((4, 4))
    want[0, 0], want[1, 1] = 0.25, 0.75
    np.testing.assert_array_equal(E, want)


def test_fuzzy_mover_spreads_over_subblock():
    h = build_hierarchy([(f"g{k}", f"T{k // 2}", "C", "S") for k in range(4)])
    pops = {f"g{k}": 10.0 for k in range(4)}
    fz = [ZipAssignment("a", "za", {"T0": 1.0}), ZipAssignment("b", "zb", {"T1": 1.0})]
    g = build_crosswalk({}, fz, pops, h)
    A = FlowMatrix.from_dense([[0.0, 1.0], [0.0, 0.0]])
    E = apply_crosswalk(AddressMatrix(("a", "b"), A), g).toarray()
    want = np.zeros((4, 4))
    want[:2, 2:] = 0.25
    np.testing.assert_array_equal(E, want)


def test_random_pairs_match_dense_oracle(rng):
    for _ in range(20):
        na, nc = rng.integers(3, 15), rng.integers(2, 8)
        A = rng.random((na, na)) * (rng.random((na, na)) < 0.4)
        G = rng.random((na, nc)) * (rng.random((na, nc)) < 0.5)
        G[np.arange(na), rng.integers(0, nc, na)] += 0.1
        G /= G.sum(axis=1, keepdims=True)
        ids = tuple(f"a{k}" for k in range(na))
        g = CrosswalkMatrix(ids, nc, sp.csr_array(G))
        E = apply_crosswalk(AddressMatrix(ids, FlowMatrix.from_dense(A)), g).toarray()
        np.testing.assert_allclose(E, oracles.dense_crosswalk(A, G), rtol=1e-12, atol=1e-15)


def test_non_stochastic_row_detected():
    G = np.array([[0.5, 0.5], [0.7, 0.4]])
    with pytest.raises(InputError):
        CrosswalkMatrix(("a", "b"), 2, sp.csr_array(G))
    g = CrosswalkMatrix(("a", "b"), 2, sp.csr_array(G), validate=False)
    assert not g.is_row_stochastic()
    # and the broken row does violate conservation
    A = FlowMatrix.from_dense([[1.0, 1.0], [1.0, 1.0]])
    E = apply_crosswalk(AddressMatrix(("a", "b"), A), g)
    assert abs(E.total() - A.total()) > 1e-3


def test_alignment_by_id(h):
    g = build_crosswalk({"p": "g1", "q": "g2"}, [], {}, h, ["q", "p"])
    A = FlowMatrix.from_dense([[0.0, 2.0], [0.0, 0.0]])  # p -> q
    E = apply_crosswalk(AddressMatrix(("p", "q"), A), g).toarray()
    assert E[0, 1] == 2.0 and E.sum() == 2.0


def test_readers(tmp_path):
    (tmp_path / "e.csv").write_text("address_id,cbg_id\nx,g1\n")
    (tmp_path / "f.csv").write_text("address_id,zip,tract_id,weight\ny,z,T1,0.6\ny,z,T2,0.4\n")
    assert read_exact(tmp_path / "e.csv") == {"x": "g1"}
    fz = read_fuzzy(tmp_path / "f.csv")
    assert fz[0].address_id == "y" and dict(fz[0].tract_weights) == {"T1": 0.6, "T2": 0.4}
