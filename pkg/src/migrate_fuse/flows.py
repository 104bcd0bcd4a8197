"""Sparse CBG-by-CBG flow matrices and block primitives.

Every harmonization stage is a block scaling, and every check is a block
sum, so these two primitives are the whole numerical core. Storage is CSR
with sorted column indices; the entry-wise row index array is cached so
block keys can be formed without a per-call expansion.

Block sums and L1 distances accumulate in extended precision
(``np.longdouble``) after grouping, which keeps convergence checks stable
and makes the result independent of how entries are chunked.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InputError, NonPositiveFactor, NumericalError, PartitionMismatch

DIAG_MODES = ("all", "only", "exclude")


@dataclass(frozen=True, eq=False)
class BlockPartition:
    level: str
    labels: tuple
    assignment: np.ndarray  # CBG index -> block index

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if a.size and (a.min() < 0 or a.max() >= len(self.labels)):
            raise InputError("block assignment out of range")

    @property
    def n_blocks(self) -> int:
        return len(self.labels)

    @property
    def n(self) -> int:
        return self.assignment.size

    def block(self, label) -> int:
        return self.labels.index(label)

    def members(self, block: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == block)

    @classmethod
    def identity(cls, n: int) -> "BlockPartition":
        return cls("identity", tuple(range(n)), np.arange(n))

    @classmethod
    def single(cls, n: int) -> "BlockPartition":
        return cls("all", ("all",), np.zeros(n, dtype=np.int64))


class Grouper:
    """Reusable grouped sum for a fixed key vector (sort once, sum many times)."""

    def __init__(self, keys: np.ndarray, n_groups: int):
        keys = np.asarray(keys)
        self.n_groups = n_groups
        self.size = keys.size
        self.order = np.argsort(keys, kind="stable")
        k = keys[self.order]
        self.starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]]) if k.size else np.zeros(0, np.int64)
        self.labels = k[self.starts]

    def sum(self, values: np.ndarray) -> np.ndarray:
        """Per-group sums with extended-precision accumulation; returns float64."""
        out = np.zeros(self.n_groups, dtype=np.longdouble)
        if self.size:
            out[self.labels] = np.add.reduceat(values[self.order].astype(np.longdouble), self.starts)
        return out.astype(np.float64)


def group_sum(keys: np.ndarray, values: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group sums with extended-precision accumulation; returns float64."""
    return Grouper(keys, n_groups).sum(values)


def precise_sum(values: np.ndarray) -> float:
    return float(np.sum(np.asarray(values, dtype=np.longdouble)))


class FlowMatrix:
    """Square non-negative sparse matrix of expected person counts.

    Entry (i, j) counts persons resident in CBG i in year ``year - 1`` and
    in CBG j in ``year``. Zero entries are never stored.
    """

    __slots__ = ("n", "year", "csr", "_rows")

    def __init__(self, csr, year: int | None = None, *, _trusted: bool = False):
        if not _trusted:
            csr = sp.csr_array(csr, dtype=np.float64)
            if csr.shape[0] != csr.shape[1]:
                raise DimensionMismatch(f"flow matrix must be square, got {csr.shape}")
            csr.sum_duplicates()
            csr.eliminate_zeros()
            csr.sort_indices()
            d = csr.data
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise InputError("flow matrix entries must be finite and non-negative")
        self.csr = csr
        self.n = csr.shape[0]
        self.year = year
        self._rows = None

    @classmethod
    def from_triplets(cls, n: int, rows, cols, values, year: int | None = None) -> "FlowMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        coo = sp.coo_array((values, (rows, cols)), shape=(n, n))
        return cls(coo.tocsr(), year)

    @classmethod
    def from_dense(cls, dense, year: int | None = None) -> "FlowMatrix":
        return cls(sp.csr_array(np.asarray(dense, dtype=np.float64)), year)

    @classmethod
    def empty(cls, n: int, year: int | None = None) -> "FlowMatrix":
        return cls(sp.csr_array((n, n), dtype=np.float64), year)

    def with_data(self, data: np.ndarray) -> "FlowMatrix":
        """Same sparsity pattern, new values (all must be finite and positive)."""
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.csr.data.shape:
            raise DimensionMismatch("data length does not match the sparsity pattern")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise NumericalError("operation produced a negative or non-finite entry")
        csr = sp.csr_array((data, self.csr.indices, self.csr.indptr), shape=self.csr.shape)
        if np.any(data == 0):
            csr = sp.csr_array(csr)
            csr.eliminate_zeros()
            return FlowMatrix(csr, self.year, _trusted=True)
        out = FlowMatrix(csr, self.year, _trusted=True)
        out._rows = self._rows
        return out

    # ---- entry views -------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self.csr.data

    @property
    def cols(self) -> np.ndarray:
        return self.csr.indices

    @property
    def rows(self) -> np.ndarray:
        if self._rows is None:
            self._rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.csr.indptr))
        return self._rows

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    def diag_mask(self) -> np.ndarray:
        return self.rows == self.cols

    def total(self) -> float:
        return precise_sum(self.data)

    def row_sums(self) -> np.ndarray:
        return group_sum(self.rows, self.data, self.n)

    def col_sums(self) -> np.ndarray:
        return group_sum(self.cols.astype(np.int64), self.data, self.n)

    def diagonal(self) -> np.ndarray:
        return self.csr.diagonal().astype(np.float64)

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def pattern_equal(self, other: "FlowMatrix") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.csr.indptr, other.csr.indptr)
            and np.array_equal(self.csr.indices, other.csr.indices)
        )

    def identical(self, other: "FlowMatrix") -> bool:
        """Bit-identical pattern and values."""
        return self.pattern_equal(other) and np.array_equal(
            self.data.view(np.uint64), other.data.view(np.uint64)
        )

    def __repr__(self) -> str:
        return f"FlowMatrix(n={self.n}, nnz={self.nnz}, year={self.year})"


def _check_partition(m: FlowMatrix, part: BlockPartition) -> None:
    if part.n != m.n:
        raise PartitionMismatch(f"partition over {part.n} CBGs, matrix of dimension {m.n}")


def block_sum(m: FlowMatrix, rows: BlockPartition, cols: BlockPartition) -> np.ndarray:
    """Dense table of entry sums over (row block, column block) pairs."""
    _check_partition(m, rows)
    _check_partition(m, cols)
    nr, nc = rows.n_blocks, cols.n_blocks
    keys = rows.assignment[m.rows] * nc + cols.assignment[m.cols]
    return group_sum(keys, m.data, nr * nc).reshape(nr, nc)


def _diag_select(m: FlowMatrix, mode: str) -> np.ndarray | None:
    if mode == "all":
        return None
    if mode == "only":
        return m.diag_mask()
    if mode == "exclude":
        return ~m.diag_mask()
    raise InputError(f"include_diagonal must be one of {DIAG_MODES}")


def scale_block(
    m: FlowMatrix,
    factor: float,
    rows: int | None = None,
    cols: int | None = None,
    include_diagonal: str = "all",
    row_part: BlockPartition | None = None,
    col_part: BlockPartition | None = None,
) -> FlowMatrix:
    """Multiply the entries of one (row block, column block) target by ``factor``.

    ``rows``/``cols`` of ``None`` mean all rows/columns. Untargeted entries
    keep their exact bits.
    """
    factor = float(factor)
    if not (np.isfinite(factor) and factor > 0):
        raise NonPositiveFactor(f"scaling factor must be positive and finite, got {factor}")
    mask = np.ones(m.nnz, dtype=bool)
    if rows is not None:
        if row_part is None:
            raise InputError("row block given without a row partition")
        _check_partition(m, row_part)
        mask &= row_part.assignment[m.rows] == rows
    if cols is not None:
        if col_part is None:
            raise InputError("column block given without a column partition")
        _check_partition(m, col_part)
        mask &= col_part.assignment[m.cols] == cols
    sel = _diag_select(m, include_diagonal)
    if sel is not None:
        mask &= sel
    data = m.data.copy()
    data[mask] *= factor
    return m.with_data(data)


def scale_entries_by_block(
    m: FlowMatrix,
    factors: np.ndarray,
    row_part: BlockPartition | None,
    col_part: BlockPartition | None,
    include_diagonal: str = "all",
) -> FlowMatrix:
    """Apply a whole table of block factors in one pass.

    ``factors`` is indexed ``[row_block, col_block]`` (or 1-D when one side
    is ``None``). Entries outside ``include_diagonal`` are left untouched;
    factors equal to 1 leave entries bit-identical.
    """
    factors = np.asarray(factors, dtype=np.float64)
    if np.any(~np.isfinite(factors)) or np.any(factors <= 0):
        raise NonPositiveFactor("block factors must be positive and finite")
    if row_part is not None and col_part is not None:
        _check_partition(m, row_part)
        _check_partition(m, col_part)
        f = factors[row_part.assignment[m.rows], col_part.assignment[m.cols]]
    elif row_part is not None:
        _check_partition(m, row_part)
        f = factors[row_part.assignment[m.rows]]
    elif col_part is not None:
        _check_partition(m, col_part)
        f = factors[col_part.assignment[m.cols]]
    else:
        f = np.full(m.nnz, float(factors))
    sel = _diag_select(m, include_diagonal)
    data = m.data.copy()
    if sel is None:
        data *= f
    else:
        data[sel] *= f[sel]
    return m.with_data(data)


def split_diag_offdiag(m: FlowMatrix, part: BlockPartition) -> tuple[np.ndarray, np.ndarray]:
    """Per column block: sum of diagonal entries and sum of off-diagonal entries."""
    _check_partition(m, part)
    dmask = m.diag_mask()
    keys = part.assignment[m.cols]
    diag = group_sum(keys[dmask], m.data[dmask], part.n_blocks)
    off = group_sum(keys[~dmask], m.data[~dmask], part.n_blocks)
    return diag, off


def l1_distance(a: FlowMatrix, b: FlowMatrix) -> float:
    if a.n != b.n:
        raise DimensionMismatch(f"dimensions {a.n} and {b.n} differ")
    if a.pattern_equal(b):
        diff = a.data - b.data
    else:
        diff = (a.csr - b.csr).tocsr().data
    return float(np.sum(np.abs(diff), dtype=np.longdouble))


def aggregate(m: FlowMatrix, part: BlockPartition) -> FlowMatrix:
    """Collapse a CBG matrix onto the blocks of ``part`` (same partition on both axes)."""
    table = block_sum(m, part, part)
    return FlowMatrix.from_dense(table, m.year)


# ---- file IO ---------------------------------------------------------------

def write_matrix(m: FlowMatrix, ids, path) -> None:
    """Sorted triplet CSV with a ``# year=<t> n=<dim>`` header line."""
    ids = list(ids)
    if len(ids) != m.n:
        raise DimensionMismatch("id list does not match matrix dimension")
    with open(path, "w", newline="") as fh:
        fh.write(f"# year={'' if m.year is None else m.year} n={m.n}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_cbg", "dest_cbg", "value"])
        for r, c, v in zip(m.rows.tolist(), m.cols.tolist(), m.data.tolist()):
            w.writerow([ids[r], ids[c], "%.17g" % v])


def read_matrix(path, ids: Iterable) -> FlowMatrix:
    ids = list(ids)
    index = {x: i for i, x in enumerate(ids)}
    year = None
    rows, cols, vals = [], [], []
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            meta = dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)
            if meta.get("year"):
                year = int(meta["year"])
            if meta.get("n") and int(meta["n"]) != len(ids):
                raise DimensionMismatch(f"{path}: n={meta['n']} but {len(ids)} ids supplied")
        else:
            fh.seek(0)
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                rows.append(index[row["origin_cbg"]])
                cols.append(index[row["dest_cbg"]])
            except KeyError as exc:
                raise InputError(f"{path}: unknown id {exc.args[0]}") from None
            vals.append(float(row["value"]))
    return FlowMatrix.from_triplets(len(ids), rows, cols, vals, year)


def read_matrix_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)
