"""Compressed-row sparse matrices and the linear solvers used by the time stepper.

Matrices are stored in canonical CSR form (sorted, duplicate-free columns in
every row).  Factorizations and Krylov iterations are delegated to SciPy; this
module owns the data layout, the deterministic triplet reduction and the
post-solve residual checks.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

LU_TOLERANCE = 1e-12


class ConstructionError(ValueError):
    """Raised when a sparse matrix cannot be built from the given entries."""


class FactorizationError(RuntimeError):
    """Raised when an LU factorization hits a zero pivot."""

    def __init__(self, message: str, pivot: Optional[int] = None):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.row_offsets) != self.n_rows + 1:
            raise ConstructionError("row_offsets must have n_rows + 1 entries")
        if len(self.values) != len(self.col_indices) or len(self.values) != self.row_offsets[-1]:
            raise ConstructionError("values/col_indices length mismatch with row_offsets")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_scipy(cls, A) -> "SparseMatrix":
        A = sp.csr_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.shape[0], A.shape[1], A.indptr.astype(np.int64),
                   A.indices.astype(np.int64), A.data.astype(float))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets),
                             shape=self.shape)

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n_cols:
            raise ValueError(f"vector length {x.shape[0]} != n_cols {self.n_cols}")
        return self.to_scipy() @ x

    def __matmul__(self, x):
        return self.matvec(x)

    @property
    def T(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy().T)


@dataclass
class Triplets:
    """Coordinate-format entries; duplicates are summed on conversion."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @classmethod
    def from_entries(cls, entries: Iterable[Tuple[int, int, float]]) -> "Triplets":
        entries = list(entries)
        if not entries:
            return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        r, c, v = zip(*entries)
        return cls(np.asarray(r, np.int64), np.asarray(c, np.int64), np.asarray(v, float))

    @classmethod
    def concatenate(cls, parts: Sequence["Triplets"]) -> "Triplets":
        return cls(np.concatenate([p.rows for p in parts]),
                   np.concatenate([p.cols for p in parts]),
                   np.concatenate([p.values for p in parts]))


@dataclass(frozen=True)
class SolveReport:
    converged: bool
    iterations: int
    residual_norm: float


def triplets_to_csr(t: Union[Triplets, Iterable[Tuple[int, int, float]]],
                    n_rows: int, n_cols: int) -> SparseMatrix:
    """Sum duplicate entries and return the canonical CSR matrix.

    Entries are sorted by (row, col, value) before the duplicate reduction, so
    the floating-point summation order, and therefore the result, does not
    depend on the order in which entries were supplied.
    """
    if not isinstance(t, Triplets):
        t = Triplets.from_entries(t)
    rows = np.asarray(t.rows, np.int64).ravel()
    cols = np.asarray(t.cols, np.int64).ravel()
    vals = np.asarray(t.values, float).ravel()
    if not (len(rows) == len(cols) == len(vals)):
        raise ConstructionError("rows, cols and values differ in length")
    if len(rows) and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise ConstructionError(f"triplet index out of bounds for a {n_rows}x{n_cols} matrix")

    order = np.lexsort((vals, cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if len(rows):
        key = rows * n_cols + cols
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        summed = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
    else:
        summed = vals
    offsets = np.zeros(n_rows + 1, np.int64)
    np.add.at(offsets, rows + 1, 1)
    return SparseMatrix(n_rows, n_cols, np.cumsum(offsets), cols, summed)


def _as_scipy(A) -> sp.csr_matrix:
    if isinstance(A, SparseMatrix):
        return A.to_scipy()
    return sp.csr_matrix(A)


def relative_residual(A, x: np.ndarray, b: np.ndarray) -> float:
    A = _as_scipy(A)
    nb = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return r / nb if nb > 0 else r


def _find_zero_pivot(A: sp.csr_matrix) -> Optional[int]:
    empty_rows = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty_rows):
        return int(empty_rows[0])
    empty_cols = np.flatnonzero(np.bincount(A.indices, minlength=A.shape[1]) == 0)
    if len(empty_cols):
        return int(empty_cols[0])
    return None


def lu_factor(A):
    """SuperLU factorization with a minimum-degree ordering of A^T + A.

    Diagonal pivots are preferred whenever they are nonzero.  Threshold
    pivoting wrecks the fill-reducing ordering on the monolithic systems,
    whose condensed pressure diagonal is tiny but nonzero and whose
    symmetric part is definite up to row signs.  If that factorization fails,
    partial pivoting with COLAMD is tried.
    """
    A = _as_scipy(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"LU needs a square matrix, got {A.shape}")
    A = A.tocsc()
    try:
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0)
    except RuntimeError:
        pass
    try:
        return spla.splu(A)
    except RuntimeError as exc:
        pivot = _find_zero_pivot(A)
        where = f" (zero pivot at index {pivot})" if pivot is not None else ""
        raise FactorizationError(f"sparse LU failed: {exc}{where}", pivot=pivot) from exc


def sparse_lu_solve(A, b: np.ndarray, refine: int = 2) -> np.ndarray:
    """Solve ``A x = b`` by sparse LU.

    Up to ``refine`` steps of iterative refinement are applied when the relative
    residual exceeds 1e-12; a warning is issued if it still does.
    """
    A = _as_scipy(A)
    b = np.asarray(b, dtype=float)
    lu = lu_factor(A)
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise FactorizationError("sparse LU produced non-finite values", pivot=_find_zero_pivot(A))
    res = relative_residual(A, x, b)
    for _ in range(refine):
        if res <= LU_TOLERANCE:
            break
        x = x + lu.solve(b - A @ x)
        res = relative_residual(A, x, b)
    if res > LU_TOLERANCE:
        warnings.warn(f"sparse LU relative residual {res:.3e} above {LU_TOLERANCE:g}", RuntimeWarning)
    return x


def ilu0(A):
    """Incomplete LU without extra fill, as a SciPy LinearOperator."""
    A = _as_scipy(A).tocsc()
    ilu = spla.spilu(A, drop_tol=0.0, fill_factor=1.0)
    return spla.LinearOperator(A.shape, matvec=ilu.solve)


def ilut(A, drop_tol: float = 1e-5, fill_factor: float = 10.0):
    """Threshold incomplete LU with partial pivoting, for saddle-point matrices with zero diagonal blocks."""
    A = _as_scipy(A).tocsc()
    ilu = spla.spilu(A, drop_tol=drop_tol, fill_factor=fill_factor, permc_spec="COLAMD")
    return spla.LinearOperator(A.shape, matvec=ilu.solve)


def gmres_solve(A, b: np.ndarray, tol: float = 1e-10, restart: int = 50,
                max_iter: int = 1000, preconditioner=None,
                x0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolveReport]:
    """Restarted GMRES.

    ``preconditioner`` may be ``None``, ``"ilu0"``, ``"ilut"`` or any operator accepted by
    SciPy as ``M``.  Convergence is judged on the recomputed unpreconditioned
    relative residual, never on the solver's internal estimate.
    """
    A = _as_scipy(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"GMRES needs a square matrix, got {A.shape}")
    M = {"ilu0": ilu0, "ilut": ilut}[preconditioner](A) if isinstance(preconditioner, str) else preconditioner

    counter = {"it": 0}

    def callback(_):
        counter["it"] += 1

    x = np.zeros_like(b) if x0 is None else np.asarray(x0, float).copy()
    inner_tol = tol
    res = relative_residual(A, x, b)
    # The preconditioned residual can be smaller than the true one; tighten and retry.
    for _ in range(4):
        if res <= tol or counter["it"] >= max_iter:
            break
        x, _info = spla.gmres(A, b, x0=x, rtol=inner_tol, atol=0.0, restart=restart,
                              maxiter=max(1, (max_iter - counter["it"]) // restart + 1),
                              M=M, callback=callback, callback_type="pr_norm")
        res = relative_residual(A, x, b)
        inner_tol *= 0.1
    report = SolveReport(converged=bool(res <= tol), iterations=counter["it"], residual_norm=float(res))
    if not report.converged:
        log.debug("GMRES stopped at relative residual %.3e after %d iterations", res, counter["it"])
    return x, report
