"""Sparse storage and a robust direct solver.

Everything downstream produces either symmetric positive (semi)definite
FEM matrices, nonsymmetric convection-diffusion matrices, or indefinite
KKT saddle systems.  All of them are handled by one code path: sparse
LU with partial pivoting and a fill-reducing column ordering, wrapped
with an iterative-refinement step and a recomputed residual so reported
accuracy is measured, never assumed.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SparseMatrix",
    "LinearSolution",
    "SingularMatrixError",
    "assemble_from_triplets",
    "factorize",
    "solve_direct",
]

# target of the relative residual |Ax-b| <= RESIDUAL_RTOL*(|A|_F |x| + |b|)
RESIDUAL_RTOL = 1e-10
_MAX_REFINEMENTS = 2


class SingularMatrixError(RuntimeError):
    """Raised when LU factorization meets a zero pivot.

    Attributes
    ----------
    pivot_index : int
        Index of the failing pivot, or -1 when it could not be located.
    """

    def __init__(self, message, pivot_index=-1):
        super().__init__(message)
        self.pivot_index = int(pivot_index)


class SparseMatrix:
    """Compressed sparse row matrix with sorted, duplicate-free columns."""

    def __init__(self, csr):
        csr = sp.csr_matrix(csr)
        csr.sum_duplicates()
        csr.sort_indices()
        self.shape = csr.shape
        self.indptr = csr.indptr
        self.indices = csr.indices
        self.data = csr.data
        self._csr = csr

    def to_scipy(self):
        return self._csr

    def __matmul__(self, other):
        return self._csr @ other


class LinearSolution:
    """Solve result carrying the recomputed residual norm.

    Attributes
    ----------
    x : ndarray
    residual_norm : float
        The two-norm of b - A x, recomputed from the returned x.
    pivot_growth : float
        max|U| / max|A|, a cheap stability estimate of the factorization.
    """

    def __init__(self, x, residual_norm, pivot_growth):
        self.x = x
        self.residual_norm = float(residual_norm)
        self.pivot_growth = float(pivot_growth)


def assemble_from_triplets(triplets, shape):
    """Assemble a SparseMatrix from (row, col, value) triplets.

    Duplicate entries are summed.  The result does not depend on the
    order of the triplets beyond floating point associativity of the
    canonical CSR summation, which scipy performs in sorted index order,
    so identical triplet multisets give identical matrices.

    Parameters
    ----------
    triplets : iterable of (int, int, float) or (rows, cols, values) arrays
    shape : (int, int)

    Returns
    -------
    SparseMatrix
    """
    if isinstance(triplets, tuple) and len(triplets) == 3:
        rows, cols, vals = (np.asarray(a) for a in triplets)
    else:
        trip = list(triplets)
        if trip:
            rows, cols, vals = (np.asarray(a) for a in zip(*trip))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
    if rows.size:
        if rows.min() < 0 or rows.max() >= shape[0]:
            raise IndexError("triplet row index out of range")
        if cols.min() < 0 or cols.max() >= shape[1]:
            raise IndexError("triplet column index out of range")
    coo = sp.coo_matrix((vals.astype(float), (rows, cols)), shape=shape)
    return SparseMatrix(coo.tocsr())


def _as_csc(A):
    if isinstance(A, SparseMatrix):
        A = A.to_scipy()
    return sp.csc_matrix(A)


def _locate_zero_pivot(A):
    """Best-effort pivot index for a singular matrix (dense fallback)."""
    n = A.shape[0]
    # structurally empty row or column is the cheapest certificate
    csr = sp.csr_matrix(A)
    empty_rows = np.flatnonzero(np.diff(csr.indptr) == 0)
    if empty_rows.size:
        return int(empty_rows[0])
    csc = sp.csc_matrix(A)
    empty_cols = np.flatnonzero(np.diff(csc.indptr) == 0)
    if empty_cols.size:
        return int(empty_cols[0])
    if n > 4096:
        return -1
    import scipy.linalg as dla
    lu, _ = dla.lu_factor(A.toarray(), check_finite=False)
    diag = np.abs(np.diag(lu))
    scale = max(np.abs(A.data).max(), 1.0) if A.nnz else 1.0
    bad = np.flatnonzero(diag <= n * np.finfo(float).eps * scale)
    return int(bad[0]) if bad.size else -1


class Factorization:
    """Cached sparse LU of one matrix, reusable over many right-hand sides."""

    def __init__(self, A):
        csc = _as_csc(A)
        if csc.shape[0] != csc.shape[1]:
            raise ValueError("matrix must be square, got %r" % (csc.shape,))
        try:
            self._lu = spla.splu(csc)
        except RuntimeError as exc:
            idx = _locate_zero_pivot(csc)
            raise SingularMatrixError(
                "LU factorization failed (%s); failing pivot index %d" % (exc, idx),
                pivot_index=idx) from exc
        self._csc = csc
        umax = np.abs(self._lu.U.data).max() if self._lu.U.nnz else 0.0
        amax = np.abs(csc.data).max() if csc.nnz else 1.0
        self.pivot_growth = umax / amax if amax > 0 else np.inf
        udiag = np.abs(self._lu.U.diagonal())
        if udiag.size and udiag.min() == 0.0:
            raise SingularMatrixError(
                "numerically singular matrix; failing pivot index %d"
                % int(np.argmin(udiag)),
                pivot_index=int(np.argmin(udiag)))
        self._normA = np.sqrt((csc.data ** 2).sum())

    @property
    def shape(self):
        return self._csc.shape

    def solve(self, b):
        """Solve to RESIDUAL_RTOL with at most two refinement steps."""
        x, _ = self.solve_with_residual(b)
        return x

    def solve_with_residual(self, b):
        b = np.asarray(b, dtype=float)
        x = self._lu.solve(b)
        r = b - self._csc @ x
        for _ in range(_MAX_REFINEMENTS):
            rnorm = np.linalg.norm(r)
            bound = RESIDUAL_RTOL * (self._normA * np.linalg.norm(x)
                                     + np.linalg.norm(b))
            if rnorm <= bound:
                break
            x = x + self._lu.solve(r)
            r = b - self._csc @ x
        return x, np.linalg.norm(r)


def factorize(A):
    """Factorize once for repeated solves (time stepping, many targets)."""
    return Factorization(A)


def solve_direct(A, b):
    """Direct sparse solve with measured residual.

    Parameters
    ----------
    A : SparseMatrix or scipy sparse matrix
        Square; may be symmetric indefinite or nonsymmetric.
    b : ndarray

    Returns
    -------
    LinearSolution

    Raises
    ------
    SingularMatrixError
        For structurally or numerically singular input, with the failing
        pivot index when it can be determined.
    """
    f = Factorization(A)
    x, rnorm = f.solve_with_residual(np.asarray(b, dtype=float))
    return LinearSolution(x, rnorm, f.pivot_growth)
