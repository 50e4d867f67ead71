"""
Sparse complex kernels shared by all power-flow solvers.

Matrices are stored as canonical ``scipy.sparse.csr_matrix`` objects: column
indices sorted within each row and no duplicate entries. Explicit zeros are
kept, so the stored pattern of an admittance matrix always contains its full
diagonal.

Main functions:
- from_triplets: Build a canonical CSR matrix from coordinate triplets, summing duplicates.
- spmv: Sparse matrix-vector product.
- transpose_apply: Product with the transpose, without forming the transpose.
- block_diag: Compose square blocks into a block-diagonal matrix.
- dense_lu_solve: Dense LU solve with partial pivoting and a singularity check.

All kernels accumulate in stored order, so repeated and batched evaluations are
bitwise reproducible.
"""

import warnings

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

# Relative pivot magnitude below which a dense matrix is considered singular
SINGULAR_PIVOT_RTOL = 1e-14


class SingularMatrixError(np.linalg.LinAlgError):
    """Matrix is singular to working precision."""


def from_triplets(rows, cols, values, shape):
    """
    Build a canonical complex CSR matrix from coordinate triplets.

    Duplicate (row, col) pairs are summed, in the order in which they are given,
    and column indices are sorted within each row.

    Parameters
    ----------
    rows : array-like of int
        Row indices.
    cols : array-like of int
        Column indices.
    values : array-like of complex
        Entry values.
    shape : tuple of int
        (n_rows, n_cols).

    Returns
    -------
    scipy.sparse.csr_matrix
        Canonical complex matrix.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=complex)

    if not (rows.shape == cols.shape == values.shape):
        msg = f"Triplet arrays differ in length: {rows.shape}, {cols.shape}, {values.shape}"
        raise ValueError(msg)

    if rows.size and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]):
        msg = f"Triplet index out of bounds for shape {shape}"
        raise ValueError(msg)

    mat = sp.coo_matrix((values, (rows, cols)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def spmv(a, x):
    """
    Compute the sparse matrix-vector product y = A x.

    Parameters
    ----------
    a : scipy.sparse.csr_matrix
        Matrix of shape (n_rows, n_cols).
    x : array-like
        Vector of length n_cols.

    Returns
    -------
    numpy.ndarray
        Vector of length n_rows.
    """
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != a.shape[1]:
        msg = f"Dimension mismatch: matrix has {a.shape[1]} columns, vector has shape {x.shape}"
        raise ValueError(msg)
    return a @ x


def transpose_apply(a, x):
    """
    Compute y = A^T x without materializing the transpose.

    The transpose of a CSR matrix is a zero-copy CSC view on the same arrays.
    Its product scans the stored rows of `a` in order, which fixes the
    accumulation order.

    Parameters
    ----------
    a : scipy.sparse.csr_matrix
        Matrix of shape (n_rows, n_cols).
    x : array-like
        Vector of length n_rows.

    Returns
    -------
    numpy.ndarray
        Vector of length n_cols.
    """
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != a.shape[0]:
        msg = f"Dimension mismatch: matrix has {a.shape[0]} rows, vector has shape {x.shape}"
        raise ValueError(msg)
    return a.T @ x


def block_diag(blocks):
    """
    Combine square sparse matrices into one block-diagonal matrix.

    Block k occupies the rows and columns offset by the summed dimensions of
    the blocks before it. The number of stored entries is the sum over blocks.

    Parameters
    ----------
    blocks : list of scipy.sparse.csr_matrix
        Square matrices.

    Returns
    -------
    scipy.sparse.csr_matrix
        Block-diagonal matrix.
    """
    if len(blocks) == 0:
        msg = "block_diag needs at least one block"
        raise ValueError(msg)

    for i, block in enumerate(blocks):
        if block.shape[0] != block.shape[1]:
            msg = f"Block {i} is not square: shape {block.shape}"
            raise ValueError(msg)

    if len(blocks) == 1:
        return sp.csr_matrix(blocks[0], copy=True)

    out = sp.block_diag(blocks, format="csr")
    out.sort_indices()
    return out


def dense_lu_solve(a, b):
    """
    Solve the dense linear system A x = b by LU decomposition with partial pivoting.

    Parameters
    ----------
    a : numpy.ndarray
        Square real matrix of shape (n, n).
    b : array-like
        Right hand side of length n.

    Returns
    -------
    numpy.ndarray
        Solution x.

    Raises
    ------
    SingularMatrixError
        If a pivot is smaller than ``SINGULAR_PIVOT_RTOL * max|A|``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        msg = f"Matrix should be square, got shape {a.shape}"
        raise ValueError(msg)

    if b.shape != (a.shape[0],):
        msg = f"Right hand side has shape {b.shape}, expected ({a.shape[0]},)"
        raise ValueError(msg)

    if a.shape[0] == 0:
        return np.zeros(0)

    scale = np.abs(a).max()
    if scale == 0.0:
        msg = "Matrix is all zeros"
        raise SingularMatrixError(msg)

    with warnings.catch_warnings():
        warnings.filterwarnings(action="ignore", category=LinAlgWarning)
        lu, piv = lu_factor(a, check_finite=True)

    pivots = np.abs(np.diag(lu))
    if pivots.min() < SINGULAR_PIVOT_RTOL * scale:
        msg = f"Matrix is singular to working precision (pivot {pivots.min():.3e} at row {pivots.argmin()})"
        raise SingularMatrixError(msg)

    return lu_solve((lu, piv), b, check_finite=False)
