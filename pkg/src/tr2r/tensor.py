"""Dense tensor algebra shared by the estimation, control and monitoring code.

Tensors are plain ``numpy.ndarray`` objects.  The linear order used for
vectorization is column-major (the first index varies fastest), and the
mode-``k`` unfolding orders its columns by the remaining modes in ascending
order with the smallest remaining mode varying fastest.  With that
convention ``vectorize(T) == unfold(T, 0).ravel(order="F")``.

Modes are 0-based throughout.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "unfold",
    "fold",
    "vectorize",
    "devectorize",
    "mode_product",
    "multi_mode_product",
    "tucker_reconstruct",
    "project_to_core",
    "frobenius",
    "ls_pinv_solve",
    "orthonormalize",
    "is_orthonormal",
    "PINV_RTOL",
]

PINV_RTOL = 1e-12


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a tensor of order {ndim}")


def unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    """Mode-`mode` unfolding, shape ``(tensor.shape[mode], prod(other extents))``."""
    tensor = np.asarray(tensor)
    _check_mode(tensor.ndim, mode)
    return np.reshape(np.moveaxis(tensor, mode, 0), (tensor.shape[mode], -1), order="F")


def fold(matrix: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of the given `shape`."""
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), mode)
    moved = (shape[mode],) + shape[:mode] + shape[mode + 1:]
    matrix = np.asarray(matrix)
    if matrix.size != int(np.prod(shape)) or matrix.shape[0] != shape[mode]:
        raise ValueError(f"cannot fold a {matrix.shape} matrix into shape {shape} along mode {mode}")
    return np.moveaxis(np.reshape(matrix, moved, order="F"), 0, mode)


def vectorize(tensor: np.ndarray) -> np.ndarray:
    return np.asarray(tensor).ravel(order="F")


def devectorize(vector: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return np.reshape(np.asarray(vector), tuple(shape), order="F")


def mode_product(tensor: np.ndarray, matrix: np.ndarray, mode: int) -> np.ndarray:
    """Mode-`mode` product ``tensor x_mode matrix``.

    The extent of `mode` is replaced by ``matrix.shape[0]``; the result equals
    ``fold(matrix @ unfold(tensor, mode), mode, new_shape)``.
    """
    tensor = np.asarray(tensor)
    matrix = np.asarray(matrix)
    _check_mode(tensor.ndim, mode)
    if matrix.ndim != 2 or matrix.shape[1] != tensor.shape[mode]:
        raise ValueError(
            f"matrix with {matrix.shape} cannot multiply mode {mode} of extent {tensor.shape[mode]}"
        )
    # tensordot puts the new axis last; move it back into place
    out = np.tensordot(tensor, matrix, axes=([mode], [1]))
    return np.moveaxis(out, -1, mode)


def multi_mode_product(tensor: np.ndarray, matrices: Sequence[np.ndarray], first_mode: int = 0,
                       transpose: bool = False) -> np.ndarray:
    """Apply ``matrices[k]`` (or its transpose) along mode ``first_mode + k``."""
    out = np.asarray(tensor)
    if first_mode + len(matrices) > out.ndim:
        raise ValueError(
            f"{len(matrices)} factors starting at mode {first_mode} exceed tensor order {out.ndim}"
        )
    for k, mat in enumerate(matrices):
        mat = np.asarray(mat)
        out = mode_product(out, mat.T if transpose else mat, first_mode + k)
    return out


def tucker_reconstruct(core: np.ndarray, factors: Sequence[np.ndarray], first_mode: int = 0) -> np.ndarray:
    """Expand a Tucker core: ``core x_{f} F0 x_{f+1} F1 ...`` with ``f = first_mode``.

    Use ``first_mode=1`` for a parameter tensor whose mode 0 indexes recipes
    and ``first_mode=0`` for an image.
    """
    core = np.asarray(core)
    for k, factor in enumerate(factors):
        factor = np.asarray(factor)
        if first_mode + k >= core.ndim or factor.ndim != 2 or factor.shape[1] != core.shape[first_mode + k]:
            raise ValueError(
                f"factor {k} with shape {np.shape(factor)} does not match core shape {core.shape} "
                f"at mode {first_mode + k}"
            )
    return multi_mode_product(core, factors, first_mode)


def project_to_core(tensor: np.ndarray, factors: Sequence[np.ndarray], first_mode: int = 0) -> np.ndarray:
    """Project onto the factor bases: ``tensor x_f F0^T x_{f+1} F1^T ...``."""
    return multi_mode_product(tensor, factors, first_mode, transpose=True)


def frobenius(tensor: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(tensor, dtype=float)))))


def ls_pinv_solve(G: np.ndarray, b: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Minimum-norm least-squares solution of ``G x = b``.

    Singular values below ``rtol * sigma_max`` are treated as zero, so
    rank-deficient and all-zero systems are well defined.  `b` may be a
    vector or a matrix of right-hand sides.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    if G.size == 0 or not np.any(G):
        return np.zeros((G.shape[1],) + b.shape[1:])
    x, *_ = np.linalg.lstsq(G, b, rcond=rtol)
    return x


def orthonormalize(M: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis for the column space of `M`, column by column.

    Columns are processed in order (QR), so the span of the first ``k``
    result columns equals the span of the first ``k`` input columns.  Each
    output column is signed so that its first nonzero entry is positive.

    Raises
    ------
    ValueError
        If there are more columns than rows, or a column is (numerically) a
        combination of the preceding ones.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("orthonormalize expects a matrix")
    rows, cols = M.shape
    if cols > rows:
        raise ValueError(f"cannot orthonormalize {cols} columns in dimension {rows}")
    Q, R = np.linalg.qr(M)
    col_norms = np.linalg.norm(M, axis=0)
    for k in range(cols):
        if col_norms[k] == 0 or abs(R[k, k]) <= tol * col_norms[k]:
            raise ValueError(f"column {k} is linearly dependent on the preceding columns")
    for k in range(cols):
        nz = np.flatnonzero(np.abs(Q[:, k]) > 1e-12)
        if Q[nz[0], k] < 0:
            Q[:, k] = -Q[:, k]
    return Q


def is_orthonormal(M: np.ndarray, tol: float = 1e-10) -> bool:
    M = np.asarray(M)
    return M.shape[1] <= M.shape[0] and np.allclose(M.T @ M, np.eye(M.shape[1]), atol=tol, rtol=0)
