"""
Dense complex tensor helpers shared by every qpix module.

Tensors are plain numpy arrays in row-major (C) order. All functions are pure:
they never modify their inputs.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from qpix.errors import NumericalError, PreconditionError, ShapeError

# Module-level logger
logger = logging.getLogger(__name__)


def contract(a: np.ndarray, b: np.ndarray, axes: Sequence[Tuple[int, int]]) -> np.ndarray:
    """
    Sum over paired indices of ``a`` and ``b``.

    Args:
        a: First tensor.
        b: Second tensor.
        axes: Pairs ``(axis_of_a, axis_of_b)`` to contract.

    Returns:
        Tensor whose axes are the free axes of ``a`` followed by the free axes of ``b``.

    Raises:
        ShapeError: If a paired extent differs or an axis is out of range.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    axes_a = [pair[0] for pair in axes]
    axes_b = [pair[1] for pair in axes]
    for ia, ib in zip(axes_a, axes_b):
        if not (-a.ndim <= ia < a.ndim) or not (-b.ndim <= ib < b.ndim):
            raise ShapeError(f"Contraction axis pair ({ia}, {ib}) out of range for ranks {a.ndim} and {b.ndim}")
        if a.shape[ia] != b.shape[ib]:
            raise ShapeError(
                f"Cannot contract axis {ia} (extent {a.shape[ia]}) with axis {ib} (extent {b.shape[ib]})"
            )
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def svd(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Thin singular value decomposition ``m = U @ diag(s) @ Vh``.

    Singular values come back sorted in descending order. LAPACK's divide-and-conquer
    driver is tried first; on non-convergence the slower QR-iteration driver is used.

    Raises:
        ShapeError: If ``m`` is not rank 2.
        NumericalError: If neither driver converges.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a rank-2 tensor, got shape {m.shape}")
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as first_error:
        logger.warning(f"gesdd SVD did not converge on a {m.shape} matrix ({first_error}); retrying with gesvd")
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
    except (np.linalg.LinAlgError, ValueError) as second_error:
        raise NumericalError(
            f"SVD of a {m.shape} matrix did not converge after 2 attempts (gesdd, gesvd): {second_error}"
        ) from second_error


def truncated_svd(
    m: np.ndarray,
    chi_max: Optional[int] = None,
    cutoff: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """
    SVD keeping at most ``chi_max`` singular values.

    Truncation is by count. When ``cutoff`` is given, the smallest values are also
    dropped as long as their summed squared weight stays below ``cutoff`` (relative to
    the total weight); at least one value is always kept.

    Returns:
        ``(U, s, Vh, discarded_weight)`` where ``discarded_weight`` is the sum of the
        squared singular values that were dropped.
    """
    u, s, vh = svd(m)
    keep = len(s)
    if chi_max is not None:
        if chi_max < 1:
            raise ValueError(f"chi_max must be at least 1, got {chi_max}")
        keep = min(keep, chi_max)
    if cutoff is not None and keep > 1:
        weights = s[:keep] ** 2
        total = float(np.sum(s ** 2))
        if total > 0:
            # tail[i] = weight of values i..keep-1
            tail = np.cumsum(weights[::-1])[::-1] / total
            droppable = np.nonzero(tail < cutoff)[0]
            if droppable.size:
                keep = max(1, int(droppable[0]))
    discarded = float(np.sum(s[keep:] ** 2))
    return u[:, :keep], s[:keep], vh[:keep, :], discarded


def is_isometry(m: np.ndarray, tol: float = 1e-10) -> bool:
    """True when the columns of ``m`` are orthonormal to ``tol``."""
    gram = m.conj().T @ m
    return bool(np.max(np.abs(gram - np.eye(gram.shape[0])), initial=0.0) < tol)


def unitarity_deviation(u: np.ndarray) -> float:
    """Return ``max |U^H U - I|``."""
    u = np.asarray(u)
    return float(np.max(np.abs(u.conj().T @ u - np.eye(u.shape[1]))))


def qr_unitary_completion(cols: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """
    Extend a matrix with orthonormal columns to a square unitary.

    The leading columns of the result are exactly the input columns. The remaining
    columns come from Gram-Schmidt on canonical basis vectors, each time picking the
    vector with the largest residual (lowest index on ties), so the completion is
    deterministic for a given input.

    Raises:
        ShapeError: If there are more columns than rows.
        PreconditionError: If the input columns are not orthonormal to ``tol``.
    """
    cols = np.asarray(cols, dtype=np.complex128)
    if cols.ndim != 2:
        raise ShapeError(f"qr_unitary_completion expects a rank-2 tensor, got shape {cols.shape}")
    rows, k = cols.shape
    if k > rows:
        raise ShapeError(f"Cannot complete {k} columns in dimension {rows}")
    if not is_isometry(cols, tol):
        raise PreconditionError("qr_unitary_completion input columns are not orthonormal")

    q = cols.copy()
    while q.shape[1] < rows:
        # residuals of every canonical basis vector; take the largest (lowest index on ties)
        residual = np.eye(rows, dtype=np.complex128) - q @ q.conj().T
        pivot = int(np.argmax(np.linalg.norm(residual, axis=0)))
        v = residual[:, pivot]
        v = v - q @ (q.conj().T @ v)
        norm = np.linalg.norm(v)
        if norm < tol:
            raise NumericalError("Gram-Schmidt completion failed to span the full space")
        q = np.concatenate([q, (v / norm)[:, None]], axis=1)
    return q


def normalize(t: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Split ``t`` into a unit-Frobenius-norm tensor and the log of its norm.

    A zero tensor is returned unchanged with log norm ``-inf``.
    """
    norm = float(np.linalg.norm(t))
    if norm == 0.0:
        return t, float("-inf")
    return t / norm, float(np.log(norm))
