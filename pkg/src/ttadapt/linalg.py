"""Dense float64 linear-algebra kernels: matmul, reshape, full and truncated SVD.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order; every
routine here promotes to float64 and validates shapes up front so that
failures name the offending extents instead of surfacing as broadcasting
accidents deeper in a contraction.

All functions are pure and deterministic: identical input bits give
identical output bits across repeated calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand extents do not conform."""


class SvdConvergenceError(RuntimeError):
    """The SVD iteration failed to converge for the named extents."""


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce to a C-ordered float64 array, optionally reshaping.

    Raises ShapeError if the element count does not match ``shape``.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        return reshape(arr, shape)
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m, k) and b (k, n)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    return a @ b


def reshape(t: np.ndarray, new_shape) -> np.ndarray:
    """Row-major reinterpretation of ``t``; element count must be unchanged."""
    t = np.asarray(t, dtype=np.float64)
    new_shape = tuple(int(n) for n in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.size} elements into {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD factors: ``u @ diag(s) @ vt`` reconstructs the input.

    u is (m, k) with orthonormal columns, s nonincreasing and nonnegative
    of length k, vt (k, n) with orthonormal rows. Sign convention: the
    largest-magnitude entry of each u column is nonnegative, with the
    matching vt row negated to compensate.
    """

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.s)


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # argmax takes the first maximum, so ties resolve deterministically
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0.0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]


def svd(m: np.ndarray) -> SvdResult:
    """Full thin SVD of a matrix.

    Backed by LAPACK's deterministic dense bidiagonalization driver; a
    convergence failure is re-raised as SvdConvergenceError naming the
    matrix extents.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"svd requires finite entries, got non-finite values in {m.shape} matrix")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(f"SVD did not converge for {m.shape[0]}x{m.shape[1]} matrix") from exc
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    _fix_signs(u, vt)
    return SvdResult(u=u, s=s, vt=vt)


def truncated_svd(m: np.ndarray, r: int) -> SvdResult:
    """Top-r SVD triplets; r is clamped to min(m, n), never padded."""
    if r < 1:
        raise ValueError(f"truncation rank must be >= 1, got {r}")
    full = svd(m)
    k = min(int(r), full.rank)
    return SvdResult(
        u=np.ascontiguousarray(full.u[:, :k]),
        s=full.s[:k].copy(),
        vt=np.ascontiguousarray(full.vt[:k, :]),
    )
