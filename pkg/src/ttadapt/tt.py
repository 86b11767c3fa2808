"""Tensor-train chains: an ordered list of order-3 cores with consistent bonds.

A core is a float64 array of shape (left_rank, mode_size, right_rank);
slicing the middle index of core k yields the r_{k-1} x r_k matrix that
multiplies into the chain. Boundary cores carry rank-1 dummy bonds so the
compression sweep can treat every bond uniformly.

Entry (i1, ..., id) of the represented tensor is the scalar

    G1[i1] @ G2[i2] @ ... @ Gd[id]

with the outer dummy bonds contracted away.
"""

from __future__ import annotations

import numpy as np

# reconstruct_dense exists as a test oracle; refuse silly sizes
DENSE_ELEMENT_CAP = 10**7


class TensorTrain:
    """Ordered chain of order-3 cores. Cores are owned (copied) float64 arrays."""

    def __init__(self, cores):
        if len(cores) < 2:
            raise ValueError(f"a tensor train needs at least 2 cores, got {len(cores)}")
        # np.array copies unconditionally; ascontiguousarray would alias a
        # caller's buffer whenever it is already contiguous float64
        self.cores = [np.array(c, dtype=np.float64, order="C") for c in cores]
        for k, c in enumerate(self.cores):
            if c.ndim != 3:
                raise ValueError(f"core {k} must be order-3, got shape {c.shape}")
        problems = validate_chain(self)
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def order(self) -> int:
        return len(self.cores)

    @property
    def mode_sizes(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def bond_ranks(self) -> tuple:
        """Interior bond ranks (r_1, ..., r_{d-1}); bond k joins cores k, k+1."""
        return tuple(c.shape[2] for c in self.cores[:-1])

    def slice_matrix(self, k: int, i: int) -> np.ndarray:
        """Matrix slice of core k at mode index i, shape (r_{k-1}, r_k)."""
        return self.cores[k][:, i, :]

    def copy(self) -> "TensorTrain":
        return TensorTrain([c.copy() for c in self.cores])


def validate_chain(tt: TensorTrain) -> list:
    """All chain invariants; returns a list of violations (empty means ok)."""
    problems = []
    cores = tt.cores
    if cores[0].shape[0] != 1:
        problems.append(f"first core must have left rank 1, got {cores[0].shape[0]}")
    if cores[-1].shape[2] != 1:
        problems.append(f"last core must have right rank 1, got {cores[-1].shape[2]}")
    for k in range(len(cores) - 1):
        right, left = cores[k].shape[2], cores[k + 1].shape[0]
        if right != left:
            problems.append(f"bond {k} mismatch: core {k} right rank {right} vs core {k + 1} left rank {left}")
    for k, c in enumerate(cores):
        if min(c.shape) < 1:
            problems.append(f"core {k} has a zero extent: {c.shape}")
    return problems


def select_slice(tt: TensorTrain, indices) -> np.ndarray:
    """Contract the chain at fixed interior mode indices, boundary modes open.

    ``indices`` gives one mode index per interior core (d - 2 of them);
    the result has shape (n_1, n_d) and is the product of the boundary
    core matrices sandwiching the selected interior slices, accumulated
    left to right.
    """
    d = tt.order
    if d < 3:
        raise ValueError(f"select_slice needs at least 3 cores, got {d}")
    indices = tuple(int(i) for i in indices)
    if len(indices) != d - 2:
        raise IndexError(f"expected {d - 2} interior indices, got {len(indices)}")
    for pos, i in enumerate(indices):
        n = tt.mode_sizes[pos + 1]
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for interior mode {pos + 1} of size {n}")
    acc = tt.cores[0][0, :, :]  # (n_1, r_1)
    for pos, i in enumerate(indices):
        acc = acc @ tt.slice_matrix(pos + 1, i)
    return acc @ tt.cores[-1][:, :, 0]


def reconstruct_dense(tt: TensorTrain, cap: int = DENSE_ELEMENT_CAP) -> np.ndarray:
    """Full dense tensor of shape mode_sizes. Gated by an element cap."""
    total = int(np.prod(tt.mode_sizes, dtype=np.int64))
    if total > cap:
        raise ValueError(f"dense reconstruction of {total} elements exceeds cap {cap}")
    acc = tt.cores[0][0]  # (n_1, r_1)
    for core in tt.cores[1:]:
        # (..., r) x (r, n, r') -> (..., n, r')
        acc = np.tensordot(acc, core, axes=([acc.ndim - 1], [0]))
    return np.ascontiguousarray(acc[..., 0])


def param_count(tt: TensorTrain) -> int:
    """Total stored entries: sum over cores of r_{k-1} * n_k * r_k."""
    return int(sum(c.size for c in tt.cores))


def random_train(mode_sizes, bond_ranks, rng, scale: float = 1.0) -> TensorTrain:
    """I.i.d. normal(0, scale) train with the given modes and interior bonds."""
    mode_sizes = tuple(int(n) for n in mode_sizes)
    bond_ranks = tuple(int(r) for r in bond_ranks)
    if len(bond_ranks) != len(mode_sizes) - 1:
        raise ValueError(f"{len(mode_sizes)} modes need {len(mode_sizes) - 1} bonds, got {len(bond_ranks)}")
    ranks = (1,) + bond_ranks + (1,)
    cores = [
        rng.normal(0.0, scale, size=(ranks[k], mode_sizes[k], ranks[k + 1]))
        for k in range(len(mode_sizes))
    ]
    return TensorTrain(cores)
