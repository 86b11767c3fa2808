"""Rank-adaptive compression of a tensor train by a double truncation sweep.

One sweep walks every bond twice. Left to right, the two cores at a bond
are merged, the merged matrix is cut to the bond's target rank with a
truncated SVD, and the singular values are absorbed into the right
factor. Right to left the same happens with the singular values absorbed
into the left factor. No canonicalization pass runs before or between
the loops; the sweep operates on the cores exactly as the optimizer left
them.

Bonds are indexed 0-based here: bond k joins cores k and k+1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import SvdConvergenceError, truncated_svd
from .tt import TensorTrain, validate_chain


class ScheduleError(ValueError):
    """Rank schedule entries are malformed."""


def _normalize_targets(targets, n_bonds: int) -> tuple:
    if np.isscalar(targets):
        targets = (int(targets),) * n_bonds
    else:
        targets = tuple(int(r) for r in targets)
    if len(targets) != n_bonds:
        raise ValueError(f"expected {n_bonds} per-bond targets, got {len(targets)}")
    if any(r < 1 for r in targets):
        raise ValueError(f"target ranks must be >= 1, got {targets}")
    return targets


@dataclass(frozen=True)
class RankSchedule:
    """When to compress and how far: ordered (epoch, target_ranks) entries.

    Epochs are strictly increasing and targets only ever shrink, bond by
    bond; a schedule that widens a bond is rejected. Scalar targets are
    broadcast when the bond count is known at lookup time, so entries
    store whatever the caller gave.
    """

    entries: tuple

    def __post_init__(self):
        norm = []
        prev_epoch = -1
        for entry in self.entries:
            epoch, targets = entry
            epoch = int(epoch)
            if epoch < 0:
                raise ScheduleError(f"schedule epochs must be nonnegative, got {epoch}")
            if epoch <= prev_epoch:
                raise ScheduleError(f"schedule epochs must be strictly increasing, got {epoch} after {prev_epoch}")
            prev_epoch = epoch
            if np.isscalar(targets):
                targets = (int(targets),)
            else:
                targets = tuple(int(r) for r in targets)
            if not targets or any(r < 1 for r in targets):
                raise ScheduleError(f"target ranks must be positive, got {targets}")
            norm.append((epoch, targets))
        for (_, prev), (_, cur) in zip(norm, norm[1:]):
            # compare bond-wise, broadcasting scalars
            width = max(len(prev), len(cur))
            p = prev * width if len(prev) == 1 else prev
            c = cur * width if len(cur) == 1 else cur
            if len(p) != len(c):
                raise ScheduleError(f"inconsistent per-bond widths across entries: {prev} vs {cur}")
            if any(ci > pi for pi, ci in zip(p, c)):
                raise ScheduleError(f"schedules only shrink; entry {cur} exceeds earlier {prev}")
        object.__setattr__(self, "entries", tuple(norm))


def schedule_lookup(schedule: RankSchedule, epoch: int):
    """Targets to apply right after training epoch ``epoch``, or None."""
    for e, targets in schedule.entries:
        if e == epoch:
            return targets
    return None


def default_schedule(total_epochs: int, ranks=(8, 6, 4)) -> RankSchedule:
    """Evenly spaced shrink preset: fire at E//4, E//2, 3E//4.

    Entries that would collide at small E keep the latest (smallest)
    rank; entries landing outside [1, E] are dropped.
    """
    if total_epochs < 1:
        raise ScheduleError(f"total_epochs must be positive, got {total_epochs}")
    points = {}
    for k, r in enumerate(ranks, start=1):
        epoch = (k * total_epochs) // (len(ranks) + 1)
        if 1 <= epoch <= total_epochs:
            points[epoch] = r
    return RankSchedule(entries=tuple(sorted(points.items())))


def merge_adjacent(tt: TensorTrain, k: int) -> np.ndarray:
    """Contract bond k and reshape row-major to (r_{k-1}*n_k, n_{k+1}*r_{k+1})."""
    if not 0 <= k <= tt.order - 2:
        raise IndexError(f"bond index {k} out of range [0, {tt.order - 2}]")
    left, right = tt.cores[k], tt.cores[k + 1]
    rl, nl, _ = left.shape
    _, nr, rr = right.shape
    merged = np.tensordot(left, right, axes=([2], [0]))  # (rl, nl, nr, rr)
    return merged.reshape(rl * nl, nr * rr)


def dmrg_sweep(tt: TensorTrain, target_ranks) -> TensorTrain:
    """Truncate every bond toward its target; mutates ``tt`` in place.

    Targets are clamped to what the merged matrix at each bond can
    support, never padded. Optimizer moments for the cores are stale
    after this returns; the training loop re-initializes them.
    """
    n_bonds = tt.order - 1
    targets = _normalize_targets(target_ranks, n_bonds)
    cores = tt.cores

    def cut(k):
        merged = merge_adjacent(tt, k)
        try:
            return truncated_svd(merged, targets[k])
        except SvdConvergenceError as exc:
            raise SvdConvergenceError(f"sweep failed at bond {k}: {exc}") from exc

    for k in range(n_bonds):  # forward: singular values go rightward
        rl, nl, _ = cores[k].shape
        _, nr, rr = cores[k + 1].shape
        f = cut(k)
        cores[k] = np.ascontiguousarray(f.u.reshape(rl, nl, f.rank))
        cores[k + 1] = np.ascontiguousarray((f.s[:, None] * f.vt).reshape(f.rank, nr, rr))

    for k in range(n_bonds - 1, -1, -1):  # backward: singular values go leftward
        rl, nl, _ = cores[k].shape
        _, nr, rr = cores[k + 1].shape
        f = cut(k)
        cores[k] = np.ascontiguousarray((f.u * f.s[None, :]).reshape(rl, nl, f.rank))
        cores[k + 1] = np.ascontiguousarray(f.vt.reshape(f.rank, nr, rr))

    problems = validate_chain(tt)
    if problems:
        raise RuntimeError("sweep produced an inconsistent chain: " + "; ".join(problems))
    return tt
