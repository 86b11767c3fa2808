"""Independent oracles used across the test suite.

Everything here is written the slow, obvious way on purpose: explicit
index loops and sequential dense SVDs that do not share code with the
package, so agreement between the two is evidence and not tautology.
"""

import numpy as np

from ttadapt.linalg import truncated_svd
from ttadapt.tt import TensorTrain


def entry_by_chain(tt, index):
    """One tensor entry as the explicit chain product of slice matrices."""
    acc = np.eye(1)
    for k, i in enumerate(index):
        acc = acc @ tt.cores[k][:, i, :]
    return float(acc[0, 0])


def dense_by_loops(tt):
    """Full dense tensor via entry_by_chain at every index; tiny inputs only."""
    out = np.empty(tt.mode_sizes)
    for index in np.ndindex(*tt.mode_sizes):
        out[index] = entry_by_chain(tt, index)
    return out


def tt_svd_dense(dense, target_ranks):
    """Sequential-SVD decomposition of a dense tensor at the given bond ranks.

    The classic construction: reshape to (r_{k-1} * n_k, rest), truncate
    to r_k, keep U as the core, push S @ Vt rightward. Returns a
    TensorTrain whose ranks are at most the targets.
    """
    modes = dense.shape
    d = len(modes)
    cores = []
    rest = np.asarray(dense, dtype=np.float64).reshape(modes[0], -1)
    r_prev = 1
    for k in range(d - 1):
        m = rest.reshape(r_prev * modes[k], -1)
        f = truncated_svd(m, target_ranks[k])
        cores.append(f.u.reshape(r_prev, modes[k], f.rank))
        rest = f.s[:, None] * f.vt
        r_prev = f.rank
    cores.append(rest.reshape(r_prev, modes[-1], 1))
    return TensorTrain(cores)


def grad_norm_by_scan(core, grad):
    """Normalized-gradient diagnostic recomputed entry by entry with loops."""
    nnz = 0
    sq = 0.0
    flat_c = core.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_c.size):
        if flat_c[i] != 0.0:
            nnz += 1
        sq += flat_g[i] * flat_g[i]
    if nnz == 0:
        return 0.0
    return np.sqrt(sq) / np.sqrt(nnz)


def random_small_train(rng, min_d=3, max_d=5, max_mode=5, max_rank=4):
    """A random little train for oracle comparisons."""
    d = int(rng.integers(min_d, max_d + 1))
    modes = tuple(int(n) for n in rng.integers(2, max_mode + 1, size=d))
    ranks = tuple(int(r) for r in rng.integers(1, max_rank + 1, size=d - 1))
    cores = [
        rng.normal(size=(rl, n, rr))
        for rl, n, rr in zip((1,) + ranks, modes, ranks + (1,))
    ]
    return TensorTrain(cores)
