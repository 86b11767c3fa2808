import numpy as np
import pytest

from helpers_oracles import dense_by_loops, entry_by_chain, random_small_train
from ttadapt.tt import (DENSE_ELEMENT_CAP, TensorTrain, param_count,
                        random_train, reconstruct_dense, select_slice,
                        validate_chain)


def _train(*shapes, seed=0):
    rng = np.random.default_rng(seed)
    return TensorTrain([rng.normal(size=s) for s in shapes])


def test_constructor_validates():
    with pytest.raises(ValueError, match="at least 2"):
        TensorTrain([np.zeros((1, 2, 1))])
    with pytest.raises(ValueError, match="order-3"):
        TensorTrain([np.zeros((1, 2)), np.zeros((2, 3, 1))])
    with pytest.raises(ValueError, match="left rank 1"):
        TensorTrain([np.zeros((2, 2, 3)), np.zeros((3, 2, 1))])
    with pytest.raises(ValueError, match="right rank 1"):
        TensorTrain([np.zeros((1, 2, 3)), np.zeros((3, 2, 2))])
    with pytest.raises(ValueError, match="bond 0"):
        TensorTrain([np.zeros((1, 2, 3)), np.zeros((4, 2, 1))])


def test_properties_and_slices():
    tt = _train((1, 4, 2), (2, 3, 5), (5, 6, 1))
    assert tt.order == 3
    assert tt.mode_sizes == (4, 3, 6)
    assert tt.bond_ranks == (2, 5)
    assert tt.slice_matrix(1, 2).shape == (2, 5)
    assert np.shares_memory(tt.slice_matrix(1, 2), tt.cores[1])


def test_cores_are_owned_copies():
    src = np.ones((1, 2, 1))
    tt = TensorTrain([src, np.ones((1, 2, 1))])
    src[0, 0, 0] = 99.0
    assert tt.cores[0][0, 0, 0] == 1.0


def test_copy_is_independent():
    tt = _train((1, 2, 2), (2, 2, 1))
    cp = tt.copy()
    cp.cores[0][:] = 0.0
    assert not np.array_equal(cp.cores[0], tt.cores[0])


def test_validate_chain_lists_all_problems():
    tt = _train((1, 2, 2), (2, 2, 1))
    tt.cores[1] = np.zeros((3, 2, 2))  # break bond and boundary at once
    problems = validate_chain(tt)
    assert len(problems) == 2


def test_reconstruct_matches_entry_loops():
    rng = np.random.default_rng(7)
    for _ in range(10):
        tt = random_small_train(rng, max_mode=4, max_rank=3)
        dense = reconstruct_dense(tt)
        assert dense.shape == tt.mode_sizes
        assert np.max(np.abs(dense - dense_by_loops(tt))) < 1e-12


def test_reconstruct_cap():
    tt = _train((1, 30, 2), (2, 30, 2), (2, 30, 1))
    with pytest.raises(ValueError, match="cap"):
        reconstruct_dense(tt, cap=1000)
    assert DENSE_ELEMENT_CAP == 10 ** 7


def test_select_slice_against_dense():
    rng = np.random.default_rng(8)
    for _ in range(10):
        tt = random_small_train(rng, max_mode=4, max_rank=3)
        dense = reconstruct_dense(tt)
        interior = tuple(int(rng.integers(0, n)) for n in tt.mode_sizes[1:-1])
        got = select_slice(tt, interior)
        want = dense[(slice(None),) + interior + (slice(None),)]
        assert got.shape == (tt.mode_sizes[0], tt.mode_sizes[-1])
        assert np.max(np.abs(got - want)) < 1e-12


def test_select_slice_validation():
    tt = _train((1, 2, 2), (2, 3, 2), (2, 4, 1))
    with pytest.raises(IndexError, match="expected 1"):
        select_slice(tt, (0, 0))
    with pytest.raises(IndexError, match="mode 1"):
        select_slice(tt, (5,))
    two = _train((1, 2, 2), (2, 3, 1))
    with pytest.raises(ValueError, match="at least 3"):
        select_slice(two, ())


def test_param_count_formula():
    tt = _train((1, 4, 2), (2, 3, 5), (5, 6, 1))
    assert param_count(tt) == 1 * 4 * 2 + 2 * 3 * 5 + 5 * 6 * 1


def test_entry_chain_product_tiny_golden():
    # 2x2 train of ones: every entry is the bond-dimension count
    tt = TensorTrain([np.ones((1, 2, 3)), np.ones((3, 2, 1))])
    assert entry_by_chain(tt, (0, 1)) == 3.0
    assert np.array_equal(reconstruct_dense(tt), np.full((2, 2), 3.0))


def test_random_train_seeded_and_validated():
    r1 = random_train((3, 4, 5), (2, 2), np.random.default_rng(9))
    r2 = random_train((3, 4, 5), (2, 2), np.random.default_rng(9))
    assert all(np.array_equal(a, b) for a, b in zip(r1.cores, r2.cores))
    with pytest.raises(ValueError, match="bonds"):
        random_train((3, 4), (2, 2), np.random.default_rng(0))
