import numpy as np
import pytest

from deepckit.errors import DepthExceedsData, DepthMismatch
from deepckit.trajkit import (
    HankelMatrix,
    Signal,
    build_hankel,
    persistently_exciting,
    signal_from_csv,
    signal_to_csv,
    split_past_future,
)


def test_hankel_scalar_example():
    s = Signal(np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    H = build_hankel(s, 3)
    assert H.depth == 3 and H.block_dim == 1
    np.testing.assert_array_equal(
        H.data, np.array([[1, 2, 3], [2, 3, 4], [3, 4, 5]], dtype=float)
    )


def test_hankel_block_example():
    s = Signal(np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]))
    H = build_hankel(s, 2)
    np.testing.assert_array_equal(
        H.data, np.array([[1, 2], [10, 20], [2, 3], [20, 30]], dtype=float)
    )


def test_hankel_depth_exceeds_data():
    s = Signal(np.arange(5.0))
    with pytest.raises(DepthExceedsData):
        build_hankel(s, 6)


def test_hankel_index_law_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        T = int(rng.integers(2, 30))
        d = int(rng.integers(1, 4))
        L = int(rng.integers(1, T + 1))
        s = Signal(rng.normal(size=(T, d)))
        H = build_hankel(s, L)
        i = int(rng.integers(0, L))
        j = int(rng.integers(0, T - L + 1))
        np.testing.assert_array_equal(H.block_row(i)[:, j], s.data[i + j])


def test_hankel_shift_structure():
    rng = np.random.default_rng(8)
    s = rng.normal(size=(15, 2))
    L = 4
    H = build_hankel(Signal(s), L)
    H_shift = build_hankel(Signal(s[1:]), L)
    np.testing.assert_array_equal(H.data[:, 1:], H_shift.data)


def test_pe_constant_signal_fails():
    s = Signal(np.ones((150, 1)))
    assert persistently_exciting(s, 24) is False


def test_pe_random_scalar_signal():
    rng = np.random.default_rng(1)
    s = Signal(rng.uniform(-1.0, 1.0, size=(150, 1)))
    # independent oracle: numeric rank from singular values
    H = build_hankel(s, 24)
    sv = np.linalg.svd(H.data, compute_uv=False)
    assert np.count_nonzero(sv > 1e-9 * sv[0]) == 24
    assert persistently_exciting(s, 24) is True


def test_pe_random_three_channel():
    rng = np.random.default_rng(2)
    s = Signal(rng.uniform(-1.0, 1.0, size=(150, 3)))
    H = build_hankel(s, 26)
    assert H.data.shape == (78, 125)
    sv = np.linalg.svd(H.data, compute_uv=False)
    assert np.count_nonzero(sv > 1e-9 * sv[0]) == 78
    assert persistently_exciting(s, 26) is True


def test_pe_order_exceeds_length():
    s = Signal(np.ones((5, 1)))
    with pytest.raises(DepthExceedsData):
        persistently_exciting(s, 6)


def test_split_past_future_paper_depth():
    rng = np.random.default_rng(3)
    s = Signal(rng.normal(size=(150, 1)))
    H = build_hankel(s, 24)
    past, future = split_past_future(H, 4, 20)
    assert past.shape[0] == 4 and future.shape[0] == 20
    np.testing.assert_array_equal(np.vstack([past, future]), H.data)


def test_split_empty_past():
    s = Signal(np.arange(6.0))
    H = build_hankel(s, 3)
    past, future = split_past_future(H, 0, 3)
    assert past.shape == (0, H.columns)
    np.testing.assert_array_equal(future, H.data)


def test_split_depth_mismatch():
    s = Signal(np.arange(6.0))
    H = build_hankel(s, 3)
    with pytest.raises(DepthMismatch):
        split_past_future(H, 2, 2)


def test_fundamental_lemma_one_mass():
    # one-mass spring-damper, noiseless: every fresh length-L trajectory of
    # (u, y) lies in the span of the stacked data Hankel pair
    from deepckit.plant import ContinuousLTI, DiscreteLTI, discretize_zoh, simulate
    from deepckit.plant import NoiseSpec
    from deepckit.trajkit import Signal as Sig

    k, c, m = 50.0, 2.0, 1.0
    A = np.array([[0.0, 1.0], [-k / m, -c / m]])
    B = np.array([[0.0], [1.0 / m]])
    C = np.array([[1.0, 0.0]])
    D = np.zeros((1, 1))
    sysd = discretize_zoh(ContinuousLTI(A, B, C, D), 0.1)

    rng = np.random.default_rng(5)
    T, T_ini, N, n = 120, 4, 8, 2
    L = T_ini + N
    u_d = Sig(rng.uniform(-1, 1, size=(T, 1)))
    assert persistently_exciting(u_d, L + n)
    _, y_d = simulate(sysd, np.zeros(2), u_d, NoiseSpec(), 0)

    Hu = build_hankel(u_d, L)
    Hy = build_hankel(y_d, L)
    stacked = np.vstack([Hu.data, Hy.data])

    for trial in range(5):
        x0 = rng.normal(size=2)
        u_f = Sig(rng.uniform(-1, 1, size=(L, 1)))
        _, y_f = simulate(sysd, x0, u_f, NoiseSpec(), 0)
        target = np.concatenate([u_f.data.reshape(-1), y_f.data.reshape(-1)])
        sol = np.linalg.lstsq(stacked, target, rcond=None)[0]
        assert np.linalg.norm(stacked @ sol - target) <= 1e-8


def test_signal_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    s = Signal(rng.normal(size=(13, 3)))
    path = tmp_path / "sig.csv"
    signal_to_csv(s, str(path))
    header = path.read_text().splitlines()[0]
    assert header == "t,ch0,ch1,ch2"
    s2 = signal_from_csv(str(path))
    np.testing.assert_array_equal(s.data, s2.data)
