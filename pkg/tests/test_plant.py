import numpy as np
import pytest

from deepckit.errors import BadSplit, ExcitationFailed, NonPositiveMass
from deepckit.plant import (
    MSD_HYBRID_ORDER,
    MSD_N_KNOWN,
    MSD_P_KNOWN,
    ContinuousLTI,
    MsdParams,
    NoiseSpec,
    ThetaBox,
    build_msd,
    collect_data,
    discretize_zoh,
    mechanical_energy,
    msd_discrete_hybrid,
    partition_hybrid,
    reorder_states,
    sample_theta,
    simulate,
)
from deepckit.trajkit import Signal


def expm_series(M, scaling=30, terms=20):
    """Scaled-and-squared truncated-series matrix exponential (test oracle)."""
    S = M / (2.0**scaling)
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms + 1):
        term = term @ S / k
        out = out + term
    for _ in range(scaling):
        out = out @ out
    return out


def test_msd_decoupled_double_integrators():
    p = MsdParams(k1=0, k2=0, k3=0, c1=0, c2=0, c3=0)
    sys = build_msd(p)
    # position rows select velocities, velocity rows are zero
    np.testing.assert_array_equal(sys.A[:3, 3:], np.eye(3))
    np.testing.assert_array_equal(sys.A[3:, :], np.zeros((3, 6)))


def test_msd_eigenvalues_nonpositive_real():
    sys = build_msd(MsdParams())
    eig = np.linalg.eigvals(sys.A)
    assert np.all(eig.real <= 1e-12)


def test_msd_newton_coefficients():
    p = MsdParams(m1=2.0, m2=4.0, m3=1.0, k1=10, k2=20, k3=30, c1=1, c2=2, c3=3)
    A = build_msd(p).A
    # force balance on mass 2: m2*a2 = -k2(x2-x1) - c2(v2-v1) + k3(x3-x2) + c3(v3-v2) + u2
    assert A[4, 0] == pytest.approx(p.k2 / p.m2)
    assert A[4, 1] == pytest.approx(-(p.k2 + p.k3) / p.m2)
    assert A[4, 2] == pytest.approx(p.k3 / p.m2)
    assert A[4, 3] == pytest.approx(p.c2 / p.m2)
    assert A[4, 4] == pytest.approx(-(p.c2 + p.c3) / p.m2)
    assert A[4, 5] == pytest.approx(p.c3 / p.m2)
    # mass 1 against the wall
    assert A[3, 0] == pytest.approx(-(p.k1 + p.k2) / p.m1)
    # mass 3 free end
    assert A[5, 1] == pytest.approx(p.k3 / p.m3)
    assert A[5, 2] == pytest.approx(-p.k3 / p.m3)


def test_msd_rejects_bad_mass():
    with pytest.raises(NonPositiveMass):
        MsdParams(m2=0.0)
    with pytest.raises(NonPositiveMass):
        MsdParams(k3=-1.0)


def test_zoh_scalar_integrator():
    sys = ContinuousLTI(
        A=np.zeros((1, 1)), B=np.ones((1, 1)), C=np.ones((1, 1)), D=np.zeros((1, 1))
    )
    d = discretize_zoh(sys, 0.1)
    assert d.Ad[0, 0] == pytest.approx(1.0)
    assert d.Bd[0, 0] == pytest.approx(0.1)


def test_zoh_double_integrator():
    sys = ContinuousLTI(
        A=np.array([[0.0, 1.0], [0.0, 0.0]]),
        B=np.array([[0.0], [1.0]]),
        C=np.eye(2),
        D=np.zeros((2, 1)),
    )
    d = discretize_zoh(sys, 0.1)
    np.testing.assert_allclose(d.Ad, [[1.0, 0.1], [0.0, 1.0]], atol=1e-14)
    np.testing.assert_allclose(d.Bd, [[0.005], [0.1]], atol=1e-14)


def test_zoh_matches_series_oracle():
    sys = build_msd(MsdParams())
    Ts = 0.1
    d = discretize_zoh(sys, Ts)
    aug = np.zeros((9, 9))
    aug[:6, :6] = sys.A
    aug[:6, 6:] = sys.B
    phi = expm_series(aug * Ts)
    np.testing.assert_allclose(d.Ad, phi[:6, :6], atol=1e-10)
    np.testing.assert_allclose(d.Bd, phi[:6, 6:], atol=1e-10)


def test_zoh_eigendecomposition_closed_form():
    sys = build_msd(MsdParams())
    Ts = 0.07
    lam, V = np.linalg.eig(sys.A)
    assert np.linalg.matrix_rank(V) == 6  # diagonalizable here
    Ad_closed = (V @ np.diag(np.exp(lam * Ts)) @ np.linalg.inv(V)).real
    d = discretize_zoh(sys, Ts)
    np.testing.assert_allclose(d.Ad, Ad_closed, atol=1e-9)


def test_partition_blocks_and_reassembly():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    part = partition_hybrid(d, MSD_N_KNOWN, MSD_P_KNOWN)
    assert part.A_u.shape == (2, 2)
    A, B, C, D = part.reassemble()
    np.testing.assert_array_equal(A, d.Ad)
    np.testing.assert_array_equal(B, d.Bd)
    np.testing.assert_array_equal(C, d.Cd)
    np.testing.assert_array_equal(D, d.Dd)
    # mass-3 position feeds the unknown output directly
    np.testing.assert_array_equal(part.C_u, [[1.0, 0.0]])
    np.testing.assert_array_equal(part.C_uk, np.zeros((1, 4)))


def test_partition_rejects_full_split():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    with pytest.raises(BadSplit):
        partition_hybrid(d, 6, 2)


def test_reorder_preserves_io_behavior():
    rng = np.random.default_rng(4)
    d = discretize_zoh(build_msd(MsdParams()), 0.1)
    d2 = reorder_states(d, MSD_HYBRID_ORDER)
    u = Signal(rng.uniform(-1, 1, size=(40, 3)))
    x0 = rng.normal(size=6)
    x0p = x0[list(MSD_HYBRID_ORDER)]
    _, y1 = simulate(d, x0, u, NoiseSpec(), 0)
    _, y2 = simulate(d2, x0p, u, NoiseSpec(), 0)
    np.testing.assert_allclose(y1.data, y2.data, atol=1e-12)


def test_simulate_zero_everything():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    u = Signal(np.zeros((10, 3)))
    xs, ys = simulate(d, np.zeros(6), u, NoiseSpec(), 1)
    assert np.all(xs.data == 0.0)
    assert np.all(ys.data == 0.0)


def test_simulate_single_step_unroll():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    u0 = np.array([1.0, -2.0, 0.5])
    u = Signal(u0.reshape(1, 3))
    xs, _ = simulate(d, np.zeros(6), u, NoiseSpec(), 1)
    np.testing.assert_allclose(xs.data[1], d.Bd @ u0, atol=1e-14)


def test_simulate_noise_statistics():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    T = 10_000
    u = Signal(np.zeros((T, 3)))
    xs, _ = simulate(d, np.zeros(6), u, NoiseSpec(sigma_w=0.1, sigma_v=0.0), 123)
    w = xs.data[1:] - xs.data[:-1] @ d.Ad.T  # injected process noise
    stds = w.std(axis=0)
    assert np.all(stds >= 0.095) and np.all(stds <= 0.105)


def test_simulate_seed_determinism():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    u = Signal(np.random.default_rng(9).uniform(-1, 1, size=(25, 3)))
    a = simulate(d, np.zeros(6), u, NoiseSpec(0.1, 0.01), 42)
    b = simulate(d, np.zeros(6), u, NoiseSpec(0.1, 0.01), 42)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_energy_dissipation():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    p = MsdParams()
    rng = np.random.default_rng(6)
    x = rng.normal(size=6)
    u = Signal(np.zeros((200, 3)))
    xs, _ = simulate(d, x, u, NoiseSpec(), 0)
    energies = [mechanical_energy(p, xk) for xk in xs.data]
    diffs = np.diff(energies)
    assert np.all(diffs <= 1e-10)


def test_sample_theta_degenerate_box():
    box = ThetaBox((100.0, 100.0), (5.0, 5.0))
    th = sample_theta(box, 77)
    assert th.k3 == 100.0 and th.c3 == 5.0


def test_sample_theta_ranges_and_mean():
    box = ThetaBox()
    k3s = []
    for seed in range(1000):
        th = sample_theta(box, seed)
        assert 80.0 <= th.k3 <= 120.0
        assert 3.0 <= th.c3 <= 7.0
        k3s.append(th.k3)
    assert 98.0 <= np.mean(k3s) <= 102.0


def test_collect_data_lengths_and_pe():
    from deepckit.trajkit import persistently_exciting

    d = msd_discrete_hybrid(MsdParams(), 0.1)
    part = partition_hybrid(d, MSD_N_KNOWN, MSD_P_KNOWN)
    u_d, y_u = collect_data(
        d, part, 150, 1.0, NoiseSpec(0.1, 0.01), rng_seed=3, pe_order=26
    )
    assert u_d.length == 150 and y_u.length == 150
    assert y_u.dim == 1
    assert persistently_exciting(u_d, 26)


def test_collect_data_zero_amplitude_fails():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    part = partition_hybrid(d, MSD_N_KNOWN, MSD_P_KNOWN)
    with pytest.raises(ExcitationFailed):
        collect_data(d, part, 150, 0.0, NoiseSpec(), rng_seed=3, pe_order=26)


def test_collect_data_fundamental_lemma_residual():
    d = msd_discrete_hybrid(MsdParams(), 0.1)
    part = partition_hybrid(d, MSD_N_KNOWN, MSD_P_KNOWN)
    u_d, y_u = collect_data(d, part, 150, 1.0, NoiseSpec(), rng_seed=3, pe_order=26)

    from deepckit.trajkit import build_hankel

    L = 24
    stacked = np.vstack([build_hankel(u_d, L).data, build_hankel(y_u, L).data])
    rng = np.random.default_rng(10)
    x0 = rng.normal(size=6) * 0.1
    u_f = Signal(rng.uniform(-1, 1, size=(L, 3)))
    _, y_f = simulate(d, x0, u_f, NoiseSpec(), 0)
    target = np.concatenate(
        [u_f.data.reshape(-1), y_f.data[:, part.p_k :].reshape(-1)]
    )
    sol = np.linalg.lstsq(stacked, target, rcond=None)[0]
    assert np.linalg.norm(stacked @ sol - target) <= 1e-8
