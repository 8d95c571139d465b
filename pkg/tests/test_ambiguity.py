import numpy as np
import pytest

from deepckit.ambiguity import (
    AmbiguitySpec,
    EmpiricalDist,
    Scenario,
    draw_scenarios,
    dist_from_csv,
    dist_to_csv,
    estimate_residuals,
    sample_dist_in_ball,
    update_dist,
    w1_distance,
)
from deepckit.errors import DimensionMismatch
from deepckit.plant import (
    MSD_N_KNOWN,
    MSD_P_KNOWN,
    MsdParams,
    NoiseSpec,
    ThetaBox,
    msd_discrete_hybrid,
    partition_hybrid,
    simulate,
)
from deepckit.trajkit import Signal

DECOUPLED = MsdParams(k3=0.0, c3=0.0)


def make_partition(params=MsdParams(), Ts=0.1):
    d = msd_discrete_hybrid(params, Ts)
    return d, partition_hybrid(d, MSD_N_KNOWN, MSD_P_KNOWN)


def test_residuals_zero_on_noiseless_decoupled_data():
    d, part = make_partition(DECOUPLED)
    rng = np.random.default_rng(0)
    u = Signal(rng.uniform(-1, 1, size=(80, 3)))
    xs, ys = simulate(d, rng.normal(size=6) * 0.1, u, NoiseSpec(), 0)
    w, v = estimate_residuals(part, u, ys, Signal(xs.data[:, :4]))
    assert np.linalg.norm(w.atoms) <= 1e-10
    assert np.linalg.norm(v.atoms) <= 1e-10


def test_measurement_residuals_zero_on_coupled_noiseless_data():
    d, part = make_partition()  # nominal coupled plant
    rng = np.random.default_rng(1)
    u = Signal(rng.uniform(-1, 1, size=(60, 3)))
    xs, ys = simulate(d, rng.normal(size=6) * 0.1, u, NoiseSpec(), 0)
    _, v = estimate_residuals(part, u, ys, Signal(xs.data[:, :4]))
    assert np.linalg.norm(v.atoms) <= 1e-9


def test_residuals_recover_injected_constant():
    _, part = make_partition(DECOUPLED)
    a_y = part.A_ku[:, :1]
    rng = np.random.default_rng(2)
    T = 50
    u = rng.uniform(-1, 1, size=(T, 3))
    y_u = rng.uniform(-0.1, 0.1, size=(T, 1))
    w_star = np.array([0.0, 0.05, 0.0, 0.0])
    xk = np.zeros((T + 1, 4))
    for k in range(T):
        xk[k + 1] = part.A_k @ xk[k] + (a_y @ y_u[k]) + part.B_k @ u[k] + w_star
    y_full = np.hstack([xk[:T] @ part.C_k.T, y_u])  # known rows consistent
    w, _ = estimate_residuals(part, Signal(u), Signal(y_full), Signal(xk))
    np.testing.assert_allclose(w.atoms.mean(axis=0), w_star, atol=1e-10)


def test_residual_std_tracks_process_noise():
    d, part = make_partition(DECOUPLED)
    rng = np.random.default_rng(3)
    u = Signal(rng.uniform(-1, 1, size=(1000, 3)))
    xs, ys = simulate(d, np.zeros(6), u, NoiseSpec(sigma_w=0.1, sigma_v=0.0), 5)
    w, _ = estimate_residuals(part, u, ys, Signal(xs.data[:, :4]))
    stds = w.atoms.std(axis=0)
    assert np.all(stds >= 0.08) and np.all(stds <= 0.12)


def test_w1_identity_and_point_masses():
    P = EmpiricalDist(np.array([[0.0], [1.0], [2.0]]))
    assert w1_distance(P, P) == 0.0
    a = EmpiricalDist.point_mass([0.0])
    b = EmpiricalDist.point_mass([1.0])
    assert w1_distance(a, b) == pytest.approx(1.0)


def test_w1_sorted_matching_example():
    P = EmpiricalDist(np.array([[0.0], [2.0]]))
    Q = EmpiricalDist(np.array([[1.0], [3.0]]))
    assert w1_distance(P, Q) == pytest.approx(1.0)


def test_w1_unequal_counts_quantile_integral():
    P = EmpiricalDist(np.array([[0.0]]))
    Q = EmpiricalDist(np.array([[0.0], [2.0]]))
    assert w1_distance(P, Q) == pytest.approx(1.0)
    # oracle: dense equal-count resampling approximates the same integral
    P_dense = EmpiricalDist(np.zeros((600, 1)))
    Q_dense = EmpiricalDist(np.repeat(np.array([[0.0], [2.0]]), 300, axis=0))
    assert w1_distance(P, Q) == pytest.approx(w1_distance(P_dense, Q_dense))


def test_w1_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        w1_distance(EmpiricalDist(np.zeros((2, 1))), EmpiricalDist(np.zeros((2, 2))))


def test_w1_metric_axioms_random_triples():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = int(rng.integers(1, 4))
        P = EmpiricalDist(rng.normal(size=(int(rng.integers(1, 8)), d)))
        Q = EmpiricalDist(rng.normal(size=(int(rng.integers(1, 8)), d)))
        R = EmpiricalDist(rng.normal(size=(int(rng.integers(1, 8)), d)))
        dpq = w1_distance(P, Q)
        assert dpq >= 0.0
        assert abs(dpq - w1_distance(Q, P)) <= 1e-9
        assert w1_distance(P, P) <= 1e-12
        assert dpq <= w1_distance(P, R) + w1_distance(R, Q) + 1e-9


def test_ball_sampling_zero_radius_identity():
    center = EmpiricalDist(np.array([[1.0, 2.0], [3.0, 4.0]]))
    spec = AmbiguitySpec(center, 0.0)
    out = sample_dist_in_ball(spec, 9)
    np.testing.assert_array_equal(out.atoms, center.atoms)


def test_ball_sampling_membership_and_determinism():
    rng = np.random.default_rng(5)
    center = EmpiricalDist(rng.normal(size=(20, 3)))
    spec = AmbiguitySpec(center, 0.5)
    for seed in range(50):
        out = sample_dist_in_ball(spec, seed)
        assert w1_distance(out, center) <= 0.5 + 1e-12
    a = sample_dist_in_ball(spec, 123)
    b = sample_dist_in_ball(spec, 123)
    np.testing.assert_array_equal(a.atoms, b.atoms)


def test_draw_scenarios_degenerate():
    box = ThetaBox((100.0, 100.0), (5.0, 5.0))
    zero_w = AmbiguitySpec(EmpiricalDist(np.zeros((1, 4))), 0.0)
    zero_v = AmbiguitySpec(EmpiricalDist(np.zeros((1, 3))), 0.0)
    scens = draw_scenarios(box, zero_w, zero_v, M=1, N=5, rng_seed=0)
    assert len(scens) == 1
    s = scens[0]
    assert s.theta.k3 == 100.0 and s.theta.c3 == 5.0
    assert np.all(s.w_path.data == 0.0) and np.all(s.v_path.data == 0.0)
    assert s.w_path.length == 5 and s.v_path.length == 5


def test_draw_scenarios_ranges_and_determinism():
    rng = np.random.default_rng(6)
    box = ThetaBox()
    spec_w = AmbiguitySpec(EmpiricalDist(rng.normal(size=(30, 4)) * 0.1), 0.05)
    spec_v = AmbiguitySpec(EmpiricalDist(rng.normal(size=(30, 3)) * 0.01), 0.005)
    a = draw_scenarios(box, spec_w, spec_v, M=5, N=20, rng_seed=11)
    b = draw_scenarios(box, spec_w, spec_v, M=5, N=20, rng_seed=11)
    for sa, sb in zip(a, b):
        assert 80.0 <= sa.theta.k3 <= 120.0
        assert 3.0 <= sa.theta.c3 <= 7.0
        assert sa.theta == sb.theta
        np.testing.assert_array_equal(sa.w_path.data, sb.w_path.data)
        np.testing.assert_array_equal(sa.v_path.data, sb.v_path.data)


def test_update_dist_noop_and_window():
    d = EmpiricalDist(np.array([[1.0], [2.0], [3.0]]))
    same = update_dist(d, np.empty((0, 1)), window=3)
    np.testing.assert_array_equal(same.atoms, d.atoms)
    out = update_dist(d, np.array([[4.0]]), window=3)
    np.testing.assert_array_equal(out.atoms, np.array([[2.0], [3.0], [4.0]]))


def test_update_dist_statistics():
    rng = np.random.default_rng(7)
    d = EmpiricalDist(np.zeros((1, 1)))
    out = update_dist(d, rng.normal(0.0, 0.1, size=(1000, 1)), window=1000)
    assert out.size == 1000
    assert 0.08 <= out.atoms.std() <= 0.12


def test_dist_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    d = EmpiricalDist(rng.normal(size=(17, 4)))
    path = tmp_path / "dist.csv"
    dist_to_csv(d, str(path))
    d2 = dist_from_csv(str(path))
    np.testing.assert_array_equal(d.atoms, d2.atoms)
