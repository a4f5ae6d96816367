import numpy as np
import pytest

from deepc_sampling.trajectory_data import (
    Dataset,
    InsufficientDataError,
    NormalizationStats,
    Trajectory,
    build_data_matrices,
    build_hankel,
    is_persistently_exciting,
    min_singular_value,
)


def test_hankel_scalar_signal():
    H = build_hankel([1, 2, 3, 4, 5], 2)
    assert np.array_equal(H, [[1, 2, 3, 4], [2, 3, 4, 5]])


def test_hankel_vector_signal():
    H = build_hankel([(1, 10), (2, 20), (3, 30)], 2)
    expected = np.array([[1, 2], [10, 20], [2, 3], [20, 30]], dtype=float)
    assert np.array_equal(H, expected)


def test_hankel_depth_exceeds_length():
    with pytest.raises(InsufficientDataError, match="insufficient data length"):
        build_hankel([1, 2, 3], 4)


def test_hankel_shift_structure():
    rng = np.random.default_rng(0)
    signal = rng.normal(size=(20, 3))
    L = 5
    H = build_hankel(signal, L)
    d = signal.shape[1]
    # block-row shift: entry(r + d, c) == entry(r, c + 1)
    assert np.array_equal(H[d:, :-1], H[:-d, 1:])


def test_build_data_matrices_smallest_case():
    traj = Trajectory([1, 2, 3], [4, 5, 6], 0.1)
    ds = Dataset.from_trajectories([traj])
    m = build_data_matrices(ds, 1, 1)
    assert np.array_equal(m.u_past, [[1, 2]])
    assert np.array_equal(m.u_future, [[2, 3]])
    assert np.array_equal(m.y_past, [[4, 5]])
    assert np.array_equal(m.y_future, [[5, 6]])


def test_build_data_matrices_mosaic_concatenation():
    t1 = Trajectory([1, 2], [3, 4], 0.1)
    t2 = Trajectory([5, 6], [7, 8], 0.1)
    ds = Dataset.from_trajectories([t1, t2])
    m = build_data_matrices(ds, 1, 1)
    assert m.column_count == 2
    assert np.array_equal(m.u_past, [[1, 5]])
    assert np.array_equal(m.column_sources, [[0, 0], [1, 0]])


def test_build_data_matrices_column_count_vehicle_scale():
    # 300 s at 0.1 s -> T=3000 samples, depth 15 -> K = T - L + 1 = 2986
    rng = np.random.default_rng(1)
    traj = Trajectory(rng.normal(size=(3000, 2)), rng.normal(size=(3000, 4)), 0.1)
    ds = Dataset.from_trajectories([traj])
    m = build_data_matrices(ds, 5, 10)
    assert m.column_count == 2986


def test_build_data_matrices_short_trajectory_names_index():
    t1 = Trajectory(np.ones((10, 1)), np.ones((10, 1)), 0.1)
    t2 = Trajectory(np.ones((3, 1)), np.ones((3, 1)), 0.1)
    ds = Dataset.from_trajectories([t1, t2])
    with pytest.raises(InsufficientDataError, match="trajectory 1"):
        build_data_matrices(ds, 2, 3)


def test_mosaic_column_provenance():
    rng = np.random.default_rng(2)
    trajs = [
        Trajectory(rng.normal(size=(12, 2)), rng.normal(size=(12, 3)), 0.1),
        Trajectory(rng.normal(size=(9, 2)), rng.normal(size=(9, 3)), 0.1),
    ]
    ds = Dataset.from_trajectories(trajs)
    t_ini, horizon = 2, 3
    m = build_data_matrices(ds, t_ini, horizon)
    depth = t_ini + horizon
    for j in range(m.column_count):
        ti, off = m.column_sources[j]
        traj = ds.trajectories[ti]
        u_win = traj.inputs[off:off + depth].ravel()
        y_win = traj.outputs[off:off + depth].ravel()
        assert np.array_equal(np.concatenate([m.u_past[:, j], m.u_future[:, j]]), u_win)
        assert np.array_equal(np.concatenate([m.y_past[:, j], m.y_future[:, j]]), y_win)


def test_pe_constant_signal_fails():
    assert not is_persistently_exciting([1, 1, 1, 1], 2)


def test_pe_generic_signal_order_two():
    # rank of [[1,2,3,4],[2,3,4,5]] is 2: the 2x2 minor det([[1,2],[2,3]]) = -1 != 0
    assert is_persistently_exciting([1, 2, 3, 4, 5], 2)


def test_pe_too_short_signal_fails():
    # T < (m+1)L - 1 makes full row rank impossible (fewer columns than rows)
    rng = np.random.default_rng(3)
    signal = rng.normal(size=(5, 1))
    assert not is_persistently_exciting(signal, 4)


def test_min_singular_value_trivial_and_rank_deficient():
    from deepc_sampling.trajectory_data import DataMatrices

    one = DataMatrices(
        u_past=np.array([[1.0]]), y_past=np.array([[1.0]]),
        u_future=np.array([[1.0]]), y_future=np.array([[1.0]]),
        t_ini=1, horizon=1, input_dim=1, output_dim=1,
    )
    # stacked matrix is the 4x1 column of ones: single singular value = 2
    assert min_singular_value(one) == pytest.approx(2.0)

    dup = DataMatrices(
        u_past=np.array([[1.0, 1.0]]), y_past=np.array([[2.0, 2.0]]),
        u_future=np.array([[3.0, 3.0]]), y_future=np.array([[4.0, 4.0]]),
        t_ini=1, horizon=1, input_dim=1, output_dim=1,
    )
    assert min_singular_value(dup) == pytest.approx(0.0, abs=1e-12)


def test_min_singular_value_matches_eig_oracle():
    rng = np.random.default_rng(4)
    traj = Trajectory(rng.normal(size=(9, 1)), rng.normal(size=(9, 1)), 0.1)
    ds = Dataset.from_trajectories([traj])
    m = build_data_matrices(ds, 1, 1)
    M = m.stacked()
    # independent oracle: sqrt of the smallest eigenvalue of the Gram matrix
    gram = M @ M.T if M.shape[0] <= M.shape[1] else M.T @ M
    expected = float(np.sqrt(max(np.linalg.eigvalsh(gram)[0], 0.0)))
    assert min_singular_value(m) == pytest.approx(expected, abs=1e-10)


def test_min_singular_value_permutation_invariant():
    rng = np.random.default_rng(5)
    traj = Trajectory(rng.normal(size=(20, 2)), rng.normal(size=(20, 2)), 0.1)
    ds = Dataset.from_trajectories([traj])
    m = build_data_matrices(ds, 2, 2)
    from deepc_sampling.sampling import restrict

    perm = rng.permutation(m.column_count)
    assert min_singular_value(restrict(m, perm)) == pytest.approx(
        min_singular_value(m), rel=1e-10)


def test_fundamental_lemma_exactness():
    # noiseless controllable LTI; PE input of order depth + state dim
    rng = np.random.default_rng(6)
    A = np.array([[0.9, 0.2], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    t_ini, horizon = 3, 4
    depth = t_ini + horizon
    T = 120
    u = rng.uniform(-1, 1, size=(T, 1))
    assert is_persistently_exciting(u, depth + 2)
    x = np.zeros(2)
    ys = []
    for k in range(T):
        ys.append(C @ x)
        x = A @ x + B @ u[k]
    ds = Dataset.from_trajectories([Trajectory(u, np.array(ys), 0.1)])
    mats = build_data_matrices(ds, t_ini, horizon)
    H = mats.stacked()
    for trial in range(20):
        x = rng.normal(size=2)
        uf = rng.uniform(-1, 1, size=(depth, 1))
        yf = []
        for k in range(depth):
            yf.append(C @ x)
            x = A @ x + B @ uf[k]
        w = np.concatenate([uf[:t_ini].ravel(), np.array(yf[:t_ini]).ravel(),
                            uf[t_ini:].ravel(), np.array(yf[t_ini:]).ravel()])
        g, *_ = np.linalg.lstsq(H, w, rcond=None)
        assert np.linalg.norm(H @ g - w) <= 1e-8


def test_degenerate_channel_replaced_and_flagged():
    traj = Trajectory(np.ones((10, 1)), np.linspace(0, 1, 10), 0.1)
    stats = NormalizationStats.from_trajectories([traj])
    assert stats.input_std[0] == 1.0
    assert stats.degenerate_inputs[0]
    assert not stats.degenerate_outputs[0]


def test_normalization_round_trip():
    rng = np.random.default_rng(7)
    traj = Trajectory(rng.normal(2.0, 3.0, size=(50, 2)), rng.normal(-1.0, 0.5, size=(50, 3)), 0.1)
    stats = NormalizationStats.from_trajectories([traj])
    u = rng.normal(size=(5, 2))
    y = rng.normal(size=(5, 3))
    assert np.allclose(stats.denormalize_inputs(stats.normalize_inputs(u)), u, atol=1e-12)
    assert np.allclose(stats.denormalize_outputs(stats.normalize_outputs(y)), y, atol=1e-12)


def test_dataset_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    trajs = [
        Trajectory(rng.normal(size=(15, 2)), rng.normal(size=(15, 4)), 0.1),
        Trajectory(rng.normal(size=(11, 2)), rng.normal(size=(11, 4)), 0.1),
    ]
    ds = Dataset.from_trajectories(trajs)
    ds.save(tmp_path / "data")
    loaded = Dataset.load(tmp_path / "data")
    assert len(loaded.trajectories) == 2
    for a, b in zip(ds.trajectories, loaded.trajectories):
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.outputs, b.outputs)
    assert np.array_equal(ds.stats.input_mean, loaded.stats.input_mean)
    assert np.array_equal(ds.stats.output_std, loaded.stats.output_std)

    header = (tmp_path / "data" / "trajectory_000.csv").read_text().splitlines()[0]
    assert header == "t,u_0,u_1,y_0,y_1,y_2,y_3"


def test_dataset_rejects_mixed_dimensions():
    t1 = Trajectory(np.ones((5, 1)), np.ones((5, 2)), 0.1)
    t2 = Trajectory(np.ones((5, 2)), np.ones((5, 2)), 0.1)
    with pytest.raises(ValueError):
        Dataset.from_trajectories([t1, t2])
