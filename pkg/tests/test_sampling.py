import numpy as np
import pytest

from deepc_sampling.trajectory_data import DataMatrices, DimensionMismatchError
from deepc_sampling.sampling import (
    SelectionRequest,
    combine_distances,
    future_distances,
    past_distances,
    restrict,
    select_contextual,
    select_random,
)


def _matrices_from_outputs(y_past, y_future, t_ini=1, horizon=1):
    """Wrap output blocks in DataMatrices with dummy input blocks."""
    y_past = np.asarray(y_past, dtype=float)
    y_future = np.asarray(y_future, dtype=float)
    K = y_past.shape[1]
    p_past = y_past.shape[0] // t_ini
    p_future = y_future.shape[0] // horizon
    assert p_past == p_future
    return DataMatrices(
        u_past=np.zeros((t_ini, K)), y_past=y_past,
        u_future=np.zeros((horizon, K)), y_future=y_future,
        t_ini=t_ini, horizon=horizon, input_dim=1, output_dim=p_past,
    )


def test_past_distances_basic():
    Y = np.array([[1.0], [0.0]])
    assert past_distances(Y, [0.0, 0.0]) == pytest.approx([1.0])


def test_past_distances_identity_case():
    y_ini = np.array([0.3, -0.7])
    Y = np.tile(y_ini[:, None], (1, 5))
    assert np.allclose(past_distances(Y, y_ini), 0.0)


def test_past_distances_triangle():
    Y = np.array([[3.0, 0.0], [4.0, 0.0]])
    assert past_distances(Y, [0.0, 0.0]) == pytest.approx([5.0, 0.0])


def test_past_distances_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        past_distances(np.zeros((3, 2)), np.zeros(2))


def test_future_distances_zero_weight_channel():
    Y = np.array([[2.0], [5.0]])
    d = future_distances(Y, [1.0, 1.0], [1.0, 0.0])
    assert d == pytest.approx([1.0])


def test_future_distances_identity_weights_euclidean():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(6, 4))
    r = rng.normal(size=6)
    d = future_distances(Y, r, np.ones(2))
    assert np.allclose(d, np.linalg.norm(Y - r[:, None], axis=0))


def test_future_distances_vehicle_weights():
    # Q = diag(1, 1, 0.1, 0.1); column offset from r by one unit in channel 2
    r = np.array([0.5, -0.5, 1.0, 0.2])
    col = r + np.array([0.0, 0.0, 1.0, 0.0])
    d = future_distances(col[:, None], r, [1.0, 1.0, 0.1, 0.1])
    assert d == pytest.approx([np.sqrt(0.1)])


def test_future_distances_negative_weight_rejected():
    with pytest.raises(ValueError):
        future_distances(np.zeros((2, 1)), np.zeros(2), [-1.0, 0.0])


def test_combine_distances_symmetric_cancellation():
    # mu = 1, population std = 1 for both -> z-scores cancel
    d = combine_distances([0.0, 2.0], [2.0, 0.0])
    assert d == pytest.approx([0.0, 0.0])


def test_combine_distances_constant_vector_drops_out():
    d_p = np.array([1.0, 3.0, 2.0])
    d = combine_distances(d_p, np.full(3, 7.0))
    expected = (d_p - d_p.mean()) / d_p.std()
    assert d == pytest.approx(expected)


def test_combine_distances_single_column():
    assert combine_distances([5.0], [3.0]) == pytest.approx([0.0])


def test_select_contextual_top_k():
    # fused distances 0.5, 0.1, 0.9 -> pick columns 1 then 0
    y_past = np.array([[0.5, 0.1, 0.9]])
    y_future = np.zeros((1, 3))
    mats = _matrices_from_outputs(y_past, y_future)
    req = SelectionRequest(y_ini=[0.0], reference=[0.0], q_weights=[1.0], n_samples=2)
    res = select_contextual(mats, req)
    assert res.indices.tolist() == [1, 0]


def test_select_contextual_tie_break_ascending_index():
    y_past = np.ones((1, 4))
    y_future = np.ones((1, 4))
    mats = _matrices_from_outputs(y_past, y_future)
    req = SelectionRequest(y_ini=[0.0], reference=[0.0], q_weights=[1.0], n_samples=2)
    res = select_contextual(mats, req)
    assert res.indices.tolist() == [0, 1]


def test_select_contextual_truncates_with_warning(caplog):
    mats = _matrices_from_outputs(np.ones((1, 3)), np.ones((1, 3)))
    req = SelectionRequest(y_ini=[0.0], reference=[0.0], q_weights=[1.0], n_samples=10)
    with caplog.at_level("WARNING"):
        res = select_contextual(mats, req)
    assert sorted(res.indices.tolist()) == [0, 1, 2]
    assert any("exceeds column count" in r.message for r in caplog.records)


def test_select_contextual_scale_invariance():
    rng = np.random.default_rng(1)
    for trial in range(50):
        # K >= 3: two columns always z-score to an exact tie, which rounding
        # breaks arbitrarily after scaling
        K = int(rng.integers(3, 51))
        t_ini, horizon, p = 2, 3, 2
        y_past = rng.normal(size=(t_ini * p, K))
        y_future = rng.normal(size=(horizon * p, K))
        y_ini = rng.normal(size=t_ini * p)
        ref = rng.normal(size=horizon * p)
        q = rng.uniform(0.1, 2.0, size=p)
        n_s = int(rng.integers(1, K + 1))
        mats = _matrices_from_outputs(y_past, y_future, t_ini, horizon)
        base = select_contextual(mats, SelectionRequest(y_ini, ref, q, n_s))
        c = float(rng.uniform(0.1, 10.0))
        scaled = _matrices_from_outputs(c * y_past, c * y_future, t_ini, horizon)
        res = select_contextual(scaled, SelectionRequest(c * y_ini, c * ref, q, n_s))
        assert set(base.indices.tolist()) == set(res.indices.tolist())
        assert np.allclose(base.combined_distances, res.combined_distances, atol=1e-9)


def test_select_contextual_exact_match_dominance():
    rng = np.random.default_rng(2)
    for trial in range(50):
        K = int(rng.integers(2, 51))
        t_ini, horizon, p = 2, 2, 2
        y_past = rng.normal(size=(t_ini * p, K))
        y_future = rng.normal(size=(horizon * p, K))
        y_ini = rng.normal(size=t_ini * p)
        ref = rng.normal(size=horizon * p)
        j = int(rng.integers(K))
        y_past[:, j] = y_ini
        y_future[:, j] = ref
        mats = _matrices_from_outputs(y_past, y_future, t_ini, horizon)
        res = select_contextual(mats, SelectionRequest(y_ini, ref, np.ones(p), 1))
        assert res.indices[0] == j


def test_select_contextual_relevance_ordering():
    rng = np.random.default_rng(3)
    mats = _matrices_from_outputs(rng.normal(size=(2, 30)), rng.normal(size=(2, 30)), 2, 2)
    req = SelectionRequest(rng.normal(size=2), rng.normal(size=2), [1.0], 7)
    res = select_contextual(mats, req)
    d = res.combined_distances
    inside = np.zeros(30, dtype=bool)
    inside[res.indices] = True
    assert d[inside].max() <= d[~inside].min() + 1e-12


def test_select_contextual_softmin_concentrates_at_low_temperature():
    rng = np.random.default_rng(4)
    y_past = rng.normal(size=(2, 10))
    y_future = rng.normal(size=(2, 10))
    mats = _matrices_from_outputs(y_past, y_future, 1, 1, )
    req = SelectionRequest(rng.normal(size=2), rng.normal(size=2), [1.0, 1.0], 3)
    deterministic = set(select_contextual(mats, req).indices.tolist())
    hits = 0
    draws = 10_000
    for k in range(draws):
        res = select_contextual(mats, req, rng_seed=k, temperature=1e-4)
        if set(res.indices.tolist()) == deterministic:
            hits += 1
    assert hits / draws > 0.999


def test_select_contextual_softmin_reproducible():
    rng = np.random.default_rng(5)
    mats = _matrices_from_outputs(rng.normal(size=(2, 20)), rng.normal(size=(2, 20)), 2, 2)
    req = SelectionRequest(rng.normal(size=2), rng.normal(size=2), [1.0], 5)
    a = select_contextual(mats, req, rng_seed=42, temperature=0.1)
    b = select_contextual(mats, req, rng_seed=42, temperature=0.1)
    assert np.array_equal(a.indices, b.indices)


def test_select_random_all_indices_when_n_equals_k():
    res = select_random(5, 5, rng_seed=0)
    assert sorted(res.indices.tolist()) == [0, 1, 2, 3, 4]


def test_select_random_deterministic_per_seed():
    a = select_random(100, 10, rng_seed=7)
    b = select_random(100, 10, rng_seed=7)
    assert np.array_equal(a.indices, b.indices)
    c = select_random(100, 10, rng_seed=8)
    assert not np.array_equal(a.indices, c.indices)


def test_select_random_uniformity():
    # Monte Carlo uniformity: aggregate counts over seeds; the average absolute
    # frequency deviation from 1/K stays well inside 0.005.
    K, n_s, seeds = 10_000, 100, 1000
    counts = np.zeros(K)
    for seed in range(seeds):
        counts[select_random(K, n_s, rng_seed=seed).indices] += 1
    freq = counts / seeds
    assert freq.mean() == pytest.approx(n_s / K)
    assert np.abs(freq - n_s / K).mean() < 0.005


def test_restrict_identity_and_single_column():
    rng = np.random.default_rng(6)
    mats = _matrices_from_outputs(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), 1, 1)
    full = restrict(mats, np.arange(4))
    assert np.array_equal(full.y_past, mats.y_past)
    one = restrict(mats, [0])
    assert one.column_count == 1
    assert np.array_equal(one.y_past[:, 0], mats.y_past[:, 0])


def test_restrict_idempotent_and_out_of_range():
    rng = np.random.default_rng(7)
    mats = _matrices_from_outputs(rng.normal(size=(1, 5)), rng.normal(size=(1, 5)))
    sub = restrict(mats, [1, 3])
    again = restrict(sub, np.arange(sub.column_count))
    assert np.array_equal(sub.y_future, again.y_future)
    with pytest.raises(IndexError):
        restrict(mats, [5])
