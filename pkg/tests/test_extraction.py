import numpy as np
import pytest

from moec import extraction as ex
from moec.clustering import ClusterAssignment
from moec.errors import ConfigError, DegenerateStatisticsError, ValidationError
from moec.tensor import gelu
from moec.vit import CaptureSet


def make_records(x, y, layer=0):
    n = len(x)
    return CaptureSet(np.full(n, layer, np.int64), np.arange(n), np.arange(n),
                      np.zeros(n, np.int64),
                      np.asarray(x, np.float32), np.asarray(y, np.float32))


def test_variance_identical_members_zero():
    y = np.tile(np.array([1.0, -2.0, 3.0]), (5, 1))
    recs = make_records(np.ones((5, 2)), y)
    a = ClusterAssignment(np.zeros(5, np.int64), 1)
    assert np.allclose(ex.cluster_variances(recs, a, 0), 0)


def test_variance_two_members_population():
    recs = make_records(np.ones((2, 2)), [[0.0, 0.0], [2.0, 0.0]])
    a = ClusterAssignment(np.zeros(2, np.int64), 1)
    v = ex.cluster_variances(recs, a, 0)
    assert np.allclose(v, [1.0, 0.0])


def test_variance_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(50, 8))
    labels = rng.integers(0, 2, size=50).astype(np.int64)
    recs = make_records(rng.normal(size=(50, 4)), y)
    a = ClusterAssignment(labels, 2)
    for c in (0, 1):
        m = y[labels == c]
        mean = m.sum(0) / len(m)
        want = ((m - mean) ** 2).sum(0) / len(m)
        assert np.max(np.abs(ex.cluster_variances(recs, a, c) - want)) < 1e-6


def test_variance_singleton_errors():
    recs = make_records(np.ones((3, 2)), np.ones((3, 2)))
    a = ClusterAssignment(np.array([0, 1, 1], np.int64), 2)
    with pytest.raises(DegenerateStatisticsError):
        ex.cluster_variances(recs, a, 0)


def test_variance_excludes_noise():
    y = np.array([[1.0], [1.0], [100.0]])
    recs = make_records(np.ones((3, 2)), y)
    a = ClusterAssignment(np.array([0, 0, -1], np.int64), 1)
    assert np.allclose(ex.cluster_variances(recs, a, 0), 0)


def test_select_neurons_worked_example():
    assert ex.select_neurons(np.array([4.0, 3.0, 2.0, 1.0]), 0.7).tolist() == [0, 1]


def test_select_neurons_p_one_drops_zeros():
    got = ex.select_neurons(np.array([0.0, 2.0, 0.0, 1.0]), 1.0)
    assert got.tolist() == [1, 3]


def test_select_neurons_tie_breaks_low_index():
    got = ex.select_neurons(np.array([1.0, 3.0, 3.0, 1.0]), 0.5)
    assert got.tolist() == [1, 2]
    got = ex.select_neurons(np.array([2.0, 2.0, 2.0, 2.0]), 0.4)
    assert got.tolist() == [0, 1]


def test_select_neurons_all_zero_errors():
    with pytest.raises(DegenerateStatisticsError):
        ex.select_neurons(np.zeros(4), 0.5)


def test_select_neurons_negative_rejected():
    with pytest.raises(ValidationError):
        ex.select_neurons(np.array([1.0, -0.5]), 0.5)


def test_select_neurons_prefix_oracle_and_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        stat = rng.random(n) * rng.choice([0.1, 1.0, 10.0])
        stat[rng.random(n) < 0.1] = 0.0
        if stat.sum() == 0:
            stat[0] = 1.0
        p1, p2 = sorted(rng.random(2) * 0.98 + 0.01)
        order = np.argsort(-stat, kind="stable")
        total = stat.sum()
        prev_set = None
        for p in (p1, p2):
            got = ex.select_neurons(stat, p)
            m = len(got)
            # descending-order prefix, threshold met, shorter prefix fails
            assert set(got.tolist()) == set(order[:m].tolist())
            assert stat[order[:m]].sum() >= p * total - 1e-9 * total
            if m > 1:
                assert stat[order[:m - 1]].sum() < p * total
            if prev_set is not None:
                assert prev_set <= set(got.tolist())
            prev_set = set(got.tolist())


def test_mean_input_single_member():
    x = np.array([[3.0, 4.0]])
    recs = make_records(x, np.ones((1, 3)))
    a = ClusterAssignment(np.zeros(1, np.int64), 1)
    assert np.allclose(ex.mean_input(recs, a, 0), [0.6, 0.8])


def test_mean_input_cancellation_errors():
    x = np.array([[1.0, 2.0], [-1.0, -2.0]])
    recs = make_records(x, np.ones((2, 3)))
    a = ClusterAssignment(np.zeros(2, np.int64), 1)
    with pytest.raises(DegenerateStatisticsError):
        ex.mean_input(recs, a, 0)


def test_mean_input_matches_naive_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 6)) + 0.5
    labels = rng.integers(0, 3, size=40).astype(np.int64)
    recs = make_records(x, np.ones((40, 2)))
    a = ClusterAssignment(labels, 3)
    for c in range(3):
        m = x[labels == c]
        s = np.zeros(6)
        for row in m:
            s += row
        want = s / len(m)
        want = want / np.linalg.norm(want)
        assert np.max(np.abs(ex.mean_input(recs, a, c) - want)) < 1e-6


def test_extract_full_coverage_masked_mlp_equals_dense():
    rng = np.random.default_rng(3)
    e, hid, n = 6, 12, 30
    w1 = rng.normal(size=(e, hid)).astype(np.float32)
    b1 = rng.normal(size=hid).astype(np.float32)
    w2 = rng.normal(size=(hid, e)).astype(np.float32)
    b2 = rng.normal(size=e).astype(np.float32)
    x = rng.normal(size=(n, e)).astype(np.float32) + 0.3
    y = gelu(x @ w1 + b1)
    recs = make_records(x, y)
    a = ClusterAssignment(np.zeros(n, np.int64), 1)
    experts = ex.extract_layer(recs, a, ex.ExtractionConfig(extraction_percentage=1.0))
    assert len(experts) == 1
    idx = experts[0].neuron_indices
    mask = np.zeros(hid, np.float32)
    mask[idx] = 1.0
    dense_out = y @ w2 + b2
    masked_out = (y * mask) @ w2 + b2
    assert np.max(np.abs(dense_out - masked_out)) < 1e-4


def test_extract_orthogonal_groups():
    rng = np.random.default_rng(4)
    base = np.full(8, 0.05)
    ya = np.tile(base, (60, 1))
    ya[:, :4] += rng.normal(size=(60, 4))
    yb = np.tile(base, (60, 1))
    yb[:, 4:] += rng.normal(size=(60, 4))
    y = np.vstack([ya, yb])
    x = np.vstack([np.tile([1.0, 0.0], (60, 1)), np.tile([0.0, 1.0], (60, 1))])
    recs = make_records(x, y)
    a = ClusterAssignment(np.r_[np.zeros(60), np.ones(60)].astype(np.int64), 2)
    experts = ex.extract_layer(recs, a, ex.ExtractionConfig(extraction_percentage=0.99))
    assert set(experts[0].neuron_indices.tolist()) <= {0, 1, 2, 3}
    assert set(experts[1].neuron_indices.tolist()) <= {4, 5, 6, 7}


def test_extract_random_reproducible_and_same_cardinality():
    rng = np.random.default_rng(5)
    recs = make_records(rng.normal(size=(50, 4)) + 1.0, rng.normal(size=(50, 10)))
    a = ClusterAssignment((np.arange(50) % 2).astype(np.int64), 2)
    var = ex.extract_layer(recs, a, ex.ExtractionConfig(extraction_percentage=0.6))
    r1 = ex.extract_layer(recs, a, ex.ExtractionConfig(0.6, "random", seed=9))
    r2 = ex.extract_layer(recs, a, ex.ExtractionConfig(0.6, "random", seed=9))
    r3 = ex.extract_layer(recs, a, ex.ExtractionConfig(0.6, "random", seed=10))
    for v, a1, a2 in zip(var, r1, r2):
        assert len(a1.neuron_indices) == len(v.neuron_indices)
        assert a1.neuron_indices.tolist() == a2.neuron_indices.tolist()
    assert any(p.neuron_indices.tolist() != q.neuron_indices.tolist()
               for p, q in zip(r1, r3))


def test_extract_magnitude_uses_mean_activation():
    # dim 0: large constant mean, zero variance; dim 1: zero mean, large variance
    n = 40
    y = np.zeros((n, 2), np.float32)
    y[:, 0] = 5.0
    y[:, 1] = np.where(np.arange(n) % 2 == 0, 3.0, -3.0)
    recs = make_records(np.ones((n, 2)), y)
    a = ClusterAssignment(np.zeros(n, np.int64), 1)
    mag = ex.extract_layer(recs, a, ex.ExtractionConfig(0.9, "magnitude"))
    var = ex.extract_layer(recs, a, ex.ExtractionConfig(0.9, "variance"))
    assert mag[0].neuron_indices.tolist() == [0]
    assert var[0].neuron_indices.tolist() == [1]


def test_variance_concentration_fixture():
    # variance concentrated in few dims, |mean| spread evenly
    rng = np.random.default_rng(6)
    n, d = 200, 16
    y = np.full((n, d), 1.0) + rng.normal(size=(n, d)) * 0.01
    y[:, 0] += rng.normal(size=n) * 3.0
    y[:, 1] += rng.normal(size=n) * 2.0
    recs = make_records(np.ones((n, 2)), y)
    a = ClusterAssignment(np.zeros(n, np.int64), 1)
    n_var = len(ex.select_neurons(ex.cluster_variances(recs, a, 0), 0.8))
    n_mag = len(ex.select_neurons(ex.cluster_mean_magnitudes(recs, a, 0), 0.8))
    assert n_var <= n_mag


def test_extract_mixed_layers_rejected():
    recs = CaptureSet(np.arange(4) % 2, np.arange(4), np.arange(4),
                      np.zeros(4, np.int64), np.ones((4, 2), np.float32),
                      np.ones((4, 3), np.float32))
    a = ClusterAssignment(np.zeros(4, np.int64), 1)
    with pytest.raises(ValidationError):
        ex.extract_layer(recs, a, ex.ExtractionConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        ex.ExtractionConfig(extraction_percentage=0.0)
    with pytest.raises(ConfigError):
        ex.ExtractionConfig(extraction_percentage=1.2)
    with pytest.raises(ConfigError):
        ex.ExtractionConfig(criterion="pca")


def test_expert_spec_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    recs = make_records(rng.normal(size=(30, 4)) + 1.0, rng.normal(size=(30, 8)))
    a = ClusterAssignment((np.arange(30) % 2).astype(np.int64), 2)
    experts = ex.extract_layer(recs, a, ex.ExtractionConfig(0.8))
    path = tmp_path / "experts.json"
    ex.save_experts(path, {0: experts}, meta={"note": "t"})
    loaded, meta = ex.load_experts(path)
    assert meta == {"note": "t"}
    for got, want in zip(loaded[0], experts):
        assert got.neuron_indices.tolist() == want.neuron_indices.tolist()
        assert np.max(np.abs(got.mu - want.mu)) < 1e-7
        assert got.member_count == want.member_count
