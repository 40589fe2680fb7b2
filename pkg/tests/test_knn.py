import numpy as np
import pytest

from meshseg.knn import (
    GraphConfigError,
    KnnGraph,
    build_block_knn_graph,
    build_knn_graph,
    edge_tensors,
)
from meshseg.tensor import Tensor, gradient_check, mul


def brute_force_knn(features, k, include_self=False):
    # independent O(M^2) oracle: explicit difference distances, ties by index
    features = np.asarray(features, dtype=np.float64)
    m = features.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        cand = []
        for j in range(m):
            if j == i and not include_self:
                continue
            d = float(np.sum((features[i] - features[j]) ** 2))
            cand.append((d, j))
        cand.sort()
        out[i] = [j for _, j in cand[:k]]
    return out


def test_line_features_hand_example():
    graph = build_knn_graph(np.array([[0.0], [1.0], [3.0], [7.0]]), k=2)
    assert graph.indices[0].tolist() == [1, 2]


def test_complete_graph_when_k_is_m_minus_one():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(6, 3))
    graph = build_knn_graph(feats, k=5)
    for i in range(6):
        assert sorted(graph.indices[i].tolist()) == sorted(set(range(6)) - {i})
        d = np.sum((feats[graph.indices[i]] - feats[i]) ** 2, axis=1)
        assert np.all(np.diff(d) >= -1e-12)


def test_duplicate_rows_tie_break_to_lower_index():
    feats = np.array([[0.0], [1.0], [1.0], [1.0]])
    a = build_knn_graph(feats, k=2)
    b = build_knn_graph(feats, k=2)
    assert a.indices[0].tolist() == [1, 2]  # equal distances -> lower ids first
    assert np.array_equal(a.indices, b.indices)


def test_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(42)
    for _ in range(10):
        m = int(rng.integers(10, 120))
        k = int(rng.integers(1, min(m - 1, 9)))
        feats = rng.normal(size=(m, int(rng.integers(1, 6))))
        graph = build_knn_graph(feats, k)
        assert np.array_equal(graph.indices, brute_force_knn(feats, k))


def test_matches_brute_force_with_exact_ties():
    # integer grid features produce exactly representable tied distances
    rng = np.random.default_rng(1)
    feats = rng.integers(0, 4, size=(40, 2)).astype(np.float64)
    graph = build_knn_graph(feats, k=6)
    assert np.array_equal(graph.indices, brute_force_knn(feats, 6))


def test_self_excluded_by_default_and_included_on_request():
    feats = np.array([[0.0], [5.0], [9.0]])
    g = build_knn_graph(feats, k=2)
    assert not any(i in g.indices[i] for i in range(3))
    g_self = build_knn_graph(feats, k=2, include_self=True)
    assert all(g_self.indices[i, 0] == i for i in range(3))


def test_k_bounds_error():
    with pytest.raises(GraphConfigError):
        build_knn_graph(np.zeros((4, 2)), k=4)


def test_permutation_consistency():
    rng = np.random.default_rng(17)
    feats = rng.normal(size=(30, 3))  # continuous: tie-free
    perm = rng.permutation(30)
    g = build_knn_graph(feats, k=4)
    g_perm = build_knn_graph(feats[perm], k=4)
    inv = np.argsort(perm)
    assert np.array_equal(g_perm.indices, inv[g.indices[perm]])


def test_block_knn_stays_inside_blocks():
    rng = np.random.default_rng(8)
    feats = np.concatenate([rng.normal(size=(10, 2)), rng.normal(size=(10, 2))])
    graph = build_block_knn_graph(feats, block_size=10, k=3)
    assert np.all(graph.indices[:10] < 10)
    assert np.all(graph.indices[10:] >= 10)
    single = build_knn_graph(feats[10:], k=3)
    assert np.array_equal(graph.indices[10:] - 10, single.indices)


# ---------------------------------------------------------------------------
# edge tensors
# ---------------------------------------------------------------------------

def test_edge_tensor_hand_values():
    feats = Tensor(np.array([[1.0], [4.0]]), dtype=np.float64)
    graph = KnnGraph(indices=np.array([[1], [0]]), k=1)
    concat, diff = edge_tensors(feats, graph)
    assert concat.data[0, 0].tolist() == [1.0, 4.0]
    assert diff.data[0, 0].tolist() == [-3.0]


def test_edge_tensor_identical_rows_zero_diff():
    feats = Tensor(np.ones((3, 2)), dtype=np.float64)
    graph = build_knn_graph(feats.data, k=2)
    _, diff = edge_tensors(feats, graph)
    assert np.all(diff.data == 0)


def test_edge_tensors_match_index_by_index_construction():
    rng = np.random.default_rng(23)
    raw = rng.normal(size=(6, 3))
    feats = Tensor(raw, dtype=np.float64)
    graph = build_knn_graph(raw, k=2)
    concat, diff = edge_tensors(feats, graph)
    for i in range(6):
        for j in range(2):
            nb = graph.indices[i, j]
            assert np.array_equal(concat.data[i, j], np.concatenate([raw[i], raw[nb]]))
            assert np.array_equal(diff.data[i, j], raw[i] - raw[nb])


def test_edge_tensor_gradients_match_fd():
    rng = np.random.default_rng(29)
    raw = rng.normal(size=(5, 3))
    graph = build_knn_graph(raw, k=2)
    w1 = Tensor(rng.normal(size=(5, 2, 6)), dtype=np.float64)
    w2 = Tensor(rng.normal(size=(5, 2, 3)), dtype=np.float64)

    def f(feats):
        concat, diff = edge_tensors(feats, graph)
        return (mul(concat, w1).sum() + mul(diff, w2).sum())

    err = gradient_check(f, [Tensor(raw, requires_grad=True, dtype=np.float64)])
    assert err <= 1e-4
