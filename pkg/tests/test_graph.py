import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faststi.graph import (DiffGcnParams, GraphError, RoadGraph, build_transitions, diff_gcn,
                           gaussian_kernel_adjacency, graph_from_distances, hop_scales, load_graph,
                           read_distances_csv, write_matrix_csv)


def dense_oracle(x, a, theta_f, theta_r, rho):
    """sum_k s_k (P^k X Tf_k + Q^k X Tr_k) with explicit matrix powers."""
    out_deg, in_deg = a.sum(1), a.sum(0)
    p = np.divide(a, out_deg[:, None], out=np.zeros_like(a), where=out_deg[:, None] > 0)
    q = np.divide(a.T, in_deg[:, None], out=np.zeros_like(a), where=in_deg[:, None] > 0)
    total = 0
    for k in range(theta_f.shape[0]):
        s = 1.0 if k == 0 else rho
        total = total + s * (np.linalg.matrix_power(p, k) @ x @ theta_f[k] + np.linalg.matrix_power(q, k) @ x @ theta_r[k])
    return total


def test_kernel_zero_distance_and_threshold():
    d = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    w = gaussian_kernel_adjacency(d, sigma=1.0, threshold=0.1)
    assert w[0, 1] == 1.0
    assert w[0, 2] == 0.0  # exp(-25) is below the threshold
    assert w[1, 2] == pytest.approx(0.367879441171442, rel=1e-14)
    assert np.all(np.diag(w) == 0)


def test_kernel_rejects_bad_sigma():
    with pytest.raises(GraphError):
        gaussian_kernel_adjacency(np.zeros((2, 2)), sigma=0.0)


def test_kernel_default_sigma_is_std_of_finite_distances():
    d = np.array([[0.0, 1.0, np.inf], [2.0, 0.0, 3.0], [np.inf, 4.0, 0.0]])
    w = gaussian_kernel_adjacency(d, threshold=0.0)
    sigma = np.std([1.0, 2.0, 3.0, 4.0])
    assert w[1, 0] == pytest.approx(np.exp(-4 / sigma ** 2))
    assert w[0, 2] == 0.0


def test_symmetric_adjacency_gives_equal_transitions():
    a = np.array([[0, 2, 1], [2, 0, 0], [1, 0, 0]], dtype=float)
    fwd, rev = build_transitions(a)
    np.testing.assert_array_equal(fwd, rev)


def test_directed_two_node_transitions():
    fwd, rev = build_transitions(np.array([[0.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(fwd, [[0, 1], [0, 0]])
    np.testing.assert_array_equal(rev, [[0, 0], [1, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10 ** 6))
def test_transitions_row_stochastic(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n)) * (rng.random((n, n)) < 0.6)
    np.fill_diagonal(a, 0)
    fwd, rev = build_transitions(a)
    for m, deg in ((fwd, a.sum(1)), (rev, a.sum(0))):
        sums = m.sum(1)
        np.testing.assert_allclose(sums[deg > 0], 1.0, rtol=1e-12)
        assert np.all(sums[deg == 0] == 0)


def test_roadgraph_rejects_negative_weights():
    with pytest.raises(GraphError):
        RoadGraph.from_adjacency(np.array([[0, -1.0], [1.0, 0]]))


def test_k0_ignores_graph(path_graph):
    rng = np.random.default_rng(0)
    p = DiffGcnParams.init(0, 3, 4, rho=0.5, rng=rng)
    x = rng.normal(size=(5, 3, 3))
    np.testing.assert_allclose(diff_gcn(x, path_graph, p), x @ (p.theta_fwd[0] + p.theta_rev[0]), rtol=1e-14)


def test_rho_zero_equals_k0(path_graph):
    rng = np.random.default_rng(1)
    p = DiffGcnParams.init(2, 3, 3, rho=0.0, rng=rng)
    p0 = DiffGcnParams(p.theta_fwd[:1], p.theta_rev[:1], 0.0)
    x = rng.normal(size=(4, 3, 3))
    np.testing.assert_allclose(diff_gcn(x, path_graph, p), diff_gcn(x, path_graph, p0), rtol=1e-14)


def test_path_graph_identity_filters(path_graph):
    eye = np.stack([np.eye(2)] * 3)
    p = DiffGcnParams(eye, eye, 0.1)
    x = np.ones((1, 3, 2))
    a = path_graph.adjacency
    expected = dense_oracle(x[0], a, eye, eye, 0.1)
    np.testing.assert_allclose(diff_gcn(x, path_graph, p)[0], expected, rtol=1e-14)
    # row-stochastic powers map ones to ones: 2 * (1 + 0.1 + 0.1)
    np.testing.assert_allclose(expected, 2.4)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 6), st.integers(0, 3), st.integers(0, 10 ** 6))
def test_matches_dense_oracle(n, k, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    np.fill_diagonal(a, 0)
    g = RoadGraph.from_adjacency(a)
    p = DiffGcnParams.init(k, 3, 2, rho=rng.random(), rng=rng)
    x = rng.normal(size=(n, 3))
    want = dense_oracle(x, a, p.theta_fwd, p.theta_rev, p.rho)
    got = diff_gcn(x, g, p)
    assert np.max(np.abs(got - want)) <= 1e-10 * max(1.0, np.max(np.abs(want)))


def test_hop_locality():
    n = 5
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = 1.0  # directed chain
    g = RoadGraph.from_adjacency(a)
    rng = np.random.default_rng(2)
    p = DiffGcnParams.init(1, 2, 2, rho=0.7, rng=rng)
    x = rng.normal(size=(n, 2))
    y = x.copy()
    y[2] += 1.0
    changed = np.any(diff_gcn(x, g, p) != diff_gcn(y, g, p), axis=1)
    assert set(np.nonzero(changed)[0]) <= {1, 2, 3}


def test_linearity_and_equivariance():
    rng = np.random.default_rng(4)
    a = rng.random((5, 5))
    np.fill_diagonal(a, 0)
    g = RoadGraph.from_adjacency(a)
    p = DiffGcnParams.init(2, 3, 4, rho=0.3, rng=rng)
    x1, x2 = rng.normal(size=(2, 6, 5, 3))
    np.testing.assert_allclose(diff_gcn(2 * x1 - 3 * x2, g, p), 2 * diff_gcn(x1, g, p) - 3 * diff_gcn(x2, g, p),
                               atol=1e-10)
    perm = rng.permutation(5)
    np.testing.assert_allclose(diff_gcn(x1[:, perm], g.permuted(perm), p), diff_gcn(x1, g, p)[:, perm], atol=1e-12)


def test_shape_errors(path_graph):
    p = DiffGcnParams.init(1, 3, 3)
    with pytest.raises(GraphError):
        diff_gcn(np.zeros((2, 4, 3)), path_graph, p)
    with pytest.raises(GraphError):
        diff_gcn(np.zeros((2, 3, 5)), path_graph, p)


def test_hop_scales():
    np.testing.assert_array_equal(hop_scales(3, 0.25), [1.0, 0.25, 0.25, 0.25])


def test_literal_reverse_switch():
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    g = RoadGraph.from_adjacency(a, literal_reverse=True)
    np.testing.assert_array_equal(g.reverse_transition, [[0, 1], [0, 0]])


def test_csv_edge_list_and_matrix(tmp_path):
    edges = tmp_path / "edges.csv"
    edges.write_text("from,to,distance\na,b,1.5\nb,c,2.0\n")
    d = read_distances_csv(edges, ["a", "b", "c"])
    assert d[0, 1] == 1.5 and np.isinf(d[1, 0]) and d[2, 2] == 0
    mat = tmp_path / "m.csv"
    write_matrix_csv(mat, np.where(np.isinf(d), 99.0, d), ["a", "b", "c"])
    back = read_distances_csv(mat, ["a", "b", "c"])
    assert back[0, 1] == 1.5 and back[1, 0] == 99.0
    assert load_graph(edges, ["a", "b", "c"]).n_nodes == 3
    with pytest.raises(GraphError):
        read_distances_csv(mat, ["x", "y", "z"])


def test_graph_from_distances_smoke():
    d = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
    g = graph_from_distances(d)
    assert g.forward_transition.shape == (3, 3)
