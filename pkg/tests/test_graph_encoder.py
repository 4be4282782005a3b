import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protorec.datamodel import EntityGraph
from protorec.graph_encoder import (GatLayerParams, GraphEncoder, LookupEncoder, add_self_loops, encode_entities,
                                    gat_layer)
from protorec.numerics import Tensor, elu, gradcheck


def path_graph(n: int, seed: int = 0) -> EntityGraph:
    trip = np.array([[i, 0, i + 1] for i in range(n - 1)])
    return EntityGraph(n, 1, trip, np.random.default_rng(seed).normal(size=(n, 32)))


def star_graph(n: int, seed: int = 0) -> EntityGraph:
    trip = np.array([[0, 0, i] for i in range(1, n)])
    return EntityGraph(n, 1, trip, np.random.default_rng(seed).normal(size=(n, 32)))


def random_graph(n: int, p: float, seed: int) -> EntityGraph:
    rng = np.random.default_rng(seed)
    heads, tails = np.triu_indices(n, 1)
    keep = rng.random(len(heads)) < p
    trip = np.stack([heads[keep], rng.integers(3, size=keep.sum()), tails[keep]], 1)
    return EntityGraph(n, 3, trip.reshape(-1, 3), rng.normal(size=(n, 32)))


def test_self_loops_added_once():
    dst, src = add_self_loops(np.array([0, 1, 1]), np.array([1, 0, 1]), 3)
    pairs = set(zip(dst.tolist(), src.tolist()))
    assert pairs == {(0, 1), (1, 0), (1, 1), (0, 0), (2, 2)}
    assert len(dst) == len(pairs)


def test_isolated_node_output_is_activation_of_projection():
    rng = np.random.default_rng(0)
    params = GatLayerParams(4, 3, rng)
    x = rng.normal(size=(2, 4))
    out = gat_layer(x, (np.array([], dtype=int), np.array([], dtype=int)), params)
    np.testing.assert_allclose(out.data, elu(Tensor(x @ params.weight.data)).data, atol=1e-15)


def test_identical_neighbours_get_uniform_attention():
    rng = np.random.default_rng(1)
    params = GatLayerParams(4, 5, rng)
    x = np.tile(rng.normal(size=4), (4, 1))
    dst = np.array([0, 0, 0])
    src = np.array([1, 2, 3])
    _, alpha, (d, _) = gat_layer(x, (dst, src), params, return_attention=True)
    np.testing.assert_allclose(alpha[d == 0], 0.25, atol=1e-15)


@given(st.integers(2, 25), st.floats(0.05, 0.6), st.integers(0, 10_000))
def test_attention_sums_to_one_per_node(n, p, seed):
    g = random_graph(n, p, seed)
    params = GatLayerParams(32, 8, np.random.default_rng(seed))
    dst, src = g.edge_index(self_loops=False)
    _, alpha, (d, _) = gat_layer(g.features, (dst, src), params, return_attention=True)
    sums = np.bincount(d, weights=alpha, minlength=n)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_output_shape_for_500_entities():
    g = random_graph(500, 0.01, 0)
    h = encode_entities(g, GraphEncoder(np.random.default_rng(0)))
    assert h.shape == (500, 64)
    assert np.isfinite(h.data).all()


def test_encoding_is_deterministic():
    g = random_graph(40, 0.1, 3)
    a = encode_entities(g, GraphEncoder(np.random.default_rng(5))).data
    b = encode_entities(g, GraphEncoder(np.random.default_rng(5))).data
    assert np.array_equal(a, b)


def test_wrong_feature_dim_raises():
    g = path_graph(4)
    with pytest.raises(ValueError, match="32-dimensional"):
        encode_entities(g, GraphEncoder(np.random.default_rng(0)), features=np.zeros((4, 16)))


@pytest.mark.parametrize("graph_fn, target, far", [(path_graph, 0, 3), (path_graph, 5, 8), (path_graph, 5, 2)])
def test_two_hop_locality_on_path(graph_fn, target, far):
    g = graph_fn(10)
    enc = GraphEncoder(np.random.default_rng(0))
    base = encode_entities(g, enc).data
    feats = g.features.copy()
    feats[far] += 5.0
    moved = encode_entities(g, enc, features=feats).data
    assert np.max(np.abs(moved[target] - base[target])) <= 1e-12
    # the two-hop neighbour does move
    near = far - 2 if far > target else far + 2
    assert np.max(np.abs(moved[near] - base[near])) > 1e-6


def test_star_leaves_reach_each_other_in_two_hops():
    g = star_graph(6)
    enc = GraphEncoder(np.random.default_rng(0))
    base = encode_entities(g, enc).data
    feats = g.features.copy()
    feats[5] += 5.0
    moved = encode_entities(g, enc, features=feats).data
    assert np.all(np.max(np.abs(moved - base), axis=1) > 1e-8)


def test_relation_ids_do_not_matter():
    g = random_graph(30, 0.15, 2)
    relabeled = EntityGraph(g.num_entities, 7, g.triplets * np.array([1, 0, 1]) + np.array([0, 6, 0]),
                            g.features)
    enc = GraphEncoder(np.random.default_rng(1))
    assert np.array_equal(encode_entities(g, enc).data, encode_entities(relabeled, enc).data)


def test_edges_are_undirected():
    trip = np.array([[0, 0, 1]])
    g1 = EntityGraph(3, 1, trip, np.random.default_rng(0).normal(size=(3, 32)))
    g2 = EntityGraph(3, 1, trip[:, ::-1].copy(), g1.features)
    enc = GraphEncoder(np.random.default_rng(1))
    assert np.array_equal(encode_entities(g1, enc).data, encode_entities(g2, enc).data)


def test_encoder_gradient_on_ten_nodes():
    g = random_graph(10, 0.3, 4)
    enc = GraphEncoder(np.random.default_rng(2), dims=(32, 6, 5))
    w = np.random.default_rng(3).normal(size=(10, 5))
    res = gradcheck(lambda: (encode_entities(g, enc) * w).sum(), enc.parameters(), probes=100,
                    rng=np.random.default_rng(4))
    assert res.max_rel_error <= 1e-4


def test_lookup_encoder_zero_pads_features():
    g = path_graph(4)
    table = LookupEncoder(g, 64)(g)
    assert table.shape == (4, 64)
    np.testing.assert_array_equal(table.data[:, :32], g.features)
    assert not table.data[:, 32:].any()
    assert table.requires_grad
