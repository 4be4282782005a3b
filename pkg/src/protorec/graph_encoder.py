"""Two-layer graph attention over the entity graph (single head per layer).

Message passing treats every triplet as an undirected edge and ignores the
relation id; each node also attends to itself.
"""

from __future__ import annotations

import numpy as np

from .datamodel import FEATURE_DIM, EntityGraph
from .layers import Module
from .numerics import (Tensor, as_tensor, elu, exp, glorot_uniform, leaky_relu, matmul, parameter,
                       segment_sum)

LEAKY_SLOPE = 0.2


def add_self_loops(dst: np.ndarray, src: np.ndarray, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.concatenate([np.stack([dst, src], 1), np.stack([np.arange(num_nodes)] * 2, 1)])
    pairs = np.unique(pairs, axis=0)
    return pairs[:, 0], pairs[:, 1]


class GatLayerParams(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = parameter(glorot_uniform(rng, d_in, d_out))
        self.att_dst = parameter(glorot_uniform(rng, d_out, 1, shape=(d_out,)))
        self.att_src = parameter(glorot_uniform(rng, d_out, 1, shape=(d_out,)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


def gat_layer(features, adjacency: tuple[np.ndarray, np.ndarray], params: GatLayerParams,
              activation=elu, return_attention: bool = False):
    """One attention-weighted neighbourhood aggregation.

    ``adjacency`` is a pair ``(dst, src)`` of edge endpoints; messages flow
    src -> dst. Self-loops are added when missing. ``activation=None`` leaves
    the aggregate linear.
    """
    x = as_tensor(features)
    n = x.shape[0]
    dst, src = add_self_loops(np.asarray(adjacency[0]), np.asarray(adjacency[1]), n)
    wx = matmul(x, params.weight)
    logits = leaky_relu(matmul(wx, params.att_dst)[dst] + matmul(wx, params.att_src)[src], LEAKY_SLOPE)
    # per-destination max; a constant shift, so no gradient is needed through it
    top = np.full(n, -np.inf)
    np.maximum.at(top, dst, logits.data)
    weights = exp(logits - top[dst])
    alpha = weights / segment_sum(weights, dst, n)[dst]
    out = segment_sum(alpha.reshape(-1, 1) * wx[src], dst, n)
    if activation is not None:
        out = activation(out)
    if return_attention:
        return out, alpha.data, (dst, src)
    return out


class GraphEncoder(Module):
    """Stacked attention layers producing one embedding row per entity."""

    def __init__(self, rng: np.random.Generator, dims: tuple[int, ...] = (FEATURE_DIM, 64, 64)):
        self.dims = dims
        self.layers = [GatLayerParams(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self._edges: tuple = (None, None)  # (graph, edge index) of the last graph seen

    def __call__(self, graph: EntityGraph) -> Tensor:
        return encode_entities(graph, self)

    def edges(self, graph: EntityGraph) -> tuple[np.ndarray, np.ndarray]:
        # keep the graph itself so a recycled id can never hit a stale entry
        if self._edges[0] is not graph:
            self._edges = (graph, graph.edge_index(self_loops=True))
        return self._edges[1]


def encode_entities(graph: EntityGraph, encoder: GraphEncoder, features=None) -> Tensor:
    """Entity embeddings H^G; ELU between layers, the last layer left linear."""
    x = graph.features if features is None else features
    if np.shape(x)[1] != encoder.dims[0]:
        raise ValueError(f"entity features must be {encoder.dims[0]}-dimensional, got {np.shape(x)[1]}")
    adj = encoder.edges(graph)
    h = as_tensor(x)
    for i, layer in enumerate(encoder.layers):
        last = i == len(encoder.layers) - 1
        h = gat_layer(h, adj, layer, activation=None if last else elu)
    return h


class LookupEncoder(Module):
    """Graph-free ablation: a trainable table seeded with zero-padded features."""

    def __init__(self, graph: EntityGraph, dim: int = 64):
        table = np.zeros((graph.num_entities, dim))
        width = min(dim, graph.features.shape[1])
        table[:, :width] = graph.features[:, :width]
        self.table = parameter(table)

    def __call__(self, graph: EntityGraph) -> Tensor:
        if graph.num_entities != self.table.shape[0]:
            raise ValueError("lookup table size does not match the graph")
        return self.table
