"""User representations built from entity sequences across source domains.

A user's behaviour items in each source domain are expanded into entities,
capped to the most recent ``history_cap`` entries and right-padded; the
blocks are concatenated in domain-id order. M attention kernels pool the
sequence into M interest vectors, which are optionally enriched with
masked prototype context and then fused into one vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import DatasetBundle
from .layers import Mlp, Module
from .numerics import (EmptySupportError, Tensor, as_tensor, concat, glorot_uniform, matmul,
                       parameter, softmax, tanh)
from .prototype import PrototypeBank, similarity, topk_mask

PLAIN = "plain"
ENHANCED = "enhanced"


@dataclass(frozen=True)
class UserSequence:
    entity_ids: np.ndarray  # (L,) with -1 at padded positions

    @property
    def valid(self) -> np.ndarray:
        return self.entity_ids >= 0

    def embed(self, entity_embeddings) -> Tensor:
        """Gather rows of H^G; padded rows come out as exact zeros."""
        h = as_tensor(entity_embeddings)
        ids = np.where(self.valid, self.entity_ids, 0)
        return h[ids] * self.valid[:, None].astype(np.float64)


def latest_behaviors(bundle: DatasetBundle, domains: Sequence[int]) -> dict[int, dict[int, tuple[int, ...]]]:
    """user -> domain -> behaviour list of that user's latest record in the domain."""
    out: dict[int, dict[int, tuple[int, ...]]] = {}
    for d in domains:
        for r in bundle.records.get(d, []):
            out.setdefault(r.user, {})[d] = r.behaviors
    return out


def _domain_block(items: Sequence[int], imap, cap: int) -> np.ndarray:
    ents = []
    for i in items:
        try:
            ents.extend(imap[i])
        except KeyError:
            raise KeyError(f"unmapped behavior item {i}") from None
    ents = ents[-cap:] if cap else []
    block = np.full(cap, -1, dtype=np.int64)
    block[:len(ents)] = ents
    return block


def deconstruct(user: int, bundle: DatasetBundle, history_cap: int = 200,
                behaviors: dict | None = None) -> UserSequence:
    """user -> item list per source domain -> entity list, concatenated."""
    behaviors = latest_behaviors(bundle, bundle.source_domains) if behaviors is None else behaviors
    mine = behaviors.get(user, {})
    blocks = [_domain_block(mine.get(d, ()), bundle.item_entities, history_cap) for d in bundle.source_domains]
    return UserSequence(np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.int64))


class UserHistories:
    """Deconstructed sequences for every user, with batch assembly."""

    def __init__(self, bundle: DatasetBundle, history_cap: int = 200):
        self.history_cap = history_cap
        behaviors = latest_behaviors(bundle, bundle.source_domains)
        self.sequences = {u: deconstruct(u, bundle, history_cap, behaviors) for u in bundle.users()}
        self.width = len(bundle.source_domains) * history_cap

    def get(self, user: int) -> UserSequence:
        seq = self.sequences.get(user)
        return seq if seq is not None else UserSequence(np.full(self.width, -1, dtype=np.int64))

    def batch(self, users: Sequence[int]) -> np.ndarray:
        """(U, L) entity ids; columns padded for every user are dropped."""
        ids = np.stack([self.get(u).entity_ids for u in users]) if len(users) else np.zeros((0, self.width), np.int64)
        keep = (ids >= 0).any(axis=0)
        return ids[:, keep]


class UserTower(Module):
    def __init__(self, rng: np.random.Generator, dim: int = 64, num_interests: int = 10,
                 attention_dim: int | None = None, pe_hidden: tuple[int, ...] = (128, 128),
                 pe_identity: bool = True):
        if num_interests < 1:
            raise ValueError("need at least one interest kernel")
        d_a = attention_dim or dim
        self.dim = dim
        self.kernels = parameter(glorot_uniform(rng, d_a, num_interests, shape=(num_interests, d_a)))
        self.attention = parameter(glorot_uniform(rng, dim, d_a, shape=(d_a, dim)))
        self.fuse_weight = parameter(glorot_uniform(rng, dim, dim))
        self.fuse_vector = parameter(glorot_uniform(rng, dim, 1, shape=(dim,)))
        self.pe_mlp = Mlp((dim, *pe_hidden, dim), rng)
        if pe_identity:
            # start as prototype context + z so the output stays in entity space
            self.pe_mlp.identity_()
        self.cold_start = parameter(rng.normal(scale=1.0 / np.sqrt(dim), size=dim))

    @property
    def num_interests(self) -> int:
        return self.kernels.shape[0]


def extract_interests(seq_embeddings, valid: np.ndarray, tower: UserTower) -> Tensor:
    """Multi-kernel attention pooling of an entity sequence.

    ``seq_embeddings`` is (L, d) or (U, L, d) with ``valid`` the matching
    boolean mask. Returns (M, d) or (U, M, d).
    """
    x = as_tensor(seq_embeddings)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise EmptySupportError("empty history: no valid positions")
    hidden = tanh(matmul(x, tower.attention.T))            # (..., L, d_a)
    logits = matmul(hidden, tower.kernels.T)               # (..., L, M)
    logits = logits.transpose(*range(logits.ndim - 2), logits.ndim - 1, logits.ndim - 2)
    weights = softmax(logits, axis=-1, mask=valid[..., None, :])
    return matmul(weights, x)


def pe_attention(z, mask: np.ndarray, bank: PrototypeBank, tower: UserTower) -> Tensor:
    """Enrich interest vector(s) with masked, scaled attention over prototypes.

    ``mask`` holds 0 (keep) or -inf (drop) per prototype and broadcasts
    against the leading dims of ``z``.
    """
    z = as_tensor(z)
    mask = np.asarray(mask, dtype=np.float64)
    keep = np.broadcast_to(mask == 0, z.shape[:-1] + (bank.n,))
    logits = matmul(z, bank.prototypes.T) * (1.0 / np.sqrt(z.shape[-1]))
    weights = softmax(logits, axis=-1, mask=keep)
    return tower.pe_mlp(matmul(weights, bank.prototypes) + z)


def fuse(interests, tower: UserTower, return_weights: bool = False):
    """Attention-weighted sum of interest vectors (..., M, d) -> (..., d)."""
    z = as_tensor(interests)
    scores = matmul(tanh(matmul(z, tower.fuse_weight.T)), tower.fuse_vector)  # (..., M)
    beta = softmax(scores, axis=-1)
    out = (beta.reshape(*beta.shape, 1) * z).sum(axis=-2)
    return (out, beta.data) if return_weights else out


def batch_interests(entity_embeddings, ids: np.ndarray, tower: UserTower) -> Tensor:
    """(U, M, d) interests; users without history get the learned cold-start vector."""
    h = as_tensor(entity_embeddings)
    valid = ids >= 0
    has = valid.any(axis=1)
    m, d = tower.num_interests, tower.dim
    parts, order = [], []
    if has.any():
        rows = np.flatnonzero(has)
        sub_valid = valid[rows]
        sub_ids = np.where(sub_valid, ids[rows], 0)
        x = h[sub_ids] * sub_valid[..., None].astype(np.float64)
        parts.append(extract_interests(x, sub_valid, tower))
        order.extend(rows.tolist())
    if (~has).any():
        rows = np.flatnonzero(~has)
        cold = tower.cold_start.reshape(1, 1, d) * np.ones((len(rows), m, 1))
        parts.append(cold)
        order.extend(rows.tolist())
    out = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    inverse = np.argsort(np.array(order))
    return out[inverse]


def history_mask(entity_embeddings: np.ndarray, ids: np.ndarray, bank: PrototypeBank,
                 cold: np.ndarray | None = None) -> np.ndarray:
    """Top-K mask per user from the mean prototype similarity of their history."""
    h = np.asarray(entity_embeddings)
    s_all = similarity(h, bank).data
    valid = ids >= 0
    counts = valid.sum(axis=1, keepdims=True)
    summed = np.einsum("ul,uln->un", valid.astype(np.float64), s_all[np.where(valid, ids, 0)])
    mean_s = np.divide(summed, np.maximum(counts, 1))
    empty = counts[:, 0] == 0
    if empty.any():
        fallback = similarity(cold, bank).data if cold is not None else np.full(bank.n, 1.0 / bank.n)
        mean_s[empty] = fallback
    return topk_mask(mean_s, bank.top_k)


def entity_mask(entity_embeddings: np.ndarray, entities: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """Top-K mask per target entity (rows of ``entities``)."""
    s = similarity(np.asarray(entity_embeddings)[entities], bank).data
    return topk_mask(s, bank.top_k)


def item_mask(entity_embeddings: np.ndarray, item_entities: Sequence[int], bank: PrototypeBank) -> np.ndarray:
    """Top-K mask from the averaged similarity of an item's entities."""
    s = similarity(np.asarray(entity_embeddings)[list(item_entities)], bank).data.mean(axis=0)
    return topk_mask(s, bank.top_k)


def encode_user(user: int, bundle: DatasetBundle, entity_embeddings, bank: PrototypeBank,
                context_mask: np.ndarray | None, tower: UserTower, mode: str = ENHANCED,
                history_cap: int = 200, histories: UserHistories | None = None):
    """Interests and universal encoding for one user.

    Returns ``(interests, z_u)``; in enhanced mode the interests are the
    prototype-enriched ones that were fused.
    """
    if mode not in (PLAIN, ENHANCED):
        raise ValueError(f"unknown tower mode {mode!r}")
    seq = histories.get(user) if histories is not None else deconstruct(user, bundle, history_cap)
    ids = seq.entity_ids[None, :]
    ids = ids[:, (ids >= 0).any(axis=0)] if (ids >= 0).any() else ids[:, :0]
    interests = batch_interests(entity_embeddings, ids, tower)[0]
    if mode == ENHANCED:
        if context_mask is None:
            context_mask = history_mask(as_tensor(entity_embeddings).data, ids, bank, tower.cold_start.data)[0]
        interests = pe_attention(interests, context_mask, bank, tower)
    return interests, fuse(interests, tower)
