"""Learnable prototypes: soft assignment, prototype views, contrastive loss, top-K masks."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np

from .layers import Module
from .numerics import (Tensor, as_tensor, l2_normalize, log_softmax, matmul, parameter, softmax)

NegativePolicy = Callable[[int], np.ndarray]


class PrototypeBank(Module):
    def __init__(self, num_prototypes: int, dim: int, rng: np.random.Generator,
                 temperature: float = 0.2, top_k: int = 160):
        if num_prototypes < 1:
            raise ValueError("need at least one prototype")
        if not 1 <= top_k <= num_prototypes:
            raise ValueError(f"top_k must lie in [1, {num_prototypes}], got {top_k}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.prototypes = parameter(rng.normal(scale=1.0 / np.sqrt(dim), size=(num_prototypes, dim)))
        self.temperature = temperature
        self.top_k = top_k

    @property
    def n(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def kmeans_pp_init(self, embeddings: np.ndarray, rng: np.random.Generator) -> None:
        """Seed prototype rows with k-means++ picks from ``embeddings``."""
        x = np.asarray(embeddings, dtype=np.float64)
        picks = [int(rng.integers(len(x)))]
        dist = np.sum((x - x[picks[0]]) ** 2, axis=1)
        while len(picks) < self.n:
            total = dist.sum()
            nxt = int(rng.integers(len(x))) if total == 0 else int(rng.choice(len(x), p=dist / total))
            picks.append(nxt)
            dist = np.minimum(dist, np.sum((x - x[nxt]) ** 2, axis=1))
        self.prototypes.data[...] = x[picks]


def similarity(h, bank: PrototypeBank) -> Tensor:
    """Softmax over prototypes of the inner products; works row-wise on batches."""
    h = as_tensor(h)
    if h.shape[-1] != bank.dim:
        raise ValueError(f"embedding dim {h.shape[-1]} does not match prototype dim {bank.dim}")
    return softmax(matmul(h, bank.prototypes.T), axis=-1)


def prototype_view(s, bank: PrototypeBank) -> Tensor:
    s = as_tensor(s)
    if s.shape[-1] != bank.n:
        raise ValueError(f"similarity has {s.shape[-1]} entries for {bank.n} prototypes")
    return matmul(s, bank.prototypes)


def info_nce_from_cosines(cos, temperature: float, negatives: np.ndarray | None = None) -> Tensor:
    """Symmetric InfoNCE from a (b, b) cosine matrix, positives on the diagonal.

    Row e is scored against every allowed column (``negatives[e, e']``;
    default all) with its own positive always kept in the denominator, and
    column e likewise against the allowed rows. Averaged over e.
    """
    cos = as_tensor(cos)
    b = cos.shape[0]
    if b < 2:
        raise ValueError("no negatives available: contrastive batches need at least 2 rows")
    allowed = np.ones((b, b), dtype=bool) if negatives is None else np.array(negatives, dtype=bool)
    np.fill_diagonal(allowed, True)
    logits = cos * (1.0 / temperature)
    diag = (np.arange(b), np.arange(b))
    anchor_h = log_softmax(logits, axis=1, mask=allowed)[diag]
    anchor_view = log_softmax(logits.T, axis=1, mask=allowed.T)[diag]
    return -(anchor_h + anchor_view).mean()


def info_nce_views(h, h_hat, temperature: float, negatives: np.ndarray | None = None) -> Tensor:
    """Symmetric InfoNCE between each row's two views, cosine similarity."""
    h, h_hat = as_tensor(h), as_tensor(h_hat)
    if h.shape[0] < 2:
        raise ValueError("no negatives available: contrastive batches need at least 2 rows")
    cos = matmul(l2_normalize(h, axis=1), l2_normalize(h_hat, axis=1).T)
    return info_nce_from_cosines(cos, temperature, negatives)


def contrastive_loss(embeddings, bank: PrototypeBank, temperature: float | None = None,
                     negatives: NegativePolicy | None = None) -> Tensor:
    """Contrastive prototype loss over a batch of entity embeddings.

    ``negatives`` is an optional policy ``batch_size -> bool[b, b]`` picking
    which in-batch rows serve as negatives; the default uses all of them.
    """
    h = as_tensor(embeddings)
    tau = bank.temperature if temperature is None else temperature
    view = prototype_view(similarity(h, bank), bank)
    mask = None if negatives is None else negatives(h.shape[0])
    return info_nce_views(h, view, tau, mask)


def topk_mask(s, k: int) -> np.ndarray:
    """0 where ``s`` reaches its K-th largest value (ties all kept), -inf elsewhere."""
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"K must lie in [1, {n}], got {k}")
    kth = np.partition(s, n - k, axis=-1)[..., n - k:n - k + 1]
    return np.where(s >= kth, 0.0, -np.inf)


def assign(embeddings: np.ndarray, bank: PrototypeBank) -> tuple[np.ndarray, np.ndarray]:
    s = similarity(np.asarray(embeddings), bank).data
    return s.argmax(axis=1), s.max(axis=1)


def purity(assignments: np.ndarray, truth: np.ndarray) -> float:
    """Share of entities whose planted topic is the majority topic of their prototype."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    hits = 0
    for p in np.unique(assignments):
        hits += np.bincount(truth[assignments == p]).max()
    return hits / len(truth)


def export_assignments(path: str | Path, embeddings: np.ndarray, bank: PrototypeBank) -> None:
    arg, top = assign(embeddings, bank)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{e}\t{int(a)}\t{float(m):.6f}\n" for e, (a, m) in enumerate(zip(arg, top)))
