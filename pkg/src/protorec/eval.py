"""Chronological splitting, Hit@K / NDCG@K, and the two evaluation protocols."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datamodel import InteractionRecord

KS = (5, 10)
NORMAL = "normal"
ZERO_SHOT = "zero-shot"


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    valid: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        if abs(self.train + self.valid + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if min(self.train, self.valid, self.test) < 0:
            raise ValueError("split fractions must be nonnegative")


def chronological_split(records: Sequence[InteractionRecord], spec: SplitSpec = SplitSpec()):
    """Earliest share to train, next to valid, the remainder to test.

    Ties in timestamp keep input order; sizes are floored, so rounding
    leftovers land in test.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    ordered = sorted(records, key=lambda r: r.timestamp)
    n = len(ordered)
    n_train = math.floor(n * spec.train + 1e-9)
    n_valid = math.floor(n * spec.valid + 1e-9)
    return ordered[:n_train], ordered[n_train:n_train + n_valid], ordered[n_train + n_valid:]


@dataclass(frozen=True)
class RankingCase:
    user: int
    positive: int
    candidates: np.ndarray  # item ids, unique, containing ``positive``
    scores: np.ndarray      # aligned with candidates

    def rank(self) -> int:
        """1-based rank of the positive; higher score first, lower id wins ties."""
        pos = int(np.flatnonzero(self.candidates == self.positive)[0])
        s = self.scores[pos]
        ahead = (self.scores > s) | ((self.scores == s) & (self.candidates < self.positive))
        return int(ahead.sum()) + 1


def hit_at_k(case: RankingCase, k: int) -> int:
    return int(case.rank() <= k)


def ndcg_at_k(case: RankingCase, k: int) -> float:
    r = case.rank()
    return 1.0 / math.log2(r + 1) if r <= k else 0.0


@dataclass(frozen=True)
class MetricRow:
    domain: int
    protocol: str
    hit5: float
    hit10: float
    ndcg5: float
    ndcg10: float
    cases: int

    def line(self) -> str:
        return (f"{self.domain}\t{self.protocol}\t{self.hit5:.4f}\t{self.hit10:.4f}"
                f"\t{self.ndcg5:.4f}\t{self.ndcg10:.4f}")


def ranking_cases(test: Sequence[InteractionRecord], known: Sequence[InteractionRecord],
                  catalog: Sequence[int], score_fn: Callable[[int, np.ndarray], np.ndarray]) -> list[RankingCase]:
    """One case per positive test record, ranked against the full catalog.

    The user's other known positives (anywhere in ``known``) are removed
    from the candidates. ``score_fn(user, items)`` scores a candidate list.
    """
    positives: dict[int, set[int]] = {}
    for r in known:
        if r.label == 1:
            positives.setdefault(r.user, set()).add(r.item)
    catalog = np.array(sorted(set(catalog)), dtype=np.int64)
    cache: dict[int, np.ndarray] = {}
    cases = []
    for r in test:
        if r.label != 1:
            continue
        if r.user not in cache:
            cache[r.user] = np.asarray(score_fn(r.user, catalog), dtype=np.float64)
        others = positives.get(r.user, set()) - {r.item}
        keep = ~np.isin(catalog, list(others)) if others else np.ones(len(catalog), dtype=bool)
        cases.append(RankingCase(r.user, r.item, catalog[keep], cache[r.user][keep]))
    return cases


def summarize(cases: Sequence[RankingCase], domain: int, protocol: str) -> MetricRow:
    if not cases:
        raise ValueError("empty test set: no positive interactions to rank")
    ranks = np.array([c.rank() for c in cases])
    hit = {k: float(np.mean(ranks <= k)) for k in KS}
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0))) for k in KS}
    return MetricRow(domain, protocol, hit[5], hit[10], ndcg[5], ndcg[10], len(cases))


def evaluate(records: Sequence[InteractionRecord], domain: int, protocol: str,
             score_fn: Callable[[int, np.ndarray], np.ndarray],
             split: SplitSpec = SplitSpec(), catalog: Sequence[int] | None = None) -> MetricRow:
    """Mean Hit@{5,10} and NDCG@{5,10} for one target domain.

    ``normal`` ranks the positives of the chronological test split;
    ``zero-shot`` ranks every positive in the domain.
    """
    records = [r for r in records if r.domain == domain]
    if not records:
        raise ValueError(f"no records for domain {domain}")
    catalog = sorted({r.item for r in records}) if catalog is None else catalog
    if protocol == NORMAL:
        test = chronological_split(records, split)[2]
    elif protocol == ZERO_SHOT:
        test = records
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return summarize(ranking_cases(test, records, catalog, score_fn), domain, protocol)


def write_metrics(path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(r.line() + "\n" for r in rows)
