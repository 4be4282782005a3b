"""Small hand-built fixtures shared by the test modules."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from protorec.datamodel import (DatasetBundle, EntityGraph, InteractionRecord, ItemEntityMap,
                                ProfileFeatures, SyntheticConfig)
from protorec.training import ModelConfig

SOURCE, TARGET = 0, 1


def micro_bundle(seed: int = 0) -> DatasetBundle:
    """6 entities, 2 users, one source and one target domain."""
    rng = np.random.default_rng(seed)
    triplets = np.array([[0, 0, 1], [1, 1, 2], [2, 0, 3], [3, 0, 4], [4, 1, 5], [0, 0, 2]])
    graph = EntityGraph(6, 2, triplets, rng.normal(size=(6, 32)))
    imap = ItemEntityMap({0: (0, 1), 1: (2,), 2: (3, 4), 10: (5,), 11: (1, 2)})
    src = [
        InteractionRecord(SOURCE, 0, 0, (), 1, 1),
        InteractionRecord(SOURCE, 0, 1, (0,), 0, 2),
        InteractionRecord(SOURCE, 1, 2, (), 1, 3),
        InteractionRecord(SOURCE, 1, 1, (2,), 1, 4),
        InteractionRecord(SOURCE, 0, 2, (0,), 1, 5),
    ]
    tgt = [
        InteractionRecord(TARGET, 0, 10, (), 1, 1),
        InteractionRecord(TARGET, 1, 11, (), 0, 2),
        InteractionRecord(TARGET, 0, 11, (10,), 1, 3),
        InteractionRecord(TARGET, 1, 10, (), 1, 4),
    ]
    profiles = ProfileFeatures({0: 3, 1: 2}, {0: ((0, 1),), 1: ((0, 2),)},
                               {i: ((1, i % 2),) for i in (0, 1, 2, 10, 11)})
    truth = np.array([0, 0, 0, 1, 1, 1])
    return DatasetBundle(graph, imap, {SOURCE: src, TARGET: tgt}, (SOURCE,), (TARGET,), profiles, truth)


def micro_config(**kw) -> ModelConfig:
    base = ModelConfig(dim=8, num_interests=2, num_prototypes=5, top_k=2, history_cap=4,
                       decoder_hidden=(8, 4), pe_hidden=(16, 16), kmeans_init=False)
    return replace(base, **kw)


SMALL_SYNTHETIC = SyntheticConfig(num_entities=80, num_topics=4, users_per_topic=4, p_in=0.2, p_out=0.01,
                                  items_per_source_domain=40, items_per_target_domain=20,
                                  records_per_source_domain=600, records_per_target_domain=400)

SMALL_MODEL = ModelConfig(dim=16, num_interests=3, num_prototypes=8, top_k=3, history_cap=20,
                          decoder_hidden=(16, 8), pe_hidden=(32, 32), kmeans_init=True)


def write_tiny_fixture(root: Path) -> Path:
    """3 entities, 2 items, 4 records in the documented text formats."""
    root.mkdir(parents=True, exist_ok=True)
    feats = "\n".join(f"{e}\t" + ",".join(str(0.1 * (e + 1) + 0.01 * k) for k in range(32)) for e in range(3))
    (root / "features.tsv").write_text(feats + "\n")
    (root / "graph.tsv").write_text("0\t0\t1\n1\t1\t2\n")
    (root / "item_entities.tsv").write_text("0\t0,1\n1\t2\n")
    (root / "interactions.tsv").write_text(
        "0\t5\t0\t\t1\t10\n0\t6\t0\t\t0\t11\n1\t5\t1\t\t1\t12\n1\t6\t1\t1\t0\t13\n")
    (root / "profiles.tsv").write_text("user\t5\t0:1\nuser\t6\t0:0\nitem\t0\t1:2\nitem\t1\t1:0\n")
    (root / "domains.tsv").write_text("0\tsource\n1\ttarget\n")
    return root


def acceptance_line(number: str, title: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
