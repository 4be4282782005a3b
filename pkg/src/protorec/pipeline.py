"""End-to-end runs on one bundle: pre-train, infer, zero-shot, fine-tune, evaluate."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .datamodel import DatasetBundle
from .eval import NORMAL, ZERO_SHOT, MetricRow, SplitSpec, chronological_split, evaluate, ranking_cases
from .prototype import assign, purity
from .training import (FinetuneConfig, FinetuneHeads, ModelConfig, PretrainConfig, ProfileEncoder,
                       StoreEmbeddings, apply_ablations, finetune, finetune_score, infer_embeddings,
                       item_matrix, pretrain)

# Desk-scale settings used by the synthetic transfer experiments.
DESK_MODEL = ModelConfig(num_prototypes=20, top_k=4, history_cap=50, kmeans_init=True)
DESK_PRETRAIN = PretrainConfig(batch_size=256, epochs=3, lr=1e-3)
DESK_FINETUNE_EPOCHS = 3
DESK_FINETUNE_LR = 1e-3


def zero_shot_scorer(store, item_entities):
    def score(user: int, items: np.ndarray) -> np.ndarray:
        return item_matrix(items, item_entities, store.entity_vectors) @ store.user(user)
    return score


def heads_scorer(heads: FinetuneHeads, source, profiles):
    enc = ProfileEncoder(profiles) if heads.deepfm is not None else None

    def score(user: int, items: np.ndarray) -> np.ndarray:
        users = np.full(len(items), user)
        x = enc.encode(users, items) if enc else None
        zu = np.repeat(source.users([user]), len(items), axis=0)
        return finetune_score(zu, source.items(items), x, heads).data
    return score


def catalog_hit_baseline(bundle: DatasetBundle, domain: int, k: int = 5) -> float:
    """k / C for a target catalog of C items."""
    return k / len({r.item for r in bundle.records[domain]})


def random_hit_baseline(bundle: DatasetBundle, domain: int, k: int = 5) -> float:
    """Expected Hit@k of a uniformly random ranker under the zero-shot protocol."""
    recs = bundle.records[domain]
    catalog = sorted({r.item for r in recs})
    cases = ranking_cases(recs, recs, catalog, lambda u, items: np.zeros(len(items)))
    return float(np.mean([min(1.0, k / len(c.candidates)) for c in cases]))


@dataclass
class VariantResult:
    ablations: tuple[str, ...]
    seed: int
    zero_shot: MetricRow
    normal: MetricRow
    zero_shot_valid_ndcg5: float
    finetuned_valid_ndcg5: float
    purity: float | None
    pretrain_log: list


def run_variant(bundle: DatasetBundle, ablations: Sequence[str] = (), seed: int = 0,
                model_cfg: ModelConfig = DESK_MODEL, pretrain_cfg: PretrainConfig = DESK_PRETRAIN,
                finetune_epochs: int = DESK_FINETUNE_EPOCHS, finetune_lr: float = DESK_FINETUNE_LR,
                target: int | None = None) -> VariantResult:
    target = bundle.target_domains[0] if target is None else target
    mcfg, pcfg = apply_ablations(model_cfg, replace(pretrain_cfg, seed=seed), ablations)
    model, log = pretrain(bundle.without_truth(), mcfg, pcfg)
    store = infer_embeddings(model, bundle.without_truth())
    recs = bundle.records[target]
    catalog = sorted({r.item for r in recs})

    zs = evaluate(recs, target, ZERO_SHOT, zero_shot_scorer(store, bundle.item_entities), catalog=catalog)
    train, valid, _ = chronological_split(recs, SplitSpec())
    source = StoreEmbeddings(store, bundle.item_entities)
    fcfg = FinetuneConfig(target, epochs=finetune_epochs, lr=finetune_lr, batch_size=pcfg.batch_size, seed=seed)
    heads, _ = finetune(train, source, bundle.profiles, fcfg)
    scorer = heads_scorer(heads, source, bundle.profiles)
    normal = evaluate(recs, target, NORMAL, scorer, catalog=catalog)

    def valid_ndcg5(score_fn) -> float:
        cases = ranking_cases(valid, recs, catalog, score_fn)
        ranks = np.array([c.rank() for c in cases])
        return float(np.mean(np.where(ranks <= 5, 1.0 / np.log2(ranks + 1), 0.0)))

    pur = None
    if bundle.truth is not None:
        arg, _ = assign(store.entity_vectors, model.bank)
        pur = purity(arg, bundle.truth)
    return VariantResult(tuple(ablations), seed, zs, normal,
                         valid_ndcg5(zero_shot_scorer(store, bundle.item_entities)), valid_ndcg5(scorer),
                         pur, log)
