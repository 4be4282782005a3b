"""Pre-training on source domains, offline inference, fine-tuning and zero-shot ranking."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import DatasetBundle, EntityRecord, InteractionRecord, ProfileFeatures, expand_to_entity_records
from .graph_encoder import GraphEncoder, LookupEncoder
from .layers import Mlp, Module
from .numerics import (Adam, Tensor, as_tensor, backward, bce_with_logits, concat, parameter, sigmoid,
                       stack)
from .prototype import PrototypeBank, contrastive_loss
from .store import EmbeddingStore, load_checkpoint, save_checkpoint
from .user_tower import (ENHANCED, PLAIN, UserHistories, UserTower, batch_interests, entity_mask, fuse,
                         history_mask, pe_attention)

log = logging.getLogger(__name__)

ABLATIONS = ("gl", "cpl", "pea")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    num_interests: int = 10
    num_prototypes: int = 900
    top_k: int = 160
    temperature: float = 0.2
    history_cap: int = 200
    decoder_hidden: tuple[int, ...] = (64, 32)
    pe_hidden: tuple[int, ...] = (128, 128)
    pe_identity: bool = True
    use_graph: bool = True
    tower_mode: str = ENHANCED
    kmeans_init: bool = False

    def validate(self) -> None:
        if self.num_interests < 1:
            raise ValueError("num_interests must be >= 1")
        if not 1 <= self.top_k <= self.num_prototypes:
            raise ValueError("top_k must lie in [1, num_prototypes]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.tower_mode not in (PLAIN, ENHANCED):
            raise ValueError(f"tower_mode must be {PLAIN!r} or {ENHANCED!r}")
        if self.history_cap < 1:
            raise ValueError("history_cap must be >= 1")


@dataclass(frozen=True)
class PretrainConfig:
    gamma: float = 1.0
    batch_size: int = 512
    epochs: int = 5
    lr: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.gamma > 0 and self.batch_size < 2:
            raise ValueError("contrastive term needs batch_size >= 2")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")


def apply_ablations(model_cfg: ModelConfig, pretrain_cfg: PretrainConfig,
                    ablations: Sequence[str]) -> tuple[ModelConfig, PretrainConfig]:
    """Map ablation switches (gl, cpl, pea) onto the two configs."""
    for a in ablations:
        if a not in ABLATIONS:
            raise ValueError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
    if "gl" in ablations:
        model_cfg = replace(model_cfg, use_graph=False)
    if "pea" in ablations:
        model_cfg = replace(model_cfg, tower_mode=PLAIN)
    if "cpl" in ablations:
        pretrain_cfg = replace(pretrain_cfg, gamma=0.0)
    return model_cfg, pretrain_cfg


class Model(Module):
    """Graph encoder, prototype bank, user tower and the entity decoder."""

    def __init__(self, bundle_graph, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.dim
        self.encoder = GraphEncoder(rng, dims=(bundle_graph.features.shape[1], d, d)) if config.use_graph \
            else LookupEncoder(bundle_graph, d)
        self.bank = PrototypeBank(config.num_prototypes, d, rng, config.temperature, config.top_k)
        self.tower = UserTower(rng, d, config.num_interests, pe_hidden=config.pe_hidden,
                               pe_identity=config.pe_identity)
        self.decoder = Mlp((2 * d, *config.decoder_hidden, 1), rng)
        if config.kmeans_init:
            self.bank.kmeans_pp_init(self.encoder(bundle_graph).data, rng)

    def entity_embeddings(self, graph) -> Tensor:
        return self.encoder(graph)

    def backbone_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.bank.parameters() + self.tower.parameters()


def pretrain_score(z_u, h_e, decoder: Mlp) -> Tensor:
    """Click probability for user/entity pairs (rows)."""
    return sigmoid(_decoder_logits(as_tensor(z_u), as_tensor(h_e), decoder))


def _decoder_logits(z_u: Tensor, h_e: Tensor, decoder: Mlp) -> Tensor:
    out = decoder(concat([z_u, h_e], axis=-1))
    return out.reshape(out.shape[:-1])


def user_encodings(model: Model, entity_embeddings, histories: UserHistories, users: Sequence[int],
                   masks: np.ndarray | None = None) -> Tensor:
    """Universal encodings for ``users`` (rows may repeat).

    In enhanced mode ``masks`` gives one prototype mask per row; when
    omitted each user's history mask is used.
    """
    users = np.asarray(users)
    uniq, inverse = np.unique(users, return_inverse=True)
    ids = histories.batch(uniq.tolist())
    interests = batch_interests(entity_embeddings, ids, model.tower)
    if model.config.tower_mode == PLAIN:
        return fuse(interests, model.tower)[inverse]
    if masks is None:
        h = as_tensor(entity_embeddings).data
        masks = history_mask(h, ids, model.bank, model.tower.cold_start.data)[inverse]
    enhanced = pe_attention(interests[inverse], masks[:, None, :], model.bank, model.tower)
    return fuse(enhanced, model.tower)


@dataclass
class EntityBatch:
    users: np.ndarray
    entities: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[EntityRecord]) -> "EntityBatch":
        return cls(np.array([r.user for r in records], dtype=np.int64),
                   np.array([r.entity for r in records], dtype=np.int64),
                   np.array([r.label for r in records], dtype=np.float64))

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx) -> "EntityBatch":
        return EntityBatch(self.users[idx], self.entities[idx], self.labels[idx])


def pretrain_loss(batch: EntityBatch, model: Model, graph, histories: UserHistories,
                  gamma: float) -> tuple[Tensor, Tensor, Tensor]:
    """(L_PT, L_ET, L_CP) on one batch of entity-level records.

    L_ET is the mean binary cross-entropy, L_CP the contrastive prototype
    loss over the batch's distinct entities, L_PT = L_ET + gamma * L_CP.
    """
    h = model.entity_embeddings(graph)
    uniq_entities = np.unique(batch.entities)
    if gamma > 0 and len(uniq_entities) < 2:
        raise ValueError("contrastive term needs at least 2 distinct entities in the batch")
    masks = None
    if model.config.tower_mode == ENHANCED:
        # context mask from each pair's target entity; constant w.r.t. parameters
        masks = entity_mask(h.data, batch.entities, model.bank)
    z_u = user_encodings(model, h, histories, batch.users, masks)
    logits = _decoder_logits(z_u, h[batch.entities], model.decoder)
    l_et = bce_with_logits(logits, batch.labels).mean()
    if len(uniq_entities) >= 2:
        l_cp = contrastive_loss(h[uniq_entities], model.bank)
    else:
        l_cp = Tensor(0.0)
    return l_et + gamma * l_cp, l_et, l_cp


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    l_pt: float
    l_et: float
    l_cp: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.l_pt:.6f}\t{self.l_et:.6f}\t{self.l_cp:.6f}"


def write_training_log(path: str | Path, entries: Sequence[EpochLog]) -> None:
    Path(path).write_text("".join(e.line() + "\n" for e in entries), encoding="utf-8")


def read_training_log(path: str | Path) -> list[EpochLog]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        e, a, b, c = line.split("\t")
        out.append(EpochLog(int(e), float(a), float(b), float(c)))
    return out


def pretrain(bundle: DatasetBundle, model_cfg: ModelConfig = ModelConfig(),
             cfg: PretrainConfig = PretrainConfig()) -> tuple[Model, list[EpochLog]]:
    """Shuffled minibatch Adam on L_PT over every source domain."""
    cfg.validate()
    bundle = bundle.without_truth()
    records = expand_to_entity_records(bundle.source_records, bundle.item_entities)
    if not records:
        raise ValueError("no source-domain records to pre-train on")
    rng = np.random.default_rng(cfg.seed)
    model = Model(bundle.graph, model_cfg, rng)
    histories = UserHistories(bundle, model_cfg.history_cap)
    data = EntityBatch.from_records(records)
    opt = Adam(model.parameters(), lr=cfg.lr)
    entries = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            if cfg.gamma > 0 and len(np.unique(batch.entities)) < 2:
                continue
            l_pt, l_et, l_cp = pretrain_loss(batch, model, bundle.graph, histories, cfg.gamma)
            opt.step(backward(l_pt, opt.params))
            sums += len(batch) * np.array([l_pt.item(), l_et.item(), l_cp.item()])
            seen += len(batch)
        entry = EpochLog(epoch, *(sums / max(seen, 1)))
        log.info("epoch %d L_PT=%.4f L_ET=%.4f L_CP=%.4f", epoch, entry.l_pt, entry.l_et, entry.l_cp)
        entries.append(entry)
    return model, entries


# offline inference -----------------------------------------------------------

def infer_embeddings(model: Model, bundle: DatasetBundle, batch_size: int = 256) -> EmbeddingStore:
    """Entity embeddings for the whole graph and one encoding per known user.

    Enhanced-mode users use the mask averaged over their own history.
    """
    h = model.entity_embeddings(bundle.graph).data
    histories = UserHistories(bundle, model.config.history_cap)
    users = np.array(bundle.users(), dtype=np.int64)
    rows = [user_encodings(model, h, histories, users[s:s + batch_size]).data
            for s in range(0, len(users), batch_size)]
    z = np.concatenate(rows) if rows else np.zeros((0, model.config.dim))
    return EmbeddingStore(users, z, h.copy())


def recompute_user(model: Model, bundle: DatasetBundle, user: int) -> np.ndarray:
    """Fresh single-user encoding, independent of the batched inference path."""
    from .user_tower import encode_user
    h = model.entity_embeddings(bundle.graph)
    _, z = encode_user(user, bundle, h.data, model.bank, None, model.tower, model.config.tower_mode,
                       model.config.history_cap)
    return z.data


def verify_snapshot(store: EmbeddingStore, model: Model, bundle: DatasetBundle,
                    rng: np.random.Generator, samples: int = 10) -> float:
    """Max abs difference between stored and freshly recomputed vectors.

    Checks ``samples`` random users through the single-user path and the
    same number of random entity rows.
    """
    err = 0.0
    if len(store.user_ids):
        for u in rng.choice(store.user_ids, size=min(samples, len(store.user_ids)), replace=False):
            err = max(err, float(np.max(np.abs(recompute_user(model, bundle, int(u)) - store.user(int(u))))))
    h = model.entity_embeddings(bundle.graph).data
    rows = rng.choice(len(h), size=min(samples, len(h)), replace=False)
    err = max(err, float(np.max(np.abs(h[rows] - store.entity_vectors[rows]))))
    return err


def item_embedding(item: int, item_entities, store: EmbeddingStore) -> np.ndarray:
    """Mean of the stored embeddings of the item's entities."""
    try:
        ents = item_entities[item]
    except KeyError:
        raise KeyError(f"unmapped item {item}") from None
    return np.mean([store.entity(e) for e in ents], axis=0)


def item_matrix(items: Sequence[int], item_entities, entity_vectors: np.ndarray) -> np.ndarray:
    return np.stack([entity_vectors[list(item_entities[i])].mean(axis=0) for i in items])


def zeroshot_score(z_u, z_i) -> np.ndarray:
    """Inner-product preference; ranking only, no squashing."""
    z_u, z_i = np.asarray(z_u), np.asarray(z_i)
    if z_u.shape[-1] != z_i.shape[-1]:
        raise ValueError("user and item embeddings differ in dimension")
    return z_u @ z_i.T if z_i.ndim == 2 else z_u @ z_i


# fine-tuning ---------------------------------------------------------------------

FM_LATENT = 8
DEEP_TOWER = (64, 32, 8)
DEEPFM_OUT = DEEP_TOWER[-1] + 2


class DeepFM(Module):
    """FM first/second order terms plus a deep tower over shared field embeddings.

    Output per row: deep top (8) || FM second-order (1) || first-order (1).
    """

    def __init__(self, field_cardinalities: Sequence[int], rng: np.random.Generator,
                 latent: int = FM_LATENT, tower: tuple[int, ...] = DEEP_TOWER):
        self.cards = tuple(int(c) for c in field_cardinalities)
        self.offsets = np.concatenate([[0], np.cumsum(self.cards)[:-1]]).astype(np.int64)
        total = int(sum(self.cards))
        self.embedding = parameter(rng.normal(scale=0.01, size=(total, latent)))
        self.first_order = parameter(np.zeros(total))
        self.bias = parameter(np.zeros(1))
        self.deep = Mlp((len(self.cards) * latent, *tower), rng)

    def __call__(self, values: np.ndarray) -> Tensor:
        idx = np.asarray(values, dtype=np.int64) + self.offsets      # (B, F)
        v = self.embedding[idx]                                      # (B, F, k)
        b, f = idx.shape
        square_of_sum = v.sum(axis=1) * v.sum(axis=1)
        sum_of_square = (v * v).sum(axis=1)
        second = ((square_of_sum - sum_of_square).sum(axis=1) * 0.5).reshape(b, 1)
        first = (self.first_order[idx].sum(axis=1) + self.bias).reshape(b, 1)
        deep = self.deep(v.reshape(b, f * v.shape[2]))
        return concat([deep, second, first], axis=1)


class FinetuneHeads(Module):
    def __init__(self, dim: int, field_cardinalities: Sequence[int] | None, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (64, 32)):
        self.deepfm = DeepFM(field_cardinalities, rng) if field_cardinalities else None
        extra = DEEPFM_OUT if self.deepfm is not None else 0
        self.mlp = Mlp((2 * dim + extra, *hidden, 1), rng)

    def logits(self, z_u, z_i, x_values: np.ndarray | None) -> Tensor:
        parts = [as_tensor(z_u), as_tensor(z_i)]
        if self.deepfm is not None:
            parts.append(self.deepfm(x_values))
        out = self.mlp(concat(parts, axis=-1))
        return out.reshape(out.shape[:-1])


def finetune_score(z_u, z_i, x_values: np.ndarray | None, heads: FinetuneHeads) -> Tensor:
    return sigmoid(heads.logits(z_u, z_i, x_values))


class ProfileEncoder:
    """Turns (user, item) pairs into a fixed-order categorical value matrix."""

    def __init__(self, profiles: ProfileFeatures):
        self.user_fields = profiles.user_fields()
        self.item_fields = profiles.item_fields()
        self.fields = self.user_fields + self.item_fields
        self.cards = [profiles.schema[f] for f in self.fields]
        self.profiles = profiles

    def encode(self, users: Sequence[int], items: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(users), len(self.fields)), dtype=np.int64)
        for row, (u, i) in enumerate(zip(users, items)):
            uf = dict(self.profiles.users.get(u, ()))
            itf = dict(self.profiles.items.get(i, ()))
            for col, f in enumerate(self.user_fields):
                if f not in uf:
                    raise KeyError(f"missing profile schema field {f} for user {u}")
                out[row, col] = uf[f]
            for col, f in enumerate(self.item_fields, start=len(self.user_fields)):
                if f not in itf:
                    raise KeyError(f"missing profile schema field {f} for item {i}")
                out[row, col] = itf[f]
        return out


class StoreEmbeddings:
    """Embedding source backed by a published snapshot."""

    def __init__(self, store: EmbeddingStore, item_entities):
        self.store = store
        self.item_entities = item_entities
        self.dim = store.dim

    def users(self, users) -> np.ndarray:
        return self.store.users(users)

    def items(self, items) -> np.ndarray:
        return item_matrix(items, self.item_entities, self.store.entity_vectors)


class LiveEmbeddings:
    """Embedding source that reruns the frozen backbone on every request."""

    def __init__(self, model: Model, bundle: DatasetBundle):
        self.model = model
        self.bundle = bundle
        self.histories = UserHistories(bundle, model.config.history_cap)
        self.dim = model.config.dim

    def users(self, users) -> np.ndarray:
        h = self.model.entity_embeddings(self.bundle.graph)
        return user_encodings(self.model, h.data, self.histories, users).data

    def items(self, items) -> np.ndarray:
        h = self.model.entity_embeddings(self.bundle.graph).data
        return item_matrix(items, self.bundle.item_entities, h)


@dataclass(frozen=True)
class FinetuneConfig:
    target_domain: int
    epochs: int = 3
    lr: float = 1e-4
    batch_size: int = 512
    seed: int = 0
    frozen_backbone: bool = True
    use_deepfm: bool = True

    def validate(self) -> None:
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid fine-tuning schedule")


def finetune(records: Sequence[InteractionRecord], source, profiles: ProfileFeatures,
             cfg: FinetuneConfig, model: Model | None = None,
             bundle: DatasetBundle | None = None) -> tuple[FinetuneHeads, list[float]]:
    """Fit the scoring heads on target-domain training records.

    ``source`` provides frozen ``users``/``items`` embeddings (a store or
    live backbone). With ``frozen_backbone=False`` the backbone in ``model``
    is trained jointly and ``bundle`` is required.
    """
    cfg.validate()
    if not records:
        raise ValueError("empty target training set")
    records = [r for r in records if r.domain == cfg.target_domain]
    if not records:
        raise ValueError(f"no training records for target domain {cfg.target_domain}")
    rng = np.random.default_rng(cfg.seed)
    enc = ProfileEncoder(profiles) if cfg.use_deepfm else None
    heads = FinetuneHeads(source.dim, enc.cards if enc else None, rng)
    users = np.array([r.user for r in records], dtype=np.int64)
    items = np.array([r.item for r in records], dtype=np.int64)
    labels = np.array([r.label for r in records], dtype=np.float64)
    x = enc.encode(users, items) if enc else None

    params = heads.parameters()
    trainable_backbone = not cfg.frozen_backbone
    if trainable_backbone:
        if model is None or bundle is None:
            raise ValueError("unfrozen fine-tuning needs the model and bundle")
        params = params + model.backbone_parameters()
        histories = UserHistories(bundle, model.config.history_cap)
    else:
        zu_all = source.users(users)
        zi_all = source.items(items)
    opt = Adam(params, lr=cfg.lr)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(records))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx] if x is not None else None
            if trainable_backbone:
                h = model.entity_embeddings(bundle.graph)
                zu = user_encodings(model, h, histories, users[idx])
                zi = _item_rows(h, items[idx], bundle.item_entities)
            else:
                zu, zi = zu_all[idx], zi_all[idx]
            loss = bce_with_logits(heads.logits(zu, zi, xb), labels[idx]).mean()
            opt.step(backward(loss, opt.params))
            total += loss.item() * len(idx)
        losses.append(total / len(records))
    return heads, losses


def _item_rows(h: Tensor, items: np.ndarray, item_entities) -> Tensor:
    rows = []
    for i in items:
        ents = list(item_entities[int(i)])
        rows.append(h[ents].mean(axis=0))
    return stack(rows, axis=0)


def predict(heads: FinetuneHeads, source, profiles: ProfileFeatures | None,
            users: Sequence[int], items: Sequence[int]) -> np.ndarray:
    x = ProfileEncoder(profiles).encode(users, items) if heads.deepfm is not None else None
    return finetune_score(source.users(users), source.items(items), x, heads).data


# persistence -------------------------------------------------------------------

def _meta_from(cfg) -> dict[str, str]:
    return {k: ",".join(map(str, v)) if isinstance(v, tuple) else str(v) for k, v in asdict(cfg).items()}


def _config_from(meta: dict[str, str]) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        if f.name not in meta:
            continue
        raw = meta[f.name]
        default = getattr(ModelConfig, f.name) if hasattr(ModelConfig, f.name) else None
        if isinstance(default, bool):
            kw[f.name] = raw == "True"
        elif isinstance(default, int):
            kw[f.name] = int(raw)
        elif isinstance(default, float):
            kw[f.name] = float(raw)
        elif isinstance(default, tuple):
            kw[f.name] = tuple(int(x) for x in raw.split(",") if x)
        else:
            kw[f.name] = raw
    return ModelConfig(**kw)


def save_model(model: Model, directory: str | Path) -> str:
    return save_checkpoint(model.state_dict(), directory, _meta_from(model.config))


def load_model(directory: str | Path, graph) -> Model:
    state, meta = load_checkpoint(directory)
    model = Model(graph, _config_from(meta), np.random.default_rng(0))
    model.load_state_dict(state)
    return model


def save_heads(heads: FinetuneHeads, directory: str | Path, dim: int) -> str:
    meta = {"dim": dim, "cards": ",".join(map(str, heads.deepfm.cards)) if heads.deepfm else ""}
    return save_checkpoint(heads.state_dict(), directory, meta)


def load_heads(directory: str | Path) -> FinetuneHeads:
    state, meta = load_checkpoint(directory)
    cards = [int(c) for c in meta.get("cards", "").split(",") if c]
    heads = FinetuneHeads(int(meta["dim"]), cards or None, np.random.default_rng(0))
    heads.load_state_dict(state)
    return heads
