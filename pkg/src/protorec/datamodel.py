"""Domain data, its line-oriented file formats, and the planted-topic generator.

Files (tab-separated, UTF-8, no header, nonnegative decimal ids)::

    graph.tsv           head_id  rel_id  tail_id
    features.tsv        entity_id  f1,...,f32
    item_entities.tsv   item_id  e1[,e2[,e3]]
    interactions.tsv    domain_id  user_id  item_id  b1,b2,...  label  timestamp
    profiles.tsv        item|user  id  field_id:value_id,...
    truth.tsv           entity_id  topic_id          (synthetic bundles only)
    domains.tsv         domain_id  source|target
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FEATURE_DIM = 32
MAX_ENTITIES_PER_ITEM = 3
DEFAULT_MAX_BEHAVIORS = 200


class BundleError(ValueError):
    """Raised for any data file or invariant violation."""


@dataclass(frozen=True)
class EntityGraph:
    num_entities: int
    num_relations: int
    triplets: np.ndarray  # (n_triplets, 3) int64: head, relation, tail
    features: np.ndarray  # (num_entities, FEATURE_DIM)

    def validate(self) -> None:
        t = self.triplets
        if t.ndim != 2 or t.shape[1] != 3:
            raise BundleError("triplets must be an (n, 3) array")
        if t.size and (t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= self.num_entities):
            raise BundleError("triplet entity id out of range")
        if t.size and (t[:, 1].min() < 0 or t[:, 1].max() >= self.num_relations):
            raise BundleError("triplet relation id out of range")
        if len({tuple(row) for row in t.tolist()}) != len(t):
            raise BundleError("duplicate triplets")
        if self.features.shape[0] != self.num_entities:
            raise BundleError(f"expected {self.num_entities} feature rows, got {self.features.shape[0]}")
        if not np.all(np.isfinite(self.features)):
            raise BundleError("non-finite entity features")

    def edge_index(self, self_loops: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Undirected (dst, src) pairs, deduplicated, sorted by dst then src."""
        h, tl = self.triplets[:, 0], self.triplets[:, 2]
        dst = np.concatenate([h, tl])
        src = np.concatenate([tl, h])
        if self_loops:
            loop = np.arange(self.num_entities)
            dst = np.concatenate([dst, loop])
            src = np.concatenate([src, loop])
        pairs = np.unique(np.stack([dst, src], axis=1), axis=0)
        return pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)


class ItemEntityMap(Mapping[int, tuple[int, ...]]):
    """The item -> entities association; each item has 1 to 3 entities."""

    def __init__(self, mapping: Mapping[int, Sequence[int]]):
        self._map = {int(k): tuple(int(e) for e in v) for k, v in mapping.items()}

    def __getitem__(self, item: int) -> tuple[int, ...]:
        try:
            return self._map[item]
        except KeyError:
            raise KeyError(f"unmapped item {item}") from None

    def __iter__(self):
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def validate(self, num_entities: int) -> None:
        for item, ents in self._map.items():
            if not 1 <= len(ents) <= MAX_ENTITIES_PER_ITEM:
                raise BundleError(f"item {item} maps to {len(ents)} entities (allowed 1..{MAX_ENTITIES_PER_ITEM})")
            for e in ents:
                if not 0 <= e < num_entities:
                    raise BundleError(f"item {item} references entity {e} out of range")


@dataclass(frozen=True)
class InteractionRecord:
    domain: int
    user: int
    item: int
    behaviors: tuple[int, ...]
    label: int
    timestamp: int


@dataclass(frozen=True)
class EntityRecord:
    domain: int
    user: int
    entity: int
    label: int
    source_index: int  # position of the originating InteractionRecord


@dataclass
class ProfileFeatures:
    """Categorical profile fields. ``schema`` maps field id -> cardinality."""

    schema: dict[int, int]
    users: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    items: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    def user_fields(self) -> list[int]:
        return sorted({f for fv in self.users.values() for f, _ in fv})

    def item_fields(self) -> list[int]:
        return sorted({f for fv in self.items.values() for f, _ in fv})

    def validate(self) -> None:
        for kind, table in (("user", self.users), ("item", self.items)):
            for key, fields in table.items():
                for f, v in fields:
                    if f not in self.schema:
                        raise BundleError(f"{kind} {key}: field {f} not in schema")
                    if not 0 <= v < self.schema[f]:
                        raise BundleError(f"{kind} {key}: field {f} value {v} outside cardinality {self.schema[f]}")


@dataclass(frozen=True)
class DatasetBundle:
    graph: EntityGraph
    item_entities: ItemEntityMap
    records: dict[int, list[InteractionRecord]]  # domain -> chronological log
    source_domains: tuple[int, ...]
    target_domains: tuple[int, ...]
    profiles: ProfileFeatures
    truth: np.ndarray | None = None  # planted entity -> topic

    @property
    def source_records(self) -> list[InteractionRecord]:
        return [r for d in self.source_domains for r in self.records.get(d, [])]

    def domain_items(self, domain: int) -> list[int]:
        return sorted({r.item for r in self.records.get(domain, [])})

    def users(self) -> list[int]:
        return sorted({r.user for recs in self.records.values() for r in recs})

    def without_truth(self) -> "DatasetBundle":
        return dataclasses.replace(self, truth=None)

    def without_labels(self, domains: Iterable[int]) -> "DatasetBundle":
        """Copy with labels in ``domains`` zeroed; used to prove a flow never reads them."""
        domains = set(domains)
        recs = {d: [dataclasses.replace(r, label=0) for r in rs] if d in domains else rs
                for d, rs in self.records.items()}
        return dataclasses.replace(self, records=recs)

    def validate(self, max_behaviors: int = DEFAULT_MAX_BEHAVIORS) -> None:
        self.graph.validate()
        self.item_entities.validate(self.graph.num_entities)
        self.profiles.validate()
        if set(self.source_domains) & set(self.target_domains):
            raise BundleError("a domain cannot be both source and target")
        for d, recs in self.records.items():
            for r in recs:
                _check_record(r, self.item_entities, max_behaviors)
        src = {r.item for d in self.source_domains for r in self.records.get(d, [])}
        tgt = {r.item for d in self.target_domains for r in self.records.get(d, [])}
        shared = src & tgt
        if shared:
            raise BundleError(f"items shared between source and target domains: {sorted(shared)[:10]}")


def _check_record(r: InteractionRecord, imap: ItemEntityMap, max_behaviors: int) -> None:
    if r.label not in (0, 1):
        raise BundleError(f"label binary: got {r.label}")
    if r.item not in imap:
        raise BundleError(f"unmapped item {r.item}")
    if len(r.behaviors) > max_behaviors:
        raise BundleError(f"behavior list longer than {max_behaviors}")
    for b in r.behaviors:
        if b not in imap:
            raise BundleError(f"unmapped behavior item {b}")


def expand_to_entity_records(records: Sequence[InteractionRecord], imap: Mapping[int, Sequence[int]]) -> list[EntityRecord]:
    """One ``<user, entity, label>`` row per entity of each record's item, order kept."""
    out = []
    for i, r in enumerate(records):
        try:
            ents = imap[r.item]
        except KeyError:
            raise KeyError(f"unmapped item {r.item}") from None
        out.extend(EntityRecord(r.domain, r.user, e, r.label, i) for e in ents)
    return out


# ---------------------------------------------------------------------------
# file formats

BUNDLE_FILES = ("graph.tsv", "features.tsv", "item_entities.tsv", "interactions.tsv",
                "profiles.tsv", "truth.tsv", "domains.tsv")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",")] if text else []


def _lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line:
                yield lineno, line.split("\t")


def _parse(path: Path, lineno: int, fn, *args):
    try:
        return fn(*args)
    except BundleError as exc:
        raise BundleError(f"{path}:{lineno}: {exc}") from None
    except (ValueError, IndexError) as exc:
        raise BundleError(f"{path}:{lineno}: malformed line ({exc})") from None


def load_bundle(directory: str | Path, schema: Mapping[int, int] | None = None,
                target_domains: Sequence[int] | None = None,
                max_behaviors: int = DEFAULT_MAX_BEHAVIORS, target_labels: bool = True) -> DatasetBundle:
    """Parse and validate a bundle directory.

    ``target_domains`` falls back to ``domains.tsv``. Without ``schema``,
    field cardinalities are taken as one past the largest observed value.
    With ``target_labels=False`` every target-domain label is replaced by 0
    and its behavior list emptied as it is parsed, so label-free flows
    never hold the real values.
    """
    root = Path(directory)

    feats: dict[int, np.ndarray] = {}
    path = root / "features.tsv"
    for lineno, cols in _lines(path):
        def row(cols=cols):
            if len(cols) != 2:
                raise BundleError(f"expected 2 columns, got {len(cols)}")
            vec = np.array([float(x) for x in cols[1].split(",")])
            if vec.shape != (FEATURE_DIM,):
                raise BundleError(f"feature row has {vec.size} values, expected {FEATURE_DIM}")
            if not np.all(np.isfinite(vec)):
                raise BundleError("non-finite feature")
            return int(cols[0]), vec
        eid, vec = _parse(path, lineno, row)
        if eid in feats:
            raise BundleError(f"{path}:{lineno}: duplicate entity {eid}")
        feats[eid] = vec
    n_ent = len(feats)
    if sorted(feats) != list(range(n_ent)):
        raise BundleError(f"{path}: entity ids must be exactly 0..{n_ent - 1}")
    features = np.stack([feats[e] for e in range(n_ent)]) if n_ent else np.zeros((0, FEATURE_DIM))

    trip, seen = [], set()
    path = root / "graph.tsv"
    for lineno, cols in _lines(path):
        def triplet(cols=cols):
            if len(cols) != 3:
                raise BundleError(f"expected 3 columns, got {len(cols)}")
            return tuple(int(c) for c in cols)
        h, r, t = _parse(path, lineno, triplet)
        if not (0 <= h < n_ent and 0 <= t < n_ent) or r < 0:
            raise BundleError(f"{path}:{lineno}: id out of range in triplet {h},{r},{t}")
        if (h, r, t) in seen:
            raise BundleError(f"{path}:{lineno}: duplicate triplet {h},{r},{t}")
        seen.add((h, r, t))
        trip.append((h, r, t))
    triplets = np.array(trip, dtype=np.int64).reshape(-1, 3)
    n_rel = int(triplets[:, 1].max()) + 1 if len(triplets) else 0
    graph = EntityGraph(n_ent, n_rel, triplets, features)

    mapping: dict[int, tuple[int, ...]] = {}
    path = root / "item_entities.tsv"
    for lineno, cols in _lines(path):
        item, ents = _parse(path, lineno, lambda cols=cols: (int(cols[0]), tuple(_int_list(cols[1]))))
        if item in mapping:
            raise BundleError(f"{path}:{lineno}: item {item} listed twice")
        if not 1 <= len(ents) <= MAX_ENTITIES_PER_ITEM:
            raise BundleError(f"{path}:{lineno}: item {item} maps to {len(ents)} entities (allowed 1..{MAX_ENTITIES_PER_ITEM})")
        bad = [e for e in ents if not 0 <= e < n_ent]
        if bad:
            raise BundleError(f"{path}:{lineno}: item {item} references entity {bad[0]} out of range")
        mapping[item] = ents
    imap = ItemEntityMap(mapping)

    roles: dict[int, str] = {}
    path = root / "domains.tsv"
    if path.exists():
        for lineno, cols in _lines(path):
            roles[_parse(path, lineno, int, cols[0])] = cols[1]
    if target_domains is None:
        if not roles:
            raise BundleError("target domains unknown: pass target_domains or provide domains.tsv")
        target_domains = [d for d, role in roles.items() if role == "target"]
    target = tuple(sorted(int(d) for d in target_domains))

    records: dict[int, list[InteractionRecord]] = {}
    path = root / "interactions.tsv"
    for lineno, cols in _lines(path):
        def rec(cols=cols):
            if len(cols) != 6:
                raise BundleError(f"expected 6 columns, got {len(cols)}")
            r = InteractionRecord(int(cols[0]), int(cols[1]), int(cols[2]), tuple(_int_list(cols[3])),
                                  int(cols[4]), int(cols[5]))
            _check_record(r, imap, max_behaviors)
            return r
        r = _parse(path, lineno, rec)
        if not target_labels and r.domain in target:
            r = dataclasses.replace(r, label=0, behaviors=())  # behaviors are past clicks
        records.setdefault(r.domain, []).append(r)
    for d, recs in records.items():
        # stable: ties keep file order
        records[d] = sorted(recs, key=lambda r: r.timestamp)

    users: dict[int, tuple] = {}
    items: dict[int, tuple] = {}
    path = root / "profiles.tsv"
    if path.exists():
        for lineno, cols in _lines(path):
            def prof(cols=cols):
                if len(cols) != 3 or cols[0] not in ("user", "item"):
                    raise BundleError("expected 'user|item<TAB>id<TAB>fields'")
                fv = tuple(tuple(int(x) for x in pair.split(":")) for pair in cols[2].split(",") if pair)
                return cols[0], int(cols[1]), fv
            kind, key, fv = _parse(path, lineno, prof)
            (users if kind == "user" else items)[key] = fv
    if schema is None:
        card: dict[int, int] = {}
        for fv in list(users.values()) + list(items.values()):
            for f, v in fv:
                card[f] = max(card.get(f, 0), v + 1)
        schema = card
    profiles = ProfileFeatures(dict(schema), users, items)

    truth = None
    path = root / "truth.tsv"
    if path.exists():
        truth = np.full(n_ent, -1, dtype=np.int64)
        for lineno, cols in _lines(path):
            eid, topic = _parse(path, lineno, lambda cols=cols: (int(cols[0]), int(cols[1])))
            if not 0 <= eid < n_ent:
                raise BundleError(f"{path}:{lineno}: entity {eid} out of range")
            truth[eid] = topic

    known = set(records) | set(roles)
    source = tuple(sorted(d for d in known if d not in target))

    bundle = DatasetBundle(graph, imap, records, source, target, profiles, truth)
    bundle.validate(max_behaviors)
    return bundle


def _fmt_floats(vec: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in vec)


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    with open(root / "graph.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in g.triplets.tolist())
    with open(root / "features.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{e}\t{_fmt_floats(g.features[e])}\n" for e in range(g.num_entities))
    with open(root / "item_entities.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\t{','.join(map(str, es))}\n" for i, es in sorted(bundle.item_entities.items()))
    with open(root / "interactions.tsv", "w", encoding="utf-8") as fh:
        for d in sorted(bundle.records):
            for r in bundle.records[d]:
                fh.write(f"{r.domain}\t{r.user}\t{r.item}\t{','.join(map(str, r.behaviors))}\t{r.label}\t{r.timestamp}\n")
    with open(root / "profiles.tsv", "w", encoding="utf-8") as fh:
        for kind, table in (("user", bundle.profiles.users), ("item", bundle.profiles.items)):
            for key in sorted(table):
                fh.write(f"{kind}\t{key}\t{','.join(f'{f}:{v}' for f, v in table[key])}\n")
    with open(root / "domains.tsv", "w", encoding="utf-8") as fh:
        roles = [(d, "source") for d in bundle.source_domains] + [(d, "target") for d in bundle.target_domains]
        fh.writelines(f"{d}\t{role}\n" for d, role in sorted(roles))
    if bundle.truth is not None:
        with open(root / "truth.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{e}\t{t}\n" for e, t in enumerate(bundle.truth.tolist()))


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SyntheticConfig:
    num_entities: int = 500
    num_topics: int = 10
    num_relations: int = 4
    p_in: float = 0.1
    p_out: float = 0.002
    feature_noise: float = 0.3
    users_per_topic: int = 10
    source_domains: int = 2
    target_domains: int = 1
    items_per_source_domain: int = 200
    items_per_target_domain: int = 100
    records_per_source_domain: int = 7000
    records_per_target_domain: int = 6000
    history_min: int = 5
    history_max: int = 15
    # share of each topic's entities that only ever appear in target items
    target_only_fraction: float = 0.5
    # probability that an exposure is drawn from the user's preference rather than uniformly
    preference_exposure: float = 0.5
    label_sharpness: float = 1.0
    label_offset: float = -1.0

    def validate(self) -> None:
        if self.p_in <= self.p_out:
            raise ValueError("no planted structure: p_in must exceed p_out")
        if self.num_entities < self.num_topics or self.num_topics < 1:
            raise ValueError("need at least one entity per topic")
        if self.source_domains < 1:
            raise ValueError("need at least one source domain")
        if not 1 <= self.history_min <= self.history_max:
            raise ValueError("history bounds must satisfy 1 <= min <= max")


def sample_planted_graph(num_entities: int, topics: np.ndarray, p_in: float, p_out: float,
                         num_relations: int, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli edge per unordered pair, with intra-topic pairs at ``p_in``."""
    heads, tails = np.triu_indices(num_entities, k=1)
    prob = np.where(topics[heads] == topics[tails], p_in, p_out)
    keep = rng.random(prob.size) < prob
    heads, tails = heads[keep], tails[keep]
    flip = rng.random(heads.size) < 0.5
    heads, tails = np.where(flip, tails, heads), np.where(flip, heads, tails)
    rels = rng.integers(num_relations, size=heads.size)
    return np.stack([heads, rels, tails], axis=1).astype(np.int64)


def generate_synthetic(config: SyntheticConfig, seed: int) -> DatasetBundle:
    """Planted-topic bundle: topics drive graph edges, features, items and clicks."""
    config.validate()
    c = config
    rng = np.random.default_rng(seed)
    T = c.num_topics

    topics = rng.permutation(np.arange(c.num_entities) % T)
    triplets = sample_planted_graph(c.num_entities, topics, c.p_in, c.p_out, c.num_relations, rng)
    centroids = rng.normal(size=(T, FEATURE_DIM))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    features = centroids[topics] + c.feature_noise * rng.normal(size=(c.num_entities, FEATURE_DIM))
    graph = EntityGraph(c.num_entities, c.num_relations, triplets, features)

    shared_pool, full_pool = {}, {}
    for t in range(T):
        members = rng.permutation(np.flatnonzero(topics == t))
        n_shared = max(1, int(round(len(members) * (1.0 - c.target_only_fraction))))
        shared_pool[t] = members[:n_shared]
        full_pool[t] = members

    n_dom = c.source_domains + c.target_domains
    source = tuple(range(c.source_domains))
    target = tuple(range(c.source_domains, n_dom))
    mapping: dict[int, tuple[int, ...]] = {}
    item_topic: dict[int, int] = {}
    catalog: dict[int, dict[int, list[int]]] = {}  # domain -> topic -> items
    next_item = 0
    for d in range(n_dom):
        is_target = d in target
        n_items = c.items_per_target_domain if is_target else c.items_per_source_domain
        pool = full_pool if is_target else shared_pool
        catalog[d] = {t: [] for t in range(T)}
        for k in range(n_items):
            t = k % T
            size = min(int(rng.integers(1, MAX_ENTITIES_PER_ITEM + 1)), len(pool[t]))
            mapping[next_item] = tuple(int(e) for e in rng.choice(pool[t], size=size, replace=False))
            item_topic[next_item] = t
            catalog[d][t].append(next_item)
            next_item += 1

    n_users = c.users_per_topic * T
    primary = np.repeat(np.arange(T), c.users_per_topic)
    prefs = 0.6 * np.eye(T)[primary] + 0.4 * rng.dirichlet(np.full(T, 0.5), size=n_users)

    def draw_items(u: int, d: int, n: int) -> list[int]:
        ts = rng.choice(T, size=n, p=prefs[u])
        return [int(rng.choice(catalog[d][t])) for t in ts]

    records: dict[int, list[InteractionRecord]] = {}
    for d in range(n_dom):
        history = {}
        for u in range(n_users):
            n = int(rng.integers(c.history_min, c.history_max + 1))
            history[u] = tuple(dict.fromkeys(draw_items(u, d, n)))
        n_rec = c.records_per_target_domain if d in target else c.records_per_source_domain
        all_items = [i for t in range(T) for i in catalog[d][t]]
        users = rng.integers(n_users, size=n_rec)
        from_pref = rng.random(n_rec) < c.preference_exposure
        gaps = rng.integers(1, 5, size=n_rec)
        stamps = np.cumsum(gaps)
        recs = []
        for k in range(n_rec):
            u = int(users[k])
            item = draw_items(u, d, 1)[0] if from_pref[k] else int(rng.choice(all_items))
            logit = c.label_sharpness * (T * prefs[u, item_topic[item]] - 1.0) + c.label_offset
            label = int(rng.random() < 1.0 / (1.0 + np.exp(-logit)))
            recs.append(InteractionRecord(d, u, item, history[u], label, int(stamps[k])))
        records[d] = recs

    schema = {0: 6, 1: 8, 2: 5, 3: 4}
    users_prof = {}
    for u in range(n_users):
        occ = int(primary[u] % 8) if rng.random() < 0.5 else int(rng.integers(8))
        users_prof[u] = ((0, int(rng.integers(6))), (1, occ))
    items_prof = {}
    for d in target:
        for t in range(T):
            for i in catalog[d][t]:
                cat = t % 5 if rng.random() < 0.7 else int(rng.integers(5))
                items_prof[i] = ((2, cat), (3, int(rng.integers(4))))
    profiles = ProfileFeatures(schema, users_prof, items_prof)

    bundle = DatasetBundle(graph, ItemEntityMap(mapping), records, source, target, profiles,
                           topics.astype(np.int64))
    bundle.validate(max(DEFAULT_MAX_BEHAVIORS, c.history_max))
    return bundle
