"""Command-line front end: generate data, pre-train, infer, fine-tune, rank and evaluate.

Every command reads a plain ``key=value`` config file (``--config``) and
flag overrides, then talks to the previous stages through files only::

    protorec gen-data --config exp.cfg --seed 7
    protorec pretrain --config exp.cfg --ablate cpl
    protorec infer    --config exp.cfg
    protorec zeroshot --config exp.cfg
    protorec finetune --config exp.cfg
    protorec eval     --config exp.cfg

Exit codes: 0 success, 1 validation error (config, inputs), 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import BundleError, DatasetBundle, SyntheticConfig, generate_synthetic, load_bundle, save_bundle
from .eval import NORMAL, ZERO_SHOT, SplitSpec, chronological_split, evaluate, write_metrics
from .store import checkpoint_hash, load_snapshot, publish_snapshot
from .training import (ABLATIONS, FinetuneConfig, ModelConfig, PretrainConfig, StoreEmbeddings,
                       apply_ablations, finetune, infer_embeddings, item_matrix, load_heads, load_model,
                       pretrain, save_heads, save_model, verify_snapshot, write_training_log)

log = logging.getLogger("protorec")

PROTOCOLS = (NORMAL, ZERO_SHOT, "both")


class ConfigError(ValueError):
    """Bad config key, value or combination; reported with exit code 1."""


@dataclass
class ExperimentConfig:
    # paths; empty means a default under ``workdir``
    workdir: str = "run"
    bundle: str = ""
    checkpoint: str = ""
    store: str = ""
    heads: str = ""
    logs: str = ""
    rankings: str = ""
    metrics: str = ""
    # model; the desk-scale values live in configs/desk.cfg
    dim: int = 64
    num_interests: int = 10
    num_prototypes: int = 900
    top_k: int = 160
    temperature: float = 0.2
    history_cap: int = 200
    decoder_hidden: tuple = (64, 32)
    pe_hidden: tuple = (128, 128)
    pe_identity: bool = True
    kmeans_init: bool = False
    # pre-training
    gamma: float = 1.0
    batch_size: int = 512
    epochs: int = 5
    lr: float = 1e-4
    # fine-tuning and ranking
    target_domain: int = -1  # -1: first target domain of the bundle
    finetune_epochs: int = 3
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 512
    use_deepfm: bool = True
    ranking_depth: int = 10
    protocol: str = "both"
    # run
    seed: int = 0
    ablate: tuple = ()
    # synthetic data
    data_num_entities: int = 500
    data_num_topics: int = 10
    data_num_relations: int = 4
    data_p_in: float = 0.1
    data_p_out: float = 0.002
    data_feature_noise: float = 0.3
    data_users_per_topic: int = 10
    data_source_domains: int = 2
    data_target_domains: int = 1
    data_items_per_source_domain: int = 200
    data_items_per_target_domain: int = 100
    data_records_per_source_domain: int = 7000
    data_records_per_target_domain: int = 6000
    data_history_min: int = 5
    data_history_max: int = 15
    data_target_only_fraction: float = 0.5
    data_preference_exposure: float = 0.5
    data_label_sharpness: float = 1.0
    data_label_offset: float = -1.0

    # keys as written in config files: ``data.num_topics`` for ``data_num_topics``
    @staticmethod
    def key_to_field(key: str) -> str:
        return key.replace(".", "_") if key.startswith("data.") else key

    def path(self, name: str) -> Path:
        defaults = {"bundle": "bundle", "checkpoint": "checkpoint", "store": "store", "heads": "heads",
                    "logs": "logs", "rankings": "zeroshot.tsv", "metrics": "metrics.tsv"}
        value = getattr(self, name)
        return Path(value) if value else Path(self.workdir) / defaults[name]

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(**{f.name: getattr(self, "data_" + f.name) for f in fields(SyntheticConfig)})

    def model_and_pretrain(self) -> tuple[ModelConfig, PretrainConfig]:
        mcfg = ModelConfig(dim=self.dim, num_interests=self.num_interests, num_prototypes=self.num_prototypes,
                           top_k=self.top_k, temperature=self.temperature, history_cap=self.history_cap,
                           decoder_hidden=self.decoder_hidden, pe_hidden=self.pe_hidden,
                           pe_identity=self.pe_identity, kmeans_init=self.kmeans_init)
        pcfg = PretrainConfig(gamma=self.gamma, batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                              seed=self.seed)
        return apply_ablations(mcfg, pcfg, self.ablate)

    def validate(self) -> None:
        """Check every value against the module preconditions before any work."""
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation {bad[0]!r}; choose from {', '.join(ABLATIONS)}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {', '.join(PROTOCOLS)}")
        if self.ranking_depth < 1:
            raise ConfigError("ranking_depth must be >= 1")
        try:
            self.synthetic().validate()
            mcfg, pcfg = self.model_and_pretrain()
            mcfg.validate()
            pcfg.validate()
            FinetuneConfig(0, self.finetune_epochs, self.finetune_lr, self.finetune_batch_size).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(parts) if name == "ablate" else tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def apply_settings(cfg: ExperimentConfig, pairs: Sequence[tuple[str, str]], origin: str) -> ExperimentConfig:
    known = {f.name: f for f in fields(ExperimentConfig)}
    updates = {}
    for key, raw in pairs:
        name = ExperimentConfig.key_to_field(key.strip())
        if name not in known:
            raise ConfigError(f"{origin}: unknown config key {key.strip()!r}")
        updates[name] = _convert(name, raw, getattr(cfg, name))
    return dataclasses.replace(cfg, **updates)


def read_config_file(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        try:
            pairs = read_config_file(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = apply_settings(cfg, pairs, str(args.config))
    flags = []
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        flags.append(tuple(item.split("=", 1)))
    for attr, key in (("seed", "seed"), ("topics", "data.num_topics"), ("entities", "data.num_entities"),
                      ("workdir", "workdir")):
        value = getattr(args, attr)
        if value is not None:
            flags.append((key, str(value)))
    if args.ablate:
        flags.append(("ablate", ",".join(args.ablate)))
    cfg = apply_settings(cfg, flags, "command line")
    cfg.validate()
    return cfg


# commands ------------------------------------------------------------------------

def _label_free_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    return load_bundle(cfg.path("bundle"), target_labels=False).without_truth()


def _target(cfg: ExperimentConfig, bundle: DatasetBundle) -> int:
    if cfg.target_domain >= 0:
        if cfg.target_domain not in bundle.target_domains:
            raise ConfigError(f"domain {cfg.target_domain} is not a target domain of the bundle")
        return cfg.target_domain
    if not bundle.target_domains:
        raise ConfigError("bundle has no target domain")
    return bundle.target_domains[0]


def _checked_snapshot(cfg: ExperimentConfig):
    store = load_snapshot(cfg.path("store"))
    expected = checkpoint_hash(cfg.path("checkpoint"))
    if store.checkpoint_hash.hex() != expected:
        raise RuntimeError(f"snapshot {store.snapshot_id} was built from a different checkpoint")
    return store


def cmd_gen_data(cfg: ExperimentConfig) -> None:
    bundle = generate_synthetic(cfg.synthetic(), cfg.seed)
    save_bundle(bundle, cfg.path("bundle"))
    log.info("wrote bundle to %s", cfg.path("bundle"))


def cmd_pretrain(cfg: ExperimentConfig) -> None:
    bundle = _label_free_bundle(cfg)
    mcfg, pcfg = cfg.model_and_pretrain()
    model, entries = pretrain(bundle, mcfg, pcfg)
    digest = save_model(model, cfg.path("checkpoint"))
    cfg.path("logs").mkdir(parents=True, exist_ok=True)
    write_training_log(cfg.path("logs") / "pretrain.log", entries)
    print(digest)


def cmd_infer(cfg: ExperimentConfig) -> None:
    bundle = _label_free_bundle(cfg)
    model = load_model(cfg.path("checkpoint"), bundle.graph)
    store = infer_embeddings(model, bundle)
    store.checkpoint_hash = bytes.fromhex(checkpoint_hash(cfg.path("checkpoint")))
    err = verify_snapshot(store, model, bundle, np.random.default_rng(cfg.seed))
    if err > 1e-6:
        raise RuntimeError(f"stored vectors disagree with recomputation (max abs diff {err:.3g})")
    path = publish_snapshot(store, cfg.path("store"))
    print(path)


def cmd_zeroshot(cfg: ExperimentConfig) -> None:
    bundle = _label_free_bundle(cfg)
    target = _target(cfg, bundle)
    store = _checked_snapshot(cfg)
    recs = bundle.records[target]
    catalog = np.array(bundle.domain_items(target), dtype=np.int64)
    items = item_matrix(catalog, bundle.item_entities, store.entity_vectors)
    users = sorted({r.user for r in recs})
    depth = min(cfg.ranking_depth, len(catalog))
    out = cfg.path("rankings")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for u in users:
            scores = items @ store.user(u)
            # higher score first, lower item id on ties
            order = np.lexsort((catalog, -scores))[:depth]
            for rank, k in enumerate(order, 1):
                fh.write(f"{u}\t{rank}\t{catalog[k]}\t{float(scores[k])!r}\n")


def cmd_finetune(cfg: ExperimentConfig) -> None:
    bundle = load_bundle(cfg.path("bundle")).without_truth()
    target = _target(cfg, bundle)
    store = _checked_snapshot(cfg)
    train, _, _ = chronological_split(bundle.records[target], SplitSpec())
    fcfg = FinetuneConfig(target, cfg.finetune_epochs, cfg.finetune_lr, cfg.finetune_batch_size, cfg.seed,
                          use_deepfm=cfg.use_deepfm)
    heads, losses = finetune(train, StoreEmbeddings(store, bundle.item_entities), bundle.profiles, fcfg)
    digest = save_heads(heads, cfg.path("heads"), store.dim)
    cfg.path("logs").mkdir(parents=True, exist_ok=True)
    (cfg.path("logs") / "finetune.log").write_text(
        "".join(f"{e}\t{loss:.6f}\n" for e, loss in enumerate(losses, 1)), encoding="utf-8")
    print(digest)


def cmd_eval(cfg: ExperimentConfig) -> None:
    from .pipeline import heads_scorer, zero_shot_scorer

    bundle = load_bundle(cfg.path("bundle")).without_truth()
    target = _target(cfg, bundle)
    store = _checked_snapshot(cfg)
    recs = bundle.records[target]
    catalog = bundle.domain_items(target)
    rows = []
    if cfg.protocol in (ZERO_SHOT, "both"):
        rows.append(evaluate(recs, target, ZERO_SHOT, zero_shot_scorer(store, bundle.item_entities),
                             catalog=catalog))
    if cfg.protocol in (NORMAL, "both"):
        heads = load_heads(cfg.path("heads"))
        scorer = heads_scorer(heads, StoreEmbeddings(store, bundle.item_entities), bundle.profiles)
        rows.append(evaluate(recs, target, NORMAL, scorer, catalog=catalog))
    out = cfg.path("metrics")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, rows)
    for r in rows:
        print(r.line())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "infer": cmd_infer,
    "zeroshot": cmd_zeroshot,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--ablate", action="append", choices=ABLATIONS,
                        help="drop a component: gl (graph learning), cpl (contrastive prototypes), "
                             "pea (prototype-enhanced attention); repeatable")
    common.add_argument("--topics", type=int, help="planted topics for gen-data")
    common.add_argument("--entities", type=int, help="entities for gen-data")
    common.add_argument("--workdir", help="directory holding default input and output paths")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="protorec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", "").replace("_", "-"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
    except ConfigError as exc:
        print(f"protorec: config error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg)
    except (ConfigError, BundleError) as exc:
        print(f"protorec: validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"protorec: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
