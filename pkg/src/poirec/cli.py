"""Command-line driver: ``poirec [options] {synth,stats,prepare,train,evaluate,sweep,recommend}``.

Configuration is a YAML file (see ``DEFAULTS`` for the schema) whose values
can be overridden with ``--set section.key=value``.  The working directory
comes from ``--workdir``, then ``$POIREC_WORKDIR``, then ``paths.workdir``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import corpus
from .corpus import Catalog, CorpusError, SplitDataset, SyntheticSpec
from .evaluator import EvalProtocol, evaluate, sweep_csv, sweep_k
from .model import CheckpointError, ModelConfig, init_params, load_checkpoint, predict_next, save_checkpoint
from .trainer import TrainConfig, TrainingError, fit, history_csv

logger = logging.getLogger("poirec")

WORKDIR_ENV = "POIREC_WORKDIR"
SCHEMA_VERSION = 1

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "paths": {"interactions": None, "metadata": None, "workdir": "work"},
    "corpus": {"min_interactions": 10, "strict": True},
    "model": {
        "num_layers": 3, "num_heads": 6, "hidden_size": 256, "max_seq_len": 100,
        "mask_ratio": 0.2, "dropout_rate": 0.5, "ffn_multiplier": 4, "use_keywords": True,
    },
    "train": {
        "epochs": 20, "learning_rate": 0.001, "batch_size": 16, "mask_ratio": 0.2,
        "negatives_per_positive": 1, "early_stop_patience": None, "clip_norm": None,
        "last_item_mask_prob": 0.0, "random_crop": True,
    },
    "eval": {
        "ks": [10, 20, 50],
        "batch_size": 16,
        "protocols": [
            {"strategy": "full"},
            {"strategy": "uniform", "X": 100},
            {"strategy": "popularity", "X": 100},
        ],
    },
    "sweep": {"k_min": 10, "k_max": 100, "step": 10, "strategy": "full", "X": 100},
    "reports": {"formats": ["json", "csv"]},
}


class ConfigError(ValueError):
    pass


class UsageError(ConfigError):
    pass


# -- configuration -------------------------------------------------------------

def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def derive_seed(seed: int, subsystem: str) -> int:
    tag = int.from_bytes(hashlib.sha256(subsystem.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, np.uint64)[0])


@dataclass
class RunConfig:
    interactions: Path | None
    metadata: Path | None
    workdir: Path
    min_interactions: int
    strict: bool
    model: ModelConfig
    train: TrainConfig
    init_seed: int
    protocols: list[EvalProtocol]
    eval_batch_size: int
    sweep: dict
    formats: list[str]
    raw: dict = field(default_factory=dict)


def load_config(path: str | None = None, overrides=(), workdir: str | None = None) -> RunConfig:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = _merge(cfg, yaml.safe_load(fh) or {})
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    for item in overrides:
        _apply_set(cfg, item)
    if os.environ.get(WORKDIR_ENV):
        cfg["paths"]["workdir"] = os.environ[WORKDIR_ENV]
    if workdir is not None:
        cfg["paths"]["workdir"] = workdir
    return build_run_config(cfg)


def build_run_config(cfg: dict) -> RunConfig:
    seed = int(cfg["seed"])
    try:
        model = ModelConfig(**cfg["model"])
        train_opts = dict(cfg["train"])
        train_opts.setdefault("seed", derive_seed(seed, "train"))
        if train_opts["seed"] is None:
            train_opts["seed"] = derive_seed(seed, "train")
        train = TrainConfig(**train_opts)
        ks = tuple(int(k) for k in cfg["eval"]["ks"])
        eval_seed = derive_seed(seed, "eval")
        protocols = [
            EvalProtocol(p["strategy"], x=int(p.get("X", 100)), ks=ks, seed=int(p.get("seed", eval_seed)),
                         exclude_train_items=bool(p.get("exclude_train_items", False)))
            for p in cfg["eval"]["protocols"]
        ]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    formats = list(cfg["reports"]["formats"])
    if not set(formats) <= {"json", "csv"}:
        raise ConfigError(f"unknown report formats {formats}")
    paths = cfg["paths"]
    return RunConfig(
        interactions=Path(paths["interactions"]) if paths.get("interactions") else None,
        metadata=Path(paths["metadata"]) if paths.get("metadata") else None,
        workdir=Path(paths["workdir"]),
        min_interactions=int(cfg["corpus"]["min_interactions"]),
        strict=bool(cfg["corpus"]["strict"]),
        model=model,
        train=train,
        init_seed=derive_seed(seed, "init"),
        protocols=protocols,
        eval_batch_size=int(cfg["eval"]["batch_size"]),
        sweep=dict(cfg["sweep"]),
        formats=formats,
        raw=cfg,
    )


# -- workdir artifacts ------------------------------------------------------------

def _dump_json(path: Path, obj) -> str:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    path.write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_prepared(workdir: Path) -> SplitDataset:
    try:
        catalog = Catalog.from_dict(json.loads((workdir / "catalog.json").read_text(encoding="utf-8")))
        split = json.loads((workdir / "split.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CorpusError(f"workdir {workdir} is not prepared (missing {Path(exc.filename).name}); run prepare") from None
    return SplitDataset.from_dict(split, catalog)


def _checkpoint_path(run: RunConfig, given: str | None) -> Path:
    return Path(given) if given else run.workdir / "model.ckpt"


def _effective_protocol(p: EvalProtocol, catalog: Catalog) -> EvalProtocol:
    if p.strategy != "full" and p.x > catalog.num_items - 1:
        logger.warning("X=%d exceeds the %d available negatives; using X=%d",
                       p.x, catalog.num_items - 1, catalog.num_items - 1)
        return replace(p, x=catalog.num_items - 1)
    return p


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(args.users, args.items, args.itinerary, args.noise, args.seed,
                         events_per_user=args.events, correlated_keywords=args.correlated)
    try:
        interactions, metadata = corpus.generate_synthetic(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "interactions.tsv").write_text(
        "".join(corpus.format_interaction(i) + "\n" for i in interactions), encoding="utf-8")
    (out / "metadata.tsv").write_text(
        "".join(corpus.format_metadata(m) + "\n" for m in metadata), encoding="utf-8")
    print(f"wrote {len(interactions)} interactions and {len(metadata)} items to {out}")
    return EXIT_OK


def _read_inputs(run: RunConfig):
    if run.interactions is None or not run.interactions.exists():
        raise ConfigError(f"interactions file {run.interactions} does not exist")
    with open(run.interactions, encoding="utf-8") as fh:
        interactions = corpus.parse_interactions(fh, strict=run.strict)
    metadata = []
    if run.metadata is not None and run.metadata.exists():
        with open(run.metadata, encoding="utf-8") as fh:
            metadata = corpus.parse_metadata(fh)
    else:
        logger.warning("no metadata file (%s); items get empty keyword sets", run.metadata)
    return interactions, metadata


def cmd_stats(run: RunConfig, args) -> int:
    interactions, metadata = _read_inputs(run)
    implicit = corpus.to_implicit(interactions)
    catalog = corpus.build_catalog(implicit, metadata) if implicit else None
    report = corpus.dataset_stats(implicit, catalog).to_dict()
    text = json.dumps(report, sort_keys=True, indent=1)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_prepare(run: RunConfig, args) -> int:
    interactions, metadata = _read_inputs(run)
    implicit = corpus.to_implicit(interactions)
    kept, dropped = corpus.filter_min_interactions(implicit, max(run.min_interactions, 3))
    if dropped:
        logger.info("excluded %d users below %d interactions", dropped, max(run.min_interactions, 3))
    catalog = corpus.build_catalog(kept, metadata)
    data = corpus.split_leave_one_out(corpus.build_sequences(kept, catalog), catalog)
    run.workdir.mkdir(parents=True, exist_ok=True)
    digests = {
        "catalog.json": _dump_json(run.workdir / "catalog.json", data.catalog.to_dict()),
        "split.json": _dump_json(run.workdir / "split.json", data.to_dict()),
        "stats.json": _dump_json(run.workdir / "stats.json",
                                 corpus.dataset_stats(kept, data.catalog).to_dict()),
    }
    _dump_json(run.workdir / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "catalog_digest": data.catalog.digest(),
        "files": digests,
        "num_users": len(data),
        "num_items": data.catalog.num_items,
        "num_keywords": data.catalog.num_keywords,
        "excluded_users": dropped,
    })
    print(f"prepared {len(data)} users, {data.catalog.num_items} items, "
          f"{data.catalog.num_keywords} keywords in {run.workdir}")
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    data = load_prepared(run.workdir)
    catalog = data.catalog
    params = init_params(run.model, catalog.num_items, catalog.num_keywords, run.init_seed)

    def report(stats):
        print(f"epoch {stats.epoch:3d}  loss {stats.mean_loss:.6f}  valid HR@10 {stats.valid_hr10:.4f}",
              flush=True)

    result = fit(data, run.train, run.model, params=params, on_epoch=report)
    result.params.assert_finite()
    digest = save_checkpoint(run.workdir / "model.ckpt", result.params, run.model, catalog.digest())
    (run.workdir / "history.csv").write_text(history_csv(result.history), encoding="utf-8")
    print(f"best epoch {result.best_epoch}; checkpoint sha256 {digest}")
    return EXIT_OK


def _load_model(run: RunConfig, args, data: SplitDataset):
    return load_checkpoint(_checkpoint_path(run, args.checkpoint), catalog_digest=data.catalog.digest())


def cmd_evaluate(run: RunConfig, args) -> int:
    data = load_prepared(run.workdir)
    params, model_config, _ = _load_model(run, args, data)
    out = run.workdir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    for proto in run.protocols:
        proto = _effective_protocol(proto, data.catalog)
        report = evaluate(params, model_config, data.test, data.catalog, proto, run.eval_batch_size)
        stem = f"metrics_{proto.label}"
        if "json" in run.formats:
            (out / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
        if "csv" in run.formats:
            (out / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
        summary = "  ".join(f"{m}@{k} {report.mean(m, k):.4f}" for m in ("hr", "ndcg") for k in proto.ks)
        print(f"{proto.label}: {summary}")
    return EXIT_OK


def cmd_sweep(run: RunConfig, args) -> int:
    data = load_prepared(run.workdir)
    params, model_config, _ = _load_model(run, args, data)
    s = run.sweep
    eval_seed = run.protocols[0].seed if run.protocols else 0
    proto = _effective_protocol(EvalProtocol(s["strategy"], x=int(s.get("X", 100)), ks=(1,), seed=eval_seed),
                                data.catalog)
    size = data.catalog.num_items if proto.strategy == "full" else proto.x + 1
    k_max = int(s["k_max"])
    if k_max > size:
        logger.warning("k_max %d exceeds candidate-set size %d; clamping", k_max, size)
        k_max = size
    rows = sweep_k(params, model_config, data.test, data.catalog, proto,
                   int(s["k_min"]), k_max, int(s["step"]), run.eval_batch_size)
    out = run.workdir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{proto.label}.csv"
    path.write_text(sweep_csv(rows), encoding="utf-8")
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_recommend(run: RunConfig, args) -> int:
    data = load_prepared(run.workdir)
    params, model_config, _ = _load_model(run, args, data)
    catalog = data.catalog
    index = catalog.item_index
    if args.user is not None:
        try:
            u = data.user_ids.index(args.user)
        except ValueError:
            raise CorpusError(f"unknown user {args.user!r}") from None
        ctx, target = data.test[u]
        history = list(ctx) + [target]
    else:
        tokens = Path(args.history).read_text(encoding="utf-8").split()
        unknown = [t for t in tokens if t not in index]
        if unknown:
            raise CorpusError(f"unknown item ids in history: {', '.join(unknown)}")
        history = [index[t] for t in tokens]
    candidates = None
    if args.candidates:
        names = [c for c in args.candidates.split(",") if c]
        unknown = [c for c in names if c not in index]
        if unknown:
            raise CorpusError(f"unknown candidate item ids: {', '.join(unknown)}")
        candidates = sorted({index[c] for c in names})
    for rank, (item, score) in enumerate(
            predict_next(history, catalog, params, model_config, args.k, candidates), start=1):
        print(f"{rank}\t{catalog.item_ids[item - 1]}\t{catalog.name_of(item)}\t{score:.6f}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poirec", description=__doc__.splitlines()[0])
    parser.add_argument("-c", "--config", help="YAML run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set model.hidden_size=64")
    parser.add_argument("--workdir", help=f"working directory (overrides ${WORKDIR_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic itinerary corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--items", type=int, default=30)
    p.add_argument("--itinerary", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--events", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--correlated", action="store_true", help="itineraries share a group category")

    p = sub.add_parser("stats", help="print corpus statistics as JSON")
    p.add_argument("--out", help="also write the JSON here")

    sub.add_parser("prepare", help="build catalog and leave-one-out split in the workdir")
    sub.add_parser("train", help="train and write model.ckpt and history.csv")
    for name, helptext in (("evaluate", "write metric reports per protocol"),
                           ("sweep", "write the k-sweep curve")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint")

    p = sub.add_parser("recommend", help="print top-k items for a user or history")
    p.add_argument("--checkpoint")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--user")
    who.add_argument("--history", help="file of whitespace-separated item ids, oldest first")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--candidates", help="comma-separated item ids to rank")
    return parser


COMMANDS = {
    "stats": cmd_stats,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "recommend": cmd_recommend,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "synth":
            return cmd_synth(args)
        run = load_config(args.config, args.set, args.workdir)
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"poirec: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, CheckpointError, OSError) as exc:
        print(f"poirec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"poirec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
