"""``medkg`` command line: synthetic data, KG embeddings, graphs, reader training and experiments.

Exit codes: 0 success, 2 usage or input error, 1 internal error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .corpus import Sample, SynthSpec, load_samples, synth_generate, write_synthetic
from .graph import NodeKind, build_graph, export_graph
from .kb import KnowledgeBase, MalformedRowError
from .kg_embed import (
    EmbeddingFormatError,
    TransConfig,
    eval_link_prediction,
    export_embeddings,
    import_embeddings,
    split_triplets,
    train_embeddings,
)
from .tensor import ShapeError
from .trainer import (
    ABLATION_FLAGS,
    CheckpointError,
    ConfigError,
    TrainConfig,
    ablate,
    cross_validate,
    evaluate,
    fit,
    format_table,
    hop_sweep,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("medkg")

INPUT_ERRORS = (ConfigError, CheckpointError, EmbeddingFormatError, MalformedRowError, ShapeError,
                FileNotFoundError, FileExistsError, KeyError, ValueError, json.JSONDecodeError,
                configparser.Error)


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(path: Path, command: str, config: dict, inputs: Sequence[Path], seed: int,
                   started: float, outputs: Sequence[Path]) -> None:
    write_json(path, {
        "subcommand": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs if p.is_file()},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    })


def read_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file {path} not found")
        cp.read(path, encoding="utf-8")
    return cp


def coerce(value: str, like: Any, name: str) -> Any:
    """Parse a config string using the type of the dataclass default."""
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if value.strip().lower() in ("none", ""):
        return None
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.split(","))
    if isinstance(like, int) or name in ("cv_folds",):
        return int(value)
    if isinstance(like, float) or name in ("clip_norm",):
        return float(value)
    return value


def section_values(cp: configparser.ConfigParser, section: str, cls) -> dict:
    if not cp.has_section(section):
        return {}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, raw in cp.items(section):
        if key not in defaults:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        out[key] = coerce(raw, defaults[key], key)
    return out


def resolve_seed(args, cp: configparser.ConfigParser, section: str) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if cp.has_option(section, "seed"):
        return cp.getint(section, "seed")
    env = os.environ.get("MEDKG_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MEDKG_SEED must be an integer, got {env!r}") from None
    return 0


def load_kb(kb_dir: str) -> tuple[KnowledgeBase, list[Path]]:
    d = Path(kb_dir)
    trip, path = d / "triplets.tsv", d / "pathways.tsv"
    if not trip.is_file():
        raise FileNotFoundError(f"{trip} not found")
    return KnowledgeBase.load(trip, path if path.is_file() else None), [trip, path]


def load_data(data_dir: str) -> tuple[list[Sample], Path]:
    p = Path(data_dir)
    p = p / "samples.json" if p.is_dir() else p
    if not p.is_file():
        raise FileNotFoundError(f"{p} not found")
    return load_samples(p), p


def split_samples(samples: Sequence[Sample], dev_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Deterministic tail split: the last ``dev_fraction`` of the file is dev."""
    if not 0.0 < dev_fraction < 1.0:
        raise ConfigError("dev fraction must be in (0, 1)")
    n_dev = max(1, int(round(dev_fraction * len(samples))))
    if n_dev >= len(samples):
        raise ConfigError(f"{len(samples)} samples are too few for a dev split")
    return list(samples[:-n_dev]), list(samples[-n_dev:])


def prepare_out(out: str, force: bool) -> Path:
    d = Path(out)
    if d.exists() and not d.is_dir():
        raise FileExistsError(f"{d} exists and is not a directory")
    if d.exists() and any(d.iterdir()) and not force:
        raise FileExistsError(f"{d} is not empty (pass --force to overwrite)")
    d.mkdir(parents=True, exist_ok=True)
    return d


def train_config(args, cp: configparser.ConfigParser) -> TrainConfig:
    values = {**{f.name: f.default for f in fields(TrainConfig)}, **section_values(cp, "train", TrainConfig)}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None and v is not False:
            values[f.name] = v
    values["seed"] = resolve_seed(args, cp, "train")
    return TrainConfig(**values)


def load_tables(args, config: TrainConfig):
    transe = import_embeddings(args.transe) if args.transe else None
    transh = import_embeddings(args.transh) if args.transh else None
    for name, table in (("transe", transe), ("transh", transh)):
        if table is not None and table.dim != config.knowledge_dim:
            raise ConfigError(f"--{name} table has dim {table.dim} but knowledge_dim is {config.knowledge_dim}")
    return transe, transh


def table_inputs(args) -> list[Path]:
    return [Path(p) for p in (args.transe, args.transh) if p]


# -- subcommands -----------------------------------------------------------------------


def cmd_synth(args, cp) -> list[Path]:
    spec_values = section_values(cp, "synth", SynthSpec)
    inputs = []
    if args.spec:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        unknown = set(raw) - {f.name for f in fields(SynthSpec)}
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        spec_values.update(raw)
        inputs.append(Path(args.spec))
    if args.seed is not None or "seed" not in spec_values:
        spec_values["seed"] = resolve_seed(args, cp, "synth")
    spec = SynthSpec(**spec_values)
    out = prepare_out(args.out, args.force)
    kb, samples, truths = synth_generate(spec)
    paths = list(write_synthetic(out, kb, samples, truths).values())
    args._manifest = (out / "manifest.json", spec.to_json(), inputs, spec.seed)
    return paths


def cmd_train_kg(args, cp) -> list[Path]:
    kb, kb_files = load_kb(args.kb)
    values = {**section_values(cp, "kg", TransConfig)}
    for key in ("model", "dim", "epochs", "lr", "margin", "optimizer"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    config = TransConfig(**values)
    seed = resolve_seed(args, cp, "kg")
    rng = np.random.default_rng(seed)
    train_kb, test = (split_triplets(kb, args.test_fraction, rng) if args.test_fraction > 0 else (kb, None))
    table, curve = train_embeddings(train_kb, config, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(table, out)
    report = {
        "model": config.model,
        "filtered": eval_link_prediction(table, kb, filtered=True, test=test).as_dict(),
        "raw": eval_link_prediction(table, kb, filtered=False, test=test).as_dict(),
        "final_loss": curve[-1] if curve else None,
    }
    report_path = out.with_name(out.name + ".report.json")
    write_json(report_path, report)
    args._manifest = (out.with_name(out.name + ".manifest.json"), asdict(config), kb_files, seed)
    return [out, report_path]


def cmd_build_graph(args, cp) -> list[Path]:
    kb, kb_files = load_kb(args.kb)
    samples, data_file = load_data(args.data)
    by_id = {s.id: s for s in samples}
    if args.sample not in by_id:
        raise ValueError(f"unknown sample id {args.sample!r}")
    sample = by_id[args.sample]
    weights = scores = None
    inputs = kb_files + [data_file]
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        prep = model.prepare(sample, kb)
        logits, weights, _ = model.forward(prep)
        graph = prep.graph
        s = logits.data[0]
        prob = np.exp(s - s.max())
        prob /= prob.sum()
        by_cand = dict(zip(graph.candidates, prob))
        scores = {i: float(by_cand[n.entity]) for i, n in enumerate(graph.nodes)
                  if n.kind in (NodeKind.MENTION, NodeKind.CANDIDATE) and n.entity in by_cand}
        inputs.append(Path(args.ckpt))
    else:
        graph = build_graph(sample, kb)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_graph(graph, out, args.format, edge_weights=weights, node_scores=scores)
    args._manifest = (out.with_name(out.name + ".manifest.json"),
                      {"sample": args.sample, "format": args.format, "ckpt": args.ckpt}, inputs, 0)
    return [out]


def _experiment_setup(args, cp):
    if getattr(args, "cv_folds", None) and args.command != "cv":
        raise UsageError("--cv-folds belongs to the cv subcommand")
    try:
        config = train_config(args, cp)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    kb, kb_files = load_kb(args.kb)
    samples, data_file = load_data(args.data)
    transe, transh = load_tables(args, config)
    out = prepare_out(args.out, args.force)
    return config, kb, samples, transe, transh, out, kb_files + [data_file] + table_inputs(args)


def cmd_train_reader(args, cp) -> list[Path]:
    config, kb, samples, transe, transh, out, inputs = _experiment_setup(args, cp)
    train_s, dev_s = split_samples(samples, args.dev_fraction)
    res = fit(config, kb, train_s, dev_s, transe, transh)
    ckpt = out / "model.ckpt"
    save_checkpoint(res.model, ckpt)
    write_json(out / "train_log.json", {**res.train.to_json(), "config": asdict(config)})
    write_json(out / "dev_report.json", res.report.to_json())
    args._manifest = (out / "manifest.json", asdict(config), inputs, config.seed)
    return [ckpt, out / "train_log.json", out / "dev_report.json"]


def cmd_eval_reader(args, cp) -> list[Path]:
    kb, kb_files = load_kb(args.kb)
    samples, data_file = load_data(args.data)
    model = load_checkpoint(args.ckpt)
    if args.split == "dev":
        samples = split_samples(samples, args.dev_fraction)[1]
    out = prepare_out(args.out, args.force)
    report = evaluate(model, [model.prepare(s, kb) for s in samples])
    write_json(out / "eval_report.json", report.to_json())
    rows = [{"bucket": k, **v} for k, v in report.buckets.items()]
    (out / "eval_buckets.txt").write_text(format_table(rows), encoding="utf-8")
    args._manifest = (out / "manifest.json", {"ckpt": args.ckpt, "split": args.split,
                                              "dev_fraction": args.dev_fraction},
                      kb_files + [data_file, Path(args.ckpt)], model.config.seed)
    return [out / "eval_report.json", out / "eval_buckets.txt"]


def parse_hops(text: str) -> list[int]:
    try:
        hops = [int(h) for h in text.split(",") if h.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--hops expects comma-separated integers, got {text!r}") from None
    if not hops or min(hops) < 1:
        raise argparse.ArgumentTypeError("--hops needs positive integers")
    return hops


def cmd_sweep(args, cp) -> list[Path]:
    config, kb, samples, transe, transh, out, inputs = _experiment_setup(args, cp)
    train_s, dev_s = split_samples(samples, args.dev_fraction)
    rows = hop_sweep(config, kb, train_s, dev_s, args.sweep_hops, transe, transh)
    write_json(out / "sweep.json", {"rows": rows, "config": asdict(config)})
    (out / "sweep.txt").write_text(format_table(rows), encoding="utf-8")
    args._manifest = (out / "manifest.json", {**asdict(config), "hops": args.sweep_hops}, inputs, config.seed)
    return [out / "sweep.json", out / "sweep.txt"]


def cmd_ablate(args, cp) -> list[Path]:
    config, kb, samples, transe, transh, out, inputs = _experiment_setup(args, cp)
    flags = args.flag or list(ABLATION_FLAGS)
    for f in flags:
        if f not in ABLATION_FLAGS:
            raise UsageError(f"unknown ablation flag {f!r}; choose from {', '.join(ABLATION_FLAGS)}")
        try:
            config.with_flags(**{f: True})
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    train_s, dev_s = split_samples(samples, args.dev_fraction)
    rows = ablate(config, kb, train_s, dev_s, flags, transe, transh)
    write_json(out / "ablation.json", {"rows": rows, "config": asdict(config)})
    (out / "ablation.txt").write_text(format_table(rows), encoding="utf-8")
    args._manifest = (out / "manifest.json", {**asdict(config), "flags": flags}, inputs, config.seed)
    return [out / "ablation.json", out / "ablation.txt"]


def cmd_cv(args, cp) -> list[Path]:
    config, kb, samples, transe, transh, out, inputs = _experiment_setup(args, cp)
    if config.cv_folds is None:
        config = config.with_flags(cv_folds=9)
    rep = cross_validate(samples, kb, config, transe, transh, keep=args.keep, out_dir=out)
    write_json(out / "cv.json", {**rep.to_json(), "config": asdict(config)})
    (out / "cv.txt").write_text(format_table(rep.folds), encoding="utf-8")
    args._manifest = (out / "manifest.json", asdict(config), inputs, config.seed)
    return [out / "cv.json", out / "cv.txt"] + sorted(out.glob("fold*.ckpt"))


# -- parser ----------------------------------------------------------------------------

TRAIN_HELP = {
    "epochs": "maximum training epochs",
    "batch_size": "samples per optimizer step",
    "lr": "learning rate",
    "optimizer": "adam or sgd",
    "clip_norm": "global gradient-norm clip",
    "hops": "reasoning layers L",
    "heads": "attention heads K",
    "hidden": "encoder hidden size h",
    "word_dim": "word embedding size",
    "knowledge_dim": "knowledge embedding size d_k",
    "patience": "early-stopping patience in epochs",
}


def add_train_flags(p: argparse.ArgumentParser, cv: bool = False, sweep: bool = False) -> None:
    p.add_argument("--data", required=True, help="samples.json or a directory holding it")
    p.add_argument("--kb", required=True, help="directory with triplets.tsv and pathways.tsv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory (default: off)")
    p.add_argument("--transe", help="TransE embedding file (default: fixed random vectors)")
    p.add_argument("--transh", help="TransH embedding file (default: fixed random vectors)")
    p.add_argument("--seed", type=int, help="random seed (default: config, then $MEDKG_SEED, then 0)")
    if not cv:
        p.add_argument("--dev-fraction", type=float, default=0.2,
                       help="tail fraction of samples used as dev (default: 0.2)")
    defaults = {f.name: f.default for f in fields(TrainConfig)}
    for name, text in TRAIN_HELP.items():
        if sweep and name == "hops":
            continue
        kind = {"optimizer": str, "lr": float, "clip_norm": float}.get(name, int)
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind,
                       help=f"{text} (default: {defaults[name]})")
    p.add_argument("--finetune-knowledge", dest="finetune_knowledge", action="store_true",
                   help="train the knowledge vectors too (default: frozen)")
    p.add_argument("--cv-folds", dest="cv_folds", type=int,
                   help="number of folds (default: 9)" if cv else argparse.SUPPRESS)
    for flag in ABLATION_FLAGS:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true",
                       help=f"ablation: {flag.replace('_', ' ')} (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medkg", description="Knowledge-graph-backed multi-hop drug QA.")
    parser.add_argument("--config", help="INI file with [synth], [kg] and [train] sections (default: none)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    parser.add_argument("--version", action="version", version=f"medkg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus and KB")
    p.add_argument("--spec", help="JSON file of generator settings (default: built-in spec)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="random seed (default: spec, then $MEDKG_SEED, then 0)")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory (default: off)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-kg", help="train TransE or TransH embeddings")
    p.add_argument("--kb", required=True, help="directory with triplets.tsv and pathways.tsv")
    p.add_argument("--model", choices=("transe", "transh"), help="embedding model (default: transe)")
    p.add_argument("--dim", type=int, help="embedding size (default: 200)")
    p.add_argument("--epochs", type=int, help="training epochs (default: 1000)")
    p.add_argument("--lr", type=float, help="learning rate (default: 0.01)")
    p.add_argument("--margin", type=float, help="hinge margin (default: 1.0)")
    p.add_argument("--optimizer", choices=("sgd", "adam"), help="update rule (default: sgd)")
    p.add_argument("--test-fraction", type=float, default=0.0,
                   help="hold out this fraction of triplets for evaluation (default: 0, evaluate on the KB)")
    p.add_argument("--seed", type=int, help="random seed (default: config, then $MEDKG_SEED, then 0)")
    p.add_argument("--out", required=True, help="embedding file to write")
    p.set_defaults(func=cmd_train_kg)

    p = sub.add_parser("build-graph", help="build and export one sample's reasoning graph")
    p.add_argument("--sample", required=True, help="sample id")
    p.add_argument("--data", required=True, help="samples.json or a directory holding it")
    p.add_argument("--kb", required=True, help="directory with triplets.tsv and pathways.tsv")
    p.add_argument("--out", required=True, help="file to write")
    p.add_argument("--format", choices=("dot", "json"), default="json", help="export format (default: json)")
    p.add_argument("--ckpt", help="reader checkpoint; adds attention weights and candidate scores (default: none)")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train-reader", help="train the reader and keep the best dev checkpoint")
    add_train_flags(p)
    p.set_defaults(func=cmd_train_reader)

    p = sub.add_parser("eval-reader", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint from train-reader")
    p.add_argument("--data", required=True, help="samples.json or a directory holding it")
    p.add_argument("--kb", required=True, help="directory with triplets.tsv and pathways.tsv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=("dev", "all"), default="dev", help="which samples to score (default: dev)")
    p.add_argument("--dev-fraction", type=float, default=0.2, help="must match training (default: 0.2)")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory (default: off)")
    p.set_defaults(func=cmd_eval_reader)

    p = sub.add_parser("sweep", help="retrain across hop counts")
    add_train_flags(p, sweep=True)
    p.add_argument("--hops", dest="sweep_hops", type=parse_hops, default=[3, 4, 5, 6],
                   metavar="L1,L2,...", help="hop counts to try (default: 3,4,5,6)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="full model plus one run per ablation flag")
    add_train_flags(p)
    p.add_argument("--flag", action="append", metavar="NAME",
                   help=f"ablation arm, repeatable (default: all of {', '.join(ABLATION_FLAGS)})")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cv", help="k-fold cross-validation over the pooled samples",
                       description="k-fold cross-validation over the pooled samples. Each held-out fold also "
                                   "drives early stopping, so fold accuracies are optimistic.")
    add_train_flags(p, cv=True)
    p.add_argument("--keep", type=int, default=3, help="fold checkpoints to keep (default: 3)")
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.time()
    try:
        cp = read_config(args.config)
        outputs = args.func(args, cp)
        manifest, config, inputs, seed = args._manifest
        if args.config:
            inputs = list(inputs) + [Path(args.config)]
        write_manifest(manifest, args.command, config, inputs, seed, started, outputs)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"medkg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as exc:
        print(f"medkg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort report
        log.debug("internal error", exc_info=True)
        print(f"medkg {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
